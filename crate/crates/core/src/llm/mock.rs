//! Deterministic offline stand-in for the chat and embedding services.
//!
//! It answers the same wire requests a real model receives, so every parsing
//! and validation path runs in hermetic tests:
//!
//! * embeddings: 256-dim hashed bag of tokens, L2-normalized
//! * query expansion: echoes the input unchanged
//! * re-ranking: stable sort that moves candidates named exactly like the
//!   query term (case-insensitive) to the front
//! * value mapping: best [`mock_similarity`] over the value set, first wins ties

use super::prompts::{section, Task};
use super::{ChatRequest, GatewayError, LlmBackend};
use crate::index::tokenize;

pub const MOCK_EMBEDDING_DIM: usize = 256;
pub const MOCK_EMBEDDING_MODEL: &str = "mock-hashed-bow-256";
pub const MOCK_CHAT_MODEL: &str = "mock-chat";

#[derive(Debug, Clone, Copy, Default)]
pub struct MockBackend;

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(*b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Hashed bag-of-tokens embedding. Token-free text hashes as a single bucket.
pub fn hashed_embedding(text: &str) -> Vec<f32> {
    let mut v = vec![0.0f32; MOCK_EMBEDDING_DIM];
    let tokens = tokenize(text);
    if tokens.is_empty() {
        v[(fnv1a(text.as_bytes()) % MOCK_EMBEDDING_DIM as u64) as usize] = 1.0;
        return v;
    }
    for t in &tokens {
        v[(fnv1a(t.as_bytes()) % MOCK_EMBEDDING_DIM as u64) as usize] += 1.0;
    }
    let norm = v.iter().map(|x| x * x).sum::<f32>().sqrt();
    v.iter_mut().for_each(|x| *x /= norm);
    v
}

/// Similarity used by the mock value mapper.
///
/// 1.0 for a case-insensitive exact match. Otherwise a token overlap ratio:
/// each source token scores 1 for an identical target token or 0.5 when one
/// token is a prefix of the other, and the sum is divided by the size of the
/// token union (`|a| + |b| − matches`), so "M" vs "Male" scores 0.5. With
/// only exact token matches this is the Jaccard index of the token sets.
pub fn mock_similarity(source: &str, target: &str) -> f64 {
    if source.trim().to_lowercase() == target.trim().to_lowercase() {
        return 1.0;
    }
    let a = dedup(tokenize(source));
    let b = dedup(tokenize(target));
    if a.is_empty() || b.is_empty() {
        return 0.0;
    }
    let mut credit = 0.0;
    let mut matched = 0usize;
    for s in &a {
        let best = b
            .iter()
            .map(|t| {
                if s == t {
                    1.0
                } else if t.starts_with(s.as_str()) || s.starts_with(t.as_str()) {
                    0.5
                } else {
                    0.0
                }
            })
            .fold(0.0, f64::max);
        if best > 0.0 {
            credit += best;
            matched += 1;
        }
    }
    let union = (a.len() + b.len() - matched) as f64;
    credit / union
}

fn dedup(mut tokens: Vec<String>) -> Vec<String> {
    let mut seen = std::collections::HashSet::new();
    tokens.retain(|t| seen.insert(t.clone()));
    tokens
}

/// True when a candidate text starts with `term` as its whole name.
fn names_match(text: &str, term: &str) -> bool {
    let text = text.trim().to_lowercase();
    let term = term.trim().to_lowercase();
    !term.is_empty()
        && (text == term || text.starts_with(&format!("{term} — ")) || text.starts_with(&format!("{term} (")))
}

fn parse_section(message: &str, label: &str) -> Result<serde_json::Value, GatewayError> {
    let raw = section(message, label)
        .ok_or_else(|| GatewayError::Protocol(format!("mock: request lacks `{label}` section")))?;
    serde_json::from_str(raw).map_err(|e| GatewayError::Protocol(format!("mock: bad `{label}` json: {e}")))
}

impl MockBackend {
    fn answer(task: Task, user: &str) -> Result<String, GatewayError> {
        let input = parse_section(user, "Input: ")?;
        match task {
            Task::QueryExpansion => Ok(input.to_string()),
            Task::Rerank => {
                let term = input["term"].as_str().unwrap_or_default();
                let results = parse_section(user, "Search Results: ")?;
                let items = results.as_array().cloned().unwrap_or_default();
                let (mut front, back): (Vec<_>, Vec<_>) = items
                    .iter()
                    .partition(|c| names_match(c["text"].as_str().unwrap_or_default(), term));
                front.extend(back);
                let ids: Vec<_> = front.iter().map(|c| c["id"].clone()).collect();
                Ok(serde_json::Value::Array(ids).to_string())
            }
            Task::ValueMapping => {
                let value = input["value name"].as_str().unwrap_or_default();
                let set = parse_section(user, "Value Set: ")?;
                let mut best: Option<(&str, f64)> = None;
                for candidate in set.as_array().into_iter().flatten().filter_map(|v| v.as_str()) {
                    let score = mock_similarity(value, candidate);
                    if best.is_none_or(|(_, s)| score > s) {
                        best = Some((candidate, score));
                    }
                }
                let (matched, score) =
                    best.ok_or_else(|| GatewayError::Protocol("mock: empty value set".into()))?;
                Ok(serde_json::json!([{ "value": matched, "score": score }]).to_string())
            }
        }
    }
}

impl LlmBackend for MockBackend {
    fn chat(&self, request: &ChatRequest) -> Result<String, GatewayError> {
        let system = request
            .messages
            .iter()
            .find(|m| m.role == "system")
            .ok_or_else(|| GatewayError::Protocol("mock: no system message".into()))?;
        let user = request
            .messages
            .iter()
            .find(|m| m.role == "user")
            .ok_or_else(|| GatewayError::Protocol("mock: no user message".into()))?;
        let task = Task::from_instruction(&system.content)
            .ok_or_else(|| GatewayError::Protocol("mock: unknown instruction".into()))?;
        Self::answer(task, &user.content)
    }

    fn embed(&self, _model: &str, texts: &[String]) -> Result<Vec<Vec<f32>>, GatewayError> {
        Ok(texts.iter().map(|t| hashed_embedding(t)).collect())
    }

    fn is_mock(&self) -> bool {
        true
    }
}
