//! Access to an external LLM for embeddings, query expansion, candidate
//! re-ranking and value mapping.
//!
//! [`Gateway`] owns the prompts, output parsing, validation, re-asks and
//! fallbacks; an [`LlmBackend`] only moves requests over the wire. Every chat
//! operation is total: after the allowed re-asks it degrades to the non-LLM
//! answer and reports `fallback: true`.

mod extract;
mod http;
mod limiter;
mod mock;
pub mod prompts;

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, OnceLock};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;
use tracing::warn;

pub use extract::first_json_value;
pub use http::HttpBackend;
pub use limiter::Limiter;
pub use mock::{hashed_embedding, mock_similarity, MockBackend, MOCK_CHAT_MODEL, MOCK_EMBEDDING_DIM, MOCK_EMBEDDING_MODEL};
use prompts::Task;

use crate::corpus::PermissibleValue;
use crate::index::tokenize;
use crate::kv;

/// Re-asks after an unparseable or invalid chat reply.
pub const DEFAULT_REASKS: u32 = 2;
/// Most candidates a single re-rank request carries.
pub const MAX_RERANK_CANDIDATES: usize = 10;

#[derive(Debug, Clone, Error)]
pub enum GatewayError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("upstream returned HTTP {status}: {body}")]
    Status { status: u16, body: String },
    #[error("upstream rejected credentials: {0}")]
    Auth(String),
    #[error("unexpected upstream response: {0}")]
    Protocol(String),
    #[error("embedding failed for batch(es) {failed_batches:?}: {message}")]
    Embedding { failed_batches: Vec<usize>, message: String },
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("invalid LLM configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmConfig {
    pub endpoint_url: String,
    pub model_name: String,
    pub embedding_model_name: String,
    /// Name of the environment variable holding the API key.
    pub api_key_ref: String,
    pub request_timeout_secs: f64,
    pub max_retries: u32,
    pub max_concurrent_requests: usize,
    pub embed_batch_size: usize,
    pub retry_base_delay_ms: u64,
    pub audit_log: Option<PathBuf>,
}

impl Default for LlmConfig {
    fn default() -> Self {
        Self {
            endpoint_url: "https://api.openai.com/v1".into(),
            model_name: "gpt-4o".into(),
            embedding_model_name: "text-embedding-3-small".into(),
            api_key_ref: "OPENAI_API_KEY".into(),
            request_timeout_secs: 60.0,
            max_retries: 3,
            max_concurrent_requests: 4,
            embed_batch_size: 64,
            retry_base_delay_ms: 500,
            audit_log: None,
        }
    }
}

impl LlmConfig {
    pub fn validate(&self) -> Result<(), GatewayError> {
        if !(self.request_timeout_secs.is_finite() && self.request_timeout_secs > 0.0) {
            return Err(GatewayError::Config("request timeout must be > 0".into()));
        }
        if self.max_retries > 5 {
            return Err(GatewayError::Config("max_retries must be <= 5".into()));
        }
        if self.max_concurrent_requests == 0 || self.embed_batch_size == 0 {
            return Err(GatewayError::Config("concurrency and batch size must be >= 1".into()));
        }
        Ok(())
    }

    /// Applies one `key=value` setting (keys may carry an `llm.` prefix).
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), GatewayError> {
        let bad = |what: &str| GatewayError::Config(format!("bad {what} `{value}`"));
        match key.strip_prefix("llm.").unwrap_or(key) {
            "endpoint_url" | "endpoint" => self.endpoint_url = value.into(),
            "model_name" | "model" => self.model_name = value.into(),
            "embedding_model_name" | "embedding_model" => self.embedding_model_name = value.into(),
            "api_key_ref" | "api_key_env" => self.api_key_ref = value.into(),
            "request_timeout" | "timeout" => self.request_timeout_secs = value.parse().map_err(|_| bad("timeout"))?,
            "max_retries" => self.max_retries = value.parse().map_err(|_| bad("max_retries"))?,
            "max_concurrent_requests" => {
                self.max_concurrent_requests = value.parse().map_err(|_| bad("max_concurrent_requests"))?
            }
            "embed_batch_size" => self.embed_batch_size = value.parse().map_err(|_| bad("embed_batch_size"))?,
            "retry_base_delay_ms" => self.retry_base_delay_ms = value.parse().map_err(|_| bad("retry delay"))?,
            "audit_log" => self.audit_log = Some(PathBuf::from(value)),
            other => return Err(GatewayError::Config(format!("unknown LLM setting `{other}`"))),
        }
        Ok(())
    }

    pub fn from_kv(text: &str) -> Result<Self, GatewayError> {
        let mut config = Self::default();
        for (key, value) in kv::parse(text).map_err(GatewayError::Config)? {
            config.set(&key, &value)?;
        }
        config.validate()?;
        Ok(config)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChatRequest {
    pub model: String,
    pub temperature: f32,
    pub messages: Vec<ChatMessage>,
}

/// Moves chat and embedding requests to a provider.
pub trait LlmBackend: Send + Sync {
    fn chat(&self, request: &ChatRequest) -> Result<String, GatewayError>;
    fn embed(&self, model: &str, texts: &[String]) -> Result<Vec<Vec<f32>>, GatewayError>;
    fn is_mock(&self) -> bool {
        false
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpandedQuery {
    pub term: String,
    pub description: String,
    pub fallback: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RerankResult {
    /// A permutation of the input candidate ids.
    pub order: Vec<String>,
    pub fallback: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueMatch {
    pub source_value: String,
    pub matched_value: String,
    pub score: f64,
    #[serde(default)]
    pub fallback: bool,
}

#[derive(Debug, Clone)]
pub struct GatewaySettings {
    pub chat_model: String,
    pub embedding_model: String,
    pub embed_batch_size: usize,
    pub max_concurrent_requests: usize,
    pub reasks: u32,
}

impl GatewaySettings {
    pub fn from_config(config: &LlmConfig) -> Self {
        Self {
            chat_model: config.model_name.clone(),
            embedding_model: config.embedding_model_name.clone(),
            embed_batch_size: config.embed_batch_size,
            max_concurrent_requests: config.max_concurrent_requests,
            reasks: DEFAULT_REASKS,
        }
    }

    pub fn mock() -> Self {
        Self {
            chat_model: MOCK_CHAT_MODEL.into(),
            embedding_model: MOCK_EMBEDDING_MODEL.into(),
            embed_batch_size: 64,
            max_concurrent_requests: 4,
            reasks: DEFAULT_REASKS,
        }
    }
}

pub struct Gateway {
    backend: Arc<dyn LlmBackend>,
    settings: GatewaySettings,
    limiter: Limiter,
    cache: Mutex<HashMap<String, Vec<f32>>>,
    dimension: OnceLock<usize>,
    fallbacks: AtomicU64,
}

impl std::fmt::Debug for Gateway {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Gateway")
            .field("chat_model", &self.settings.chat_model)
            .field("embedding_model", &self.settings.embedding_model)
            .field("mock", &self.is_mock())
            .finish()
    }
}

impl Gateway {
    pub fn new(backend: Arc<dyn LlmBackend>, settings: GatewaySettings) -> Self {
        Self {
            limiter: Limiter::new(settings.max_concurrent_requests),
            backend,
            settings,
            cache: Mutex::new(HashMap::new()),
            dimension: OnceLock::new(),
            fallbacks: AtomicU64::new(0),
        }
    }

    pub fn mock() -> Self {
        Self::new(Arc::new(MockBackend), GatewaySettings::mock())
    }

    pub fn http(config: &LlmConfig) -> Result<Self, GatewayError> {
        Ok(Self::new(
            Arc::new(HttpBackend::new(config)?),
            GatewaySettings::from_config(config),
        ))
    }

    pub fn is_mock(&self) -> bool {
        self.backend.is_mock()
    }

    pub fn embedding_model(&self) -> &str {
        &self.settings.embedding_model
    }

    pub fn chat_model(&self) -> &str {
        &self.settings.chat_model
    }

    pub fn max_concurrent_requests(&self) -> usize {
        self.limiter.capacity()
    }

    /// Number of chat operations that fell back since construction.
    pub fn fallback_count(&self) -> u64 {
        self.fallbacks.load(Ordering::Relaxed)
    }

    /// Unit-norm embeddings, one per input and in input order.
    ///
    /// Uncached texts are sent in batches of `embed_batch_size`; batches run
    /// concurrently under the request cap.
    pub fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, GatewayError> {
        if let Some(i) = texts.iter().position(|t| t.trim().is_empty()) {
            return Err(GatewayError::InvalidInput(format!("text #{i} is empty")));
        }
        let model = &self.settings.embedding_model;
        let key = |t: &str| format!("{model}\u{1f}{t}");
        let mut pending: Vec<&String> = {
            let cache = self.cache.lock().unwrap_or_else(|p| p.into_inner());
            texts.iter().filter(|t| !cache.contains_key(&key(t))).collect()
        };
        let mut seen = std::collections::HashSet::new();
        pending.retain(|t| seen.insert(t.as_str()));

        let batches: Vec<Vec<String>> = pending
            .chunks(self.settings.embed_batch_size.max(1))
            .map(|c| c.iter().map(|t| (*t).clone()).collect())
            .collect();
        let results: Vec<Result<Vec<Vec<f32>>, GatewayError>> = std::thread::scope(|scope| {
            let handles: Vec<_> = batches
                .iter()
                .map(|batch| {
                    scope.spawn(move || {
                        let _permit = self.limiter.acquire();
                        self.backend.embed(model, batch)
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().unwrap_or_else(|_| Err(GatewayError::Transport("embedding worker panicked".into()))))
                .collect()
        });

        let mut failed = Vec::new();
        let mut last_error = String::new();
        let mut fresh = Vec::new();
        for (batch_no, (batch, result)) in batches.iter().zip(results).enumerate() {
            match result.and_then(|vectors| {
                if vectors.len() == batch.len() {
                    Ok(vectors)
                } else {
                    Err(GatewayError::Protocol(format!("{} vectors for {} texts", vectors.len(), batch.len())))
                }
            }) {
                Ok(vectors) => {
                    for (text, v) in batch.iter().zip(vectors) {
                        let unit = crate::index::normalize(&v)
                            .ok_or_else(|| GatewayError::Protocol("provider returned a zero vector".into()))?;
                        let dim = *self.dimension.get_or_init(|| unit.len());
                        if unit.len() != dim {
                            return Err(GatewayError::Protocol(format!(
                                "embedding dimension changed from {dim} to {}",
                                unit.len()
                            )));
                        }
                        fresh.push((key(text), unit));
                    }
                }
                Err(e) => {
                    failed.push(batch_no);
                    last_error = e.to_string();
                }
            }
        }
        if !failed.is_empty() {
            return Err(GatewayError::Embedding {
                failed_batches: failed,
                message: last_error,
            });
        }
        let mut cache = self.cache.lock().unwrap_or_else(|p| p.into_inner());
        cache.extend(fresh);
        Ok(texts.iter().map(|t| cache[&key(t)].clone()).collect())
    }

    /// Sends `task` with `user` content, re-asking until `parse` accepts a reply.
    fn ask<T>(&self, task: Task, user: String, parse: impl Fn(&str) -> Option<T>) -> Option<T> {
        let request = ChatRequest {
            model: self.settings.chat_model.clone(),
            temperature: 0.0,
            messages: vec![
                ChatMessage {
                    role: "system".into(),
                    content: task.instruction().to_string(),
                },
                ChatMessage {
                    role: "user".into(),
                    content: user,
                },
            ],
        };
        for attempt in 0..=self.settings.reasks {
            let reply = {
                let _permit = self.limiter.acquire();
                self.backend.chat(&request)
            };
            match reply {
                Ok(text) => match parse(&text) {
                    Some(value) => return Some(value),
                    None => warn!(?task, attempt, "unusable model reply"),
                },
                Err(e) => {
                    warn!(?task, error = %e, "chat request failed");
                    return None;
                }
            }
        }
        None
    }

    fn note_fallback(&self) {
        self.fallbacks.fetch_add(1, Ordering::Relaxed);
    }

    /// Rewrites a search term and description. Falls back to the originals.
    pub fn expand_query(&self, term: &str, description: &str) -> ExpandedQuery {
        let user = prompts::query_expansion_input(term, description);
        match self.ask(Task::QueryExpansion, user, |text| parse_expansion(text, description)) {
            Some((term, description)) => ExpandedQuery {
                term,
                description,
                fallback: false,
            },
            None => {
                warn!(term, "query expansion fell back to the original query");
                self.note_fallback();
                ExpandedQuery {
                    term: term.to_string(),
                    description: description.to_string(),
                    fallback: true,
                }
            }
        }
    }

    /// Re-ranks `(tiny_id, display text)` candidates. The result is always a
    /// permutation of the input ids; invalid replies fall back to input order.
    /// Only the first [`MAX_RERANK_CANDIDATES`] are sent; the rest keep their tail order.
    pub fn rerank(&self, term: &str, description: &str, candidates: &[(String, String)]) -> RerankResult {
        let input_order: Vec<String> = candidates.iter().map(|(id, _)| id.clone()).collect();
        if candidates.len() <= 1 {
            return RerankResult {
                order: input_order,
                fallback: false,
            };
        }
        let (head, tail) = candidates.split_at(candidates.len().min(MAX_RERANK_CANDIDATES));
        let payload: Vec<prompts::RerankCandidate<'_>> = head
            .iter()
            .map(|(id, text)| prompts::RerankCandidate { id, text })
            .collect();
        let user = prompts::rerank_input(term, description, &payload);
        match self.ask(Task::Rerank, user, |text| parse_rerank(text, head)) {
            Some(mut order) => {
                order.extend(tail.iter().map(|(id, _)| id.clone()));
                RerankResult { order, fallback: false }
            }
            None => {
                warn!(term, "re-ranking fell back to retrieval order");
                self.note_fallback();
                RerankResult {
                    order: input_order,
                    fallback: true,
                }
            }
        }
    }

    /// Best match for `value_name` within `value_set`.
    ///
    /// Out-of-set or unparseable answers fall back to a case-insensitive
    /// exact match (score 1) or else the highest token-overlap member (score 0).
    pub fn map_value(&self, value_name: &str, value_set: &[PermissibleValue]) -> Result<ValueMatch, GatewayError> {
        if value_set.is_empty() {
            return Err(GatewayError::InvalidInput("value set is empty".into()));
        }
        let names: Vec<&str> = value_set.iter().map(|v| v.value_name.as_str()).collect();
        let user = prompts::value_mapping_input(value_name, &names);
        if let Some((matched, score)) = self.ask(Task::ValueMapping, user, |text| parse_value_match(text, &names)) {
            return Ok(ValueMatch {
                source_value: value_name.to_string(),
                matched_value: matched,
                score,
                fallback: false,
            });
        }
        self.note_fallback();
        warn!(value_name, "value mapping fell back to lexical matching");
        Ok(fallback_value_match(value_name, &names))
    }
}

fn fallback_value_match(value_name: &str, names: &[&str]) -> ValueMatch {
    let wanted = value_name.trim().to_lowercase();
    if let Some(exact) = names.iter().find(|n| n.trim().to_lowercase() == wanted) {
        return ValueMatch {
            source_value: value_name.to_string(),
            matched_value: exact.to_string(),
            score: 1.0,
            fallback: true,
        };
    }
    let source: std::collections::HashSet<String> = tokenize(value_name).into_iter().collect();
    let mut best = (names[0], 0usize);
    for name in names {
        let overlap = tokenize(name).into_iter().collect::<std::collections::HashSet<_>>().intersection(&source).count();
        if overlap > best.1 {
            best = (name, overlap);
        }
    }
    ValueMatch {
        source_value: value_name.to_string(),
        matched_value: best.0.to_string(),
        score: 0.0,
        fallback: true,
    }
}

fn string_or_joined(value: &Value) -> Option<String> {
    match value {
        Value::String(s) => Some(s.trim().to_string()),
        Value::Array(items) => {
            let parts: Vec<&str> = items.iter().filter_map(Value::as_str).map(str::trim).collect();
            (parts.len() == items.len()).then(|| parts.join(" "))
        }
        _ => None,
    }
}

fn parse_expansion(text: &str, original_description: &str) -> Option<(String, String)> {
    let value = first_json_value(text)?;
    let obj = value.as_object()?;
    let term = obj
        .get("term")
        .or_else(|| obj.get("terms"))
        .and_then(string_or_joined)
        .filter(|t| !t.is_empty())?;
    let description = match obj.get("description").or_else(|| obj.get("descriptions")) {
        Some(v) => string_or_joined(v)?,
        None => String::new(),
    };
    let description = if description.is_empty() {
        original_description.to_string()
    } else {
        description
    };
    Some((term, description))
}

fn parse_rerank(text: &str, candidates: &[(String, String)]) -> Option<Vec<String>> {
    let value = first_json_value(text)?;
    let items = match &value {
        Value::Array(items) => items.clone(),
        Value::Object(obj) => obj.values().find_map(|v| v.as_array().cloned())?,
        _ => return None,
    };
    let resolve = |s: &str| -> Option<String> {
        candidates
            .iter()
            .find(|(id, text)| id == s || text == s)
            .map(|(id, _)| id.clone())
    };
    let order: Vec<String> = items
        .iter()
        .map(|item| match item {
            Value::String(s) => resolve(s),
            Value::Object(o) => ["id", "tiny_id", "tinyId"]
                .iter()
                .find_map(|k| o.get(*k).and_then(Value::as_str))
                .and_then(resolve),
            _ => None,
        })
        .collect::<Option<_>>()?;
    let mut got = order.clone();
    let mut want: Vec<String> = candidates.iter().map(|(id, _)| id.clone()).collect();
    got.sort();
    want.sort();
    (got == want).then_some(order)
}

fn parse_score(value: &Value) -> Option<f64> {
    let score = match value {
        Value::Number(n) => n.as_f64()?,
        Value::String(s) => s.trim().parse().ok()?,
        _ => return None,
    };
    score.is_finite().then(|| score.clamp(0.0, 1.0))
}

fn parse_value_match(text: &str, names: &[&str]) -> Option<(String, f64)> {
    let value = first_json_value(text)?;
    let record = match &value {
        Value::Array(items) => items.first()?.clone(),
        Value::Object(_) => value.clone(),
        _ => return None,
    };
    let obj = record.as_object()?;
    let matched = ["value", "matched_value", "value_name", "valueName", "concept", "name", "match"]
        .iter()
        .find_map(|k| obj.get(*k).and_then(Value::as_str))?;
    let score = ["score", "similarity", "similarity_score", "semantic_similarity"]
        .iter()
        .find_map(|k| obj.get(*k).and_then(parse_score))?;
    let canonical = names
        .iter()
        .find(|n| **n == matched)
        .or_else(|| names.iter().find(|n| n.trim().to_lowercase() == matched.trim().to_lowercase()))?;
    Some((canonical.to_string(), score))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::AtomicUsize;

    /// Replies with a fixed script, cycling on the last entry.
    struct Scripted {
        replies: Vec<Result<String, GatewayError>>,
        calls: AtomicUsize,
        requests: Mutex<Vec<ChatRequest>>,
    }

    impl Scripted {
        fn new(replies: Vec<Result<String, GatewayError>>) -> Arc<Self> {
            Arc::new(Self {
                replies,
                calls: AtomicUsize::new(0),
                requests: Mutex::new(Vec::new()),
            })
        }
    }

    impl LlmBackend for Scripted {
        fn chat(&self, request: &ChatRequest) -> Result<String, GatewayError> {
            self.requests.lock().unwrap().push(request.clone());
            let i = self.calls.fetch_add(1, Ordering::SeqCst);
            self.replies[i.min(self.replies.len() - 1)].clone()
        }

        fn embed(&self, _model: &str, texts: &[String]) -> Result<Vec<Vec<f32>>, GatewayError> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            Ok(texts.iter().map(|t| vec![t.len() as f32, 1.0]).collect())
        }
    }

    fn gateway(backend: Arc<Scripted>) -> Gateway {
        let mut settings = GatewaySettings::mock();
        settings.embed_batch_size = 64;
        Gateway::new(backend, settings)
    }

    fn cands(ids: &[&str]) -> Vec<(String, String)> {
        ids.iter().map(|id| (id.to_string(), format!("{id} — def (X)"))).collect()
    }

    fn pv(names: &[&str]) -> Vec<PermissibleValue> {
        names.iter().map(|n| PermissibleValue::named(*n)).collect()
    }

    #[test]
    fn embed_batches_in_order() {
        let backend = Scripted::new(vec![]);
        let gw = gateway(backend.clone());
        let texts: Vec<String> = (0..130).map(|i| format!("text number {i}")).collect();
        let vectors = gw.embed(&texts).unwrap();
        assert_eq!(vectors.len(), 130);
        assert_eq!(backend.calls.load(Ordering::SeqCst), 3);
        for (t, v) in texts.iter().zip(&vectors) {
            let norm = (t.len() as f32).hypot(1.0);
            assert!((v[0] - t.len() as f32 / norm).abs() < 1e-6);
        }
        assert!(gw.embed(&[]).unwrap().is_empty());
        // cached now
        gw.embed(&texts[..10]).unwrap();
        assert_eq!(backend.calls.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn embed_rejects_empty_text() {
        let gw = Gateway::mock();
        assert!(matches!(gw.embed(&["".into()]), Err(GatewayError::InvalidInput(_))));
    }

    #[test]
    fn mock_embed_is_deterministic() {
        let a = Gateway::mock().embed(&["a".into()]).unwrap();
        let b = Gateway::mock().embed(&["a".into()]).unwrap();
        assert_eq!(a, b);
        assert_eq!(a[0].len(), MOCK_EMBEDDING_DIM);
    }

    #[test]
    fn expansion_with_mock_is_identity() {
        let q = Gateway::mock().expand_query("heart attack", "history of heart attack");
        assert_eq!(q.term, "heart attack");
        assert_eq!(q.description, "history of heart attack");
        assert!(!q.fallback);
    }

    #[test]
    fn expansion_parses_fenced_reply() {
        let backend = Scripted::new(vec![Ok(
            "```json\n{\"term\": \"heart attack, myocardial infarction\", \"description\": \"MI history\"}\n```".into(),
        )]);
        let q = gateway(backend).expand_query("heart attack", "");
        assert_eq!(q.term, "heart attack, myocardial infarction");
        assert_eq!(q.description, "MI history");
    }

    #[test]
    fn expansion_falls_back_after_three_bad_replies() {
        let backend = Scripted::new(vec![Ok("not json".into()), Ok("{broken".into()), Ok("[1,2]".into())]);
        let gw = gateway(backend.clone());
        let q = gw.expand_query("bp", "blood pressure");
        assert_eq!(
            q,
            ExpandedQuery {
                term: "bp".into(),
                description: "blood pressure".into(),
                fallback: true
            }
        );
        assert_eq!(backend.calls.load(Ordering::SeqCst), 3);
        assert_eq!(gw.fallback_count(), 1);
    }

    #[test]
    fn transport_failure_falls_back_without_reasking() {
        let backend = Scripted::new(vec![Err(GatewayError::Transport("down".into()))]);
        let gw = gateway(backend.clone());
        let r = gw.rerank("x", "", &cands(&["a", "b"]));
        assert!(r.fallback);
        assert_eq!(r.order, ["a", "b"]);
        assert_eq!(backend.calls.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn rerank_single_candidate() {
        let r = Gateway::mock().rerank("x", "", &cands(&["only"]));
        assert_eq!(r.order, ["only"]);
    }

    #[test]
    fn mock_rerank_promotes_exact_name() {
        let candidates = vec![
            ("c2".to_string(), "Race category — a (NINDS)".to_string()),
            ("c1".to_string(), "Race — b (NIH-Endorsed)".to_string()),
            ("c3".to_string(), "Ethnicity — c (NINDS)".to_string()),
        ];
        let r = Gateway::mock().rerank("race", "", &candidates);
        assert_eq!(r.order, ["c1", "c2", "c3"]);
        assert!(!r.fallback);
    }

    #[test]
    fn rerank_retries_on_missing_id_then_falls_back() {
        let backend = Scripted::new(vec![Ok(r#"["b"]"#.into())]);
        let gw = gateway(backend.clone());
        let r = gw.rerank("x", "", &cands(&["a", "b", "c"]));
        assert_eq!(r.order, ["a", "b", "c"]);
        assert!(r.fallback);
        assert_eq!(backend.calls.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn rerank_accepts_second_valid_reply() {
        let backend = Scripted::new(vec![
            Ok(r#"["b", "zz", "a"]"#.into()),
            Ok(r#"Here: [{"id": "c"}, {"id": "a"}, {"id": "b"}]"#.into()),
        ]);
        let r = gateway(backend).rerank("x", "", &cands(&["a", "b", "c"]));
        assert_eq!(r.order, ["c", "a", "b"]);
        assert!(!r.fallback);
    }

    #[test]
    fn rerank_rejects_duplicated_ids() {
        assert_eq!(parse_rerank(r#"["a", "a"]"#, &cands(&["a", "b"])), None);
        assert_eq!(
            parse_rerank(r#"{"results": ["b", "a"]}"#, &cands(&["a", "b"])),
            Some(vec!["b".into(), "a".into()])
        );
    }

    #[test]
    fn map_value_exact_with_mock() {
        let m = Gateway::mock().map_value("Male", &pv(&["Male", "Female", "Unknown"])).unwrap();
        assert_eq!(m.matched_value, "Male");
        assert_eq!(m.score, 1.0);
    }

    #[test]
    fn map_value_prefix_with_mock() {
        let m = Gateway::mock().map_value("M", &pv(&["Male", "Female"])).unwrap();
        assert_eq!(m.matched_value, "Male");
        assert!(m.score < 1.0);
        assert_eq!(m.score, mock_similarity("M", "Male"));
    }

    #[test]
    fn map_value_out_of_set_falls_back() {
        let backend = Scripted::new(vec![Ok(r#"[{"value": "N/A", "score": 0.9}]"#.into())]);
        let gw = gateway(backend.clone());
        let m = gw.map_value("unknown", &pv(&["Yes", "No", "Unknown"])).unwrap();
        assert_eq!(m.matched_value, "Unknown");
        assert_eq!(m.score, 1.0);
        assert!(m.fallback);
        assert_eq!(backend.calls.load(Ordering::SeqCst), 3);

        let m = gw.map_value("not sure at all", &pv(&["Yes", "No", "Not sure"])).unwrap();
        assert_eq!(m.matched_value, "Not sure");
        assert_eq!(m.score, 0.0);
    }

    #[test]
    fn map_value_clamps_score() {
        let backend = Scripted::new(vec![Ok(r#"[{"value": "yes", "score": 7}]"#.into())]);
        let m = gateway(backend).map_value("Y", &pv(&["Yes", "No"])).unwrap();
        assert_eq!(m.matched_value, "Yes");
        assert_eq!(m.score, 1.0);
    }

    #[test]
    fn map_value_requires_values() {
        assert!(Gateway::mock().map_value("x", &[]).is_err());
    }

    #[test]
    fn requests_carry_instruction_and_zero_temperature() {
        let backend = Scripted::new(vec![Ok(r#"{"term":"a","description":"b"}"#.into())]);
        gateway(backend.clone()).expand_query("a", "b");
        let req = backend.requests.lock().unwrap()[0].clone();
        assert_eq!(req.temperature, 0.0);
        assert_eq!(req.messages[0].content, prompts::QUERY_EXPANSION);
        assert!(req.messages[1].content.starts_with("Input: {\"term\":\"a\",\"description\":\"b\"}"));
    }

    #[test]
    fn config_validation_and_kv() {
        let c = LlmConfig::from_kv("llm.model=gpt-4o-mini\nmax_retries=2\n# comment\ntimeout=5").unwrap();
        assert_eq!(c.model_name, "gpt-4o-mini");
        assert_eq!(c.max_retries, 2);
        assert!(LlmConfig::from_kv("max_retries=6").is_err());
        assert!(LlmConfig::from_kv("timeout=0").is_err());
        assert!(LlmConfig::from_kv("bogus=1").is_err());
    }
}
