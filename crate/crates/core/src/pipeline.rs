//! Recommendation engine: query expansion, hybrid retrieval, reciprocal rank
//! fusion, top-k selection and "LLM suggested" promotion.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::warn;

use crate::corpus::CdeRecord;
use crate::index::{tokenize, IndexBundle, IndexError, ScoredHit};
use crate::kv;
use crate::llm::{Gateway, GatewayError, ValueMatch};

/// Longest candidate text sent to the re-ranker, in characters.
pub const RERANK_TEXT_LIMIT: usize = 300;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error("invalid pipeline configuration: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("configuration needs an LLM gateway but none is available")]
    GatewayRequired,
    #[error("index has no embeddings; rebuild it with embeddings to use embedding search")]
    MissingVectors,
    #[error("index embeddings come from `{index}` but the gateway embeds with `{gateway}`")]
    ModelMismatch { index: String, gateway: String },
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

/// A local data element awaiting normalization.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceElement {
    pub element_id: String,
    pub name: String,
    #[serde(default)]
    pub description: String,
    #[serde(default)]
    pub value_set: Vec<String>,
}

impl SourceElement {
    pub fn new(element_id: impl Into<String>, name: impl Into<String>, description: impl Into<String>) -> Self {
        Self {
            element_id: element_id.into(),
            name: name.into(),
            description: description.into(),
            value_set: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LexicalQueryMode {
    NameOnly,
    #[default]
    NameAndDescription,
}

/// Which retrievers see the expanded query.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExpansionScope {
    #[default]
    Both,
    LexicalOnly,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub use_expansion: bool,
    pub use_embedding: bool,
    pub use_rerank: bool,
    pub collections: Option<BTreeSet<String>>,
    pub top_k: usize,
    pub rrf_k: usize,
    pub lexical_query_mode: LexicalQueryMode,
    /// Each retriever fetches `top_k * depth_factor` hits before fusion.
    pub depth_factor: usize,
    pub expansion_scope: ExpansionScope,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            use_expansion: false,
            use_embedding: false,
            use_rerank: false,
            collections: None,
            top_k: 10,
            rrf_k: 60,
            lexical_query_mode: LexicalQueryMode::default(),
            depth_factor: 3,
            expansion_scope: ExpansionScope::default(),
        }
    }
}

fn on_off(key: &str, value: &str) -> Result<bool, PipelineError> {
    match value.trim().to_ascii_lowercase().as_str() {
        "on" | "true" | "yes" | "1" => Ok(true),
        "off" | "false" | "no" | "0" => Ok(false),
        _ => Err(PipelineError::Config(format!("`{key}` must be on or off, got `{value}`"))),
    }
}

fn flag(b: bool) -> &'static str {
    if b {
        "on"
    } else {
        "off"
    }
}

/// Splits `A,B` into a set; an empty list means no restriction.
pub fn parse_collections(value: &str) -> Option<BTreeSet<String>> {
    let set: BTreeSet<String> = value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(String::from)
        .collect();
    (!set.is_empty()).then_some(set)
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.top_k == 0 || self.rrf_k == 0 || self.depth_factor == 0 {
            return Err(PipelineError::Config("top_k, rrf_k and depth_factor must be >= 1".into()));
        }
        Ok(())
    }

    pub fn needs_gateway(&self) -> bool {
        self.use_expansion || self.use_embedding || self.use_rerank
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), PipelineError> {
        let number = |v: &str| {
            v.trim()
                .parse::<usize>()
                .map_err(|_| PipelineError::Config(format!("`{key}` must be a positive integer, got `{v}`")))
        };
        match key {
            "preset" => {
                let keep = (self.collections.clone(), self.top_k, self.rrf_k);
                *self = value.parse::<Preset>()?.config();
                (self.collections, self.top_k, self.rrf_k) = keep;
            }
            "expansion" => self.use_expansion = on_off(key, value)?,
            "embedding" => self.use_embedding = on_off(key, value)?,
            "rerank" => self.use_rerank = on_off(key, value)?,
            "collections" => self.collections = parse_collections(value),
            "top_k" => self.top_k = number(value)?,
            "rrf_k" => self.rrf_k = number(value)?,
            "depth_factor" => self.depth_factor = number(value)?,
            "lexical_query_mode" => {
                self.lexical_query_mode = match value.trim() {
                    "name_only" => LexicalQueryMode::NameOnly,
                    "name_and_description" => LexicalQueryMode::NameAndDescription,
                    other => return Err(PipelineError::Config(format!("unknown lexical_query_mode `{other}`"))),
                }
            }
            "expansion_scope" => {
                self.expansion_scope = match value.trim() {
                    "both" => ExpansionScope::Both,
                    "lexical_only" => ExpansionScope::LexicalOnly,
                    other => return Err(PipelineError::Config(format!("unknown expansion_scope `{other}`"))),
                }
            }
            other => return Err(PipelineError::Config(format!("unknown pipeline setting `{other}`"))),
        }
        Ok(())
    }

    /// Builds a config from `key=value` pairs applied over the defaults.
    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self, PipelineError> {
        let mut config = Self::default();
        for (k, v) in pairs {
            config.set(k, v)?;
        }
        config.validate()?;
        Ok(config)
    }

    pub fn from_kv(text: &str) -> Result<Self, PipelineError> {
        let pairs = kv::parse(text).map_err(PipelineError::Config)?;
        Self::from_pairs(pairs.iter().map(|(k, v)| (k.as_str(), v.as_str())))
    }

    pub fn to_kv(&self) -> String {
        let collections = self
            .collections
            .as_ref()
            .map(|c| c.iter().cloned().collect::<Vec<_>>().join(","))
            .unwrap_or_default();
        let mode = match self.lexical_query_mode {
            LexicalQueryMode::NameOnly => "name_only",
            LexicalQueryMode::NameAndDescription => "name_and_description",
        };
        let scope = match self.expansion_scope {
            ExpansionScope::Both => "both",
            ExpansionScope::LexicalOnly => "lexical_only",
        };
        format!(
            "expansion={}\nembedding={}\nrerank={}\ncollections={collections}\ntop_k={}\nrrf_k={}\nlexical_query_mode={mode}\ndepth_factor={}\nexpansion_scope={scope}\n",
            flag(self.use_expansion),
            flag(self.use_embedding),
            flag(self.use_rerank),
            self.top_k,
            self.rrf_k,
            self.depth_factor,
        )
    }
}

/// The four named method configurations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Preset {
    #[serde(rename = "bm25")]
    Bm25,
    #[serde(rename = "bm25+emb")]
    Bm25Emb,
    #[serde(rename = "bm25+rank")]
    Bm25Rank,
    #[serde(rename = "bm25+emb+rank")]
    Bm25EmbRank,
}

impl Preset {
    pub const ALL: [Preset; 4] = [Preset::Bm25, Preset::Bm25Emb, Preset::Bm25Rank, Preset::Bm25EmbRank];

    pub fn as_str(self) -> &'static str {
        match self {
            Preset::Bm25 => "bm25",
            Preset::Bm25Emb => "bm25+emb",
            Preset::Bm25Rank => "bm25+rank",
            Preset::Bm25EmbRank => "bm25+emb+rank",
        }
    }

    /// Name used in report tables.
    pub fn label(self) -> &'static str {
        match self {
            Preset::Bm25 => "BM25",
            Preset::Bm25Emb => "BM25 + Emb",
            Preset::Bm25Rank => "BM25+Rank",
            Preset::Bm25EmbRank => "BM25+Emb+Rank",
        }
    }

    pub fn uses_embedding(self) -> bool {
        matches!(self, Preset::Bm25Emb | Preset::Bm25EmbRank)
    }

    pub fn uses_rerank(self) -> bool {
        matches!(self, Preset::Bm25Rank | Preset::Bm25EmbRank)
    }

    pub fn config(self) -> PipelineConfig {
        PipelineConfig {
            use_embedding: self.uses_embedding(),
            use_rerank: self.uses_rerank(),
            ..PipelineConfig::default()
        }
    }

    pub fn parse_list(list: &str) -> Result<Vec<Preset>, PipelineError> {
        list.split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(str::parse)
            .collect()
    }
}

impl FromStr for Preset {
    type Err = PipelineError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Preset::ALL
            .into_iter()
            .find(|p| p.as_str() == s.trim())
            .ok_or_else(|| {
                PipelineError::Config(format!(
                    "unknown preset `{s}` (expected one of bm25, bm25+emb, bm25+rank, bm25+emb+rank)"
                ))
            })
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub tiny_id: String,
    pub name: String,
    pub collection: String,
    pub lexical_score: Option<f64>,
    pub vector_score: Option<f64>,
    pub fused_score: f64,
    pub rank: usize,
    pub llm_suggested: bool,
    pub detail_url: String,
}

/// What was actually searched for.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct QueryTrace {
    pub original_term: String,
    pub original_description: String,
    pub expanded_term: Option<String>,
    pub expanded_description: Option<String>,
    pub lexical_query: String,
    pub embedding_query: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateList {
    pub element_id: String,
    pub config: PipelineConfig,
    pub query: QueryTrace,
    pub candidates: Vec<Candidate>,
    /// Stage durations in milliseconds.
    pub timings: BTreeMap<String, f64>,
    /// Stages that fell back to non-LLM behavior.
    pub degraded: Vec<String>,
}

impl CandidateList {
    pub fn ids(&self) -> Vec<&str> {
        self.candidates.iter().map(|c| c.tiny_id.as_str()).collect()
    }

    /// 1-based rank of the first candidate in `targets`.
    pub fn rank_of_any<'a>(&self, targets: impl IntoIterator<Item = &'a str>) -> Option<usize> {
        let targets: BTreeSet<&str> = targets.into_iter().collect();
        self.candidates
            .iter()
            .find(|c| targets.contains(c.tiny_id.as_str()))
            .map(|c| c.rank)
    }
}

/// Reciprocal rank fusion of two rank-ordered hit lists.
///
/// Each document scores `Σ 1/(rrf_k + rank)` over the lists containing it;
/// output is by fused score descending, then tiny id ascending.
pub fn fuse(lexical: &[ScoredHit], vector: &[ScoredHit], rrf_k: usize) -> Vec<(String, f64)> {
    let mut fused: HashMap<&str, f64> = HashMap::new();
    for list in [lexical, vector] {
        for (i, hit) in list.iter().enumerate() {
            *fused.entry(hit.tiny_id.as_str()).or_default() += 1.0 / (rrf_k + i + 1) as f64;
        }
    }
    let mut out: Vec<(String, f64)> = fused.into_iter().map(|(id, s)| (id.to_string(), s)).collect();
    out.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    out
}

/// Moves the candidate at `position` to rank 1 with the suggestion flag,
/// leaving the others in their existing relative order.
pub fn promote(candidates: &mut Vec<Candidate>, position: usize) {
    if position >= candidates.len() {
        return;
    }
    let mut chosen = candidates.remove(position);
    chosen.llm_suggested = true;
    candidates.insert(0, chosen);
    for (i, c) in candidates.iter_mut().enumerate() {
        c.rank = i + 1;
    }
}

fn truncate_chars(text: &str, limit: usize) -> String {
    match text.char_indices().nth(limit) {
        Some((cut, _)) => text[..cut].to_string(),
        None => text.to_string(),
    }
}

fn join_query(term: &str, description: &str, sep: &str) -> String {
    if description.trim().is_empty() {
        term.to_string()
    } else {
        format!("{term}{sep}{description}")
    }
}

fn elapsed_ms(start: Instant) -> f64 {
    start.elapsed().as_secs_f64() * 1000.0
}

struct Retrieval {
    query: QueryTrace,
    lexical: Vec<ScoredHit>,
    vector: Vec<ScoredHit>,
    degraded: Vec<String>,
}

fn check_embedding(bundle: &IndexBundle, gateway: Option<&Gateway>) -> Result<(), PipelineError> {
    let gateway = gateway.ok_or(PipelineError::GatewayRequired)?;
    let vectors = bundle.vectors.as_ref().ok_or(PipelineError::MissingVectors)?;
    if vectors.model() != gateway.embedding_model() {
        return Err(PipelineError::ModelMismatch {
            index: vectors.model().to_string(),
            gateway: gateway.embedding_model().to_string(),
        });
    }
    Ok(())
}

/// Lexical plus optional vector retrieval for an already-expanded query.
fn retrieve(
    query: QueryTrace,
    embedding_query: Option<String>,
    config: &PipelineConfig,
    bundle: &IndexBundle,
    gateway: Option<&Gateway>,
    timings: &mut BTreeMap<String, f64>,
) -> Result<Retrieval, PipelineError> {
    let depth = config.top_k.saturating_mul(config.depth_factor);
    let filter = config.collections.as_ref();
    let mut degraded = Vec::new();

    let start = Instant::now();
    let lexical = bundle.lexical.search(&query.lexical_query, filter, depth);
    timings.insert("lexical".into(), elapsed_ms(start));

    let mut vector = Vec::new();
    let mut trace = query;
    if let Some(text) = embedding_query {
        let start = Instant::now();
        // both checked by check_embedding
        let (gateway, index) = (gateway.unwrap(), bundle.vectors.as_ref().unwrap());
        match gateway.embed(std::slice::from_ref(&text)) {
            Ok(mut v) => vector = index.search(&v.remove(0), filter, depth)?,
            Err(e) => {
                warn!(error = %e, "query embedding failed; using lexical results only");
                degraded.push(format!("embedding: {e}"));
            }
        }
        trace.embedding_query = Some(text);
        timings.insert("vector".into(), elapsed_ms(start));
    }
    Ok(Retrieval {
        query: trace,
        lexical,
        vector,
        degraded,
    })
}

fn assemble(bundle: &IndexBundle, retrieval: &Retrieval, config: &PipelineConfig) -> Vec<Candidate> {
    let lexical: HashMap<&str, f64> = retrieval.lexical.iter().map(|h| (h.tiny_id.as_str(), h.score)).collect();
    let vector: HashMap<&str, f64> = retrieval.vector.iter().map(|h| (h.tiny_id.as_str(), h.score)).collect();
    fuse(&retrieval.lexical, &retrieval.vector, config.rrf_k)
        .into_iter()
        .take(config.top_k)
        .enumerate()
        .filter_map(|(i, (id, fused))| {
            let record = bundle.corpus.get(&id)?;
            Some(Candidate {
                lexical_score: lexical.get(id.as_str()).copied(),
                vector_score: vector.get(id.as_str()).copied(),
                tiny_id: id,
                name: record.name.clone(),
                collection: record.collection.clone(),
                fused_score: fused,
                rank: i + 1,
                llm_suggested: false,
                detail_url: record.detail_url.clone(),
            })
        })
        .collect()
}

/// Recommends up to `top_k` target CDEs for one source element.
///
/// LLM degradation never fails the call; it is reported in `degraded`.
pub fn recommend(
    element: &SourceElement,
    config: &PipelineConfig,
    bundle: &IndexBundle,
    gateway: Option<&Gateway>,
) -> Result<CandidateList, PipelineError> {
    config.validate()?;
    if element.name.trim().is_empty() {
        return Err(PipelineError::Input(format!("element `{}` has an empty name", element.element_id)));
    }
    if config.needs_gateway() && gateway.is_none() {
        return Err(PipelineError::GatewayRequired);
    }
    if config.use_embedding {
        check_embedding(bundle, gateway)?;
    }
    let mut timings = BTreeMap::new();
    let mut degraded = Vec::new();

    let (term, description) = (element.name.as_str(), element.description.as_str());
    let mut trace = QueryTrace {
        original_term: term.to_string(),
        original_description: description.to_string(),
        ..QueryTrace::default()
    };
    let (lex_term, lex_desc) = if config.use_expansion {
        let start = Instant::now();
        let expanded = gateway.unwrap().expand_query(term, description);
        timings.insert("expansion".into(), elapsed_ms(start));
        if expanded.fallback {
            degraded.push("expansion: fell back to the original query".into());
        }
        trace.expanded_term = Some(expanded.term.clone());
        trace.expanded_description = Some(expanded.description.clone());
        (expanded.term, expanded.description)
    } else {
        (term.to_string(), description.to_string())
    };
    trace.lexical_query = match config.lexical_query_mode {
        LexicalQueryMode::NameOnly => lex_term.clone(),
        LexicalQueryMode::NameAndDescription => join_query(&lex_term, &lex_desc, " "),
    };
    let embedding_query = config.use_embedding.then(|| match config.expansion_scope {
        ExpansionScope::Both => join_query(&lex_term, &lex_desc, "\n"),
        ExpansionScope::LexicalOnly => join_query(term, description, "\n"),
    });

    let retrieval = retrieve(trace, embedding_query, config, bundle, gateway, &mut timings)?;
    degraded.extend(retrieval.degraded.iter().cloned());
    let start = Instant::now();
    let mut candidates = assemble(bundle, &retrieval, config);
    timings.insert("fusion".into(), elapsed_ms(start));

    if config.use_rerank && !candidates.is_empty() {
        let start = Instant::now();
        let texts: Vec<(String, String)> = candidates
            .iter()
            .map(|c| {
                let text = bundle.corpus.get(&c.tiny_id).map(CdeRecord::display_text).unwrap_or_default();
                (c.tiny_id.clone(), truncate_chars(&text, RERANK_TEXT_LIMIT))
            })
            .collect();
        let reranked = gateway.unwrap().rerank(&lex_term, &lex_desc, &texts);
        if reranked.fallback {
            degraded.push("rerank: fell back to retrieval order".into());
        } else if let Some(first) = reranked.order.first() {
            if let Some(pos) = candidates.iter().position(|c| &c.tiny_id == first) {
                promote(&mut candidates, pos);
            }
        }
        timings.insert("rerank".into(), elapsed_ms(start));
    }

    Ok(CandidateList {
        element_id: element.element_id.clone(),
        config: config.clone(),
        query: retrieval.query,
        candidates,
        timings,
        degraded,
    })
}

/// Searches with a raw user query: no expansion and no re-ranking.
pub fn manual_search(
    query: &str,
    collections: Option<BTreeSet<String>>,
    bundle: &IndexBundle,
    config: &PipelineConfig,
    gateway: Option<&Gateway>,
) -> Result<CandidateList, PipelineError> {
    if query.trim().is_empty() {
        return Err(PipelineError::Input("search query is empty".into()));
    }
    let config = PipelineConfig {
        use_expansion: false,
        use_rerank: false,
        collections: collections.or_else(|| config.collections.clone()),
        ..config.clone()
    };
    config.validate()?;
    let trace = QueryTrace {
        original_term: query.to_string(),
        lexical_query: query.to_string(),
        ..QueryTrace::default()
    };
    if tokenize(query).is_empty() {
        return Ok(CandidateList {
            element_id: String::new(),
            config,
            query: trace,
            candidates: Vec::new(),
            timings: BTreeMap::new(),
            degraded: Vec::new(),
        });
    }
    if config.use_embedding {
        check_embedding(bundle, gateway)?;
    }
    let mut timings = BTreeMap::new();
    let embedding_query = config.use_embedding.then(|| query.to_string());
    let retrieval = retrieve(trace, embedding_query, &config, bundle, gateway, &mut timings)?;
    let candidates = assemble(bundle, &retrieval, &config);
    Ok(CandidateList {
        element_id: String::new(),
        config,
        query: retrieval.query,
        candidates,
        timings,
        degraded: retrieval.degraded,
    })
}

/// Outcome of value mapping against one target CDE.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum ValueMapping {
    Available { matches: Vec<ValueMatch> },
    Unavailable { reason: String },
}

/// Maps each source value onto the target's permissible values, in source order.
pub fn map_values(source_values: &[String], target: &CdeRecord, gateway: &Gateway) -> ValueMapping {
    if target.permissible_values.is_empty() {
        return ValueMapping::Unavailable {
            reason: format!("CDE {} has no permissible values", target.tiny_id),
        };
    }
    let matches = source_values
        .iter()
        .filter(|v| !v.trim().is_empty())
        .filter_map(|v| gateway.map_value(v, &target.permissible_values).ok())
        .collect();
    ValueMapping::Available { matches }
}

/// Runs [`recommend`] for many elements on a bounded worker pool, preserving
/// input order. `progress` is called with the running count of finished elements.
pub fn recommend_all(
    elements: &[SourceElement],
    config: &PipelineConfig,
    bundle: &IndexBundle,
    gateway: Option<&Gateway>,
    progress: &(dyn Fn(usize) + Sync),
) -> Vec<Result<CandidateList, PipelineError>> {
    let workers = gateway
        .map(Gateway::max_concurrent_requests)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
        .clamp(1, elements.len().max(1));
    let next = AtomicUsize::new(0);
    let done = AtomicUsize::new(0);
    let mut slots: Vec<Option<Result<CandidateList, PipelineError>>> = (0..elements.len()).map(|_| None).collect();
    let finished: Vec<Vec<(usize, Result<CandidateList, PipelineError>)>> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..workers)
            .map(|_| {
                scope.spawn(|| {
                    let mut out = Vec::new();
                    loop {
                        let i = next.fetch_add(1, Ordering::SeqCst);
                        let Some(element) = elements.get(i) else { break };
                        out.push((i, recommend(element, config, bundle, gateway)));
                        progress(done.fetch_add(1, Ordering::SeqCst) + 1);
                    }
                    out
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("recommend worker panicked")).collect()
    });
    for (i, result) in finished.into_iter().flatten() {
        slots[i] = Some(result);
    }
    slots.into_iter().map(|s| s.expect("every element processed")).collect()
}
