//! Lexical (BM25) and dense (exact cosine kNN) indexes over the CDE corpus.

mod artifact;
mod lexical;
mod vector;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use artifact::{IndexBundle, IndexMeta, FORMAT_VERSION};
pub use lexical::{Bm25Params, FieldWeights, LexicalIndex, SnapshotMeta};
pub use vector::{normalize, VectorIndex};

#[derive(Debug, Error)]
pub enum IndexError {
    #[error("cannot build an index over an empty corpus")]
    EmptyCorpus,
    #[error("duplicate document id `{0}`")]
    DuplicateId(String),
    #[error("invalid BM25 parameters: {0}")]
    InvalidParams(String),
    #[error("vector dimension mismatch: expected {expected}, got {actual} for `{id}`")]
    DimensionMismatch {
        id: String,
        expected: usize,
        actual: usize,
    },
    #[error("zero-norm or non-finite vector for `{0}`")]
    DegenerateVector(String),
    #[error("index artifact format version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("index artifact is corrupt: {0}")]
    Corrupt(String),
    #[error("index artifact i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("index artifact json: {0}")]
    Json(#[from] serde_json::Error),
}

/// Identity and collection of an indexed document.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DocRef {
    pub tiny_id: String,
    pub collection: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HitSource {
    Lexical,
    Vector,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredHit {
    pub tiny_id: String,
    pub score: f64,
    pub source: HitSource,
}

/// Optional restriction of a search to a set of collections.
pub type CollectionFilter = BTreeSet<String>;

pub(crate) fn admits(filter: Option<&CollectionFilter>, collection: &str) -> bool {
    filter.is_none_or(|f| f.contains(collection))
}

/// Orders hits by score descending, breaking ties by tiny id ascending.
pub(crate) fn rank_order(a: (&str, f64), b: (&str, f64)) -> std::cmp::Ordering {
    b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0))
}

/// Splits text into lowercased maximal runs of Unicode letters and digits.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut current = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            current.extend(ch.to_lowercase());
        } else if !current.is_empty() {
            tokens.push(std::mem::take(&mut current));
        }
    }
    if !current.is_empty() {
        tokens.push(current);
    }
    tokens
}
