//! Multi-field BM25 over an in-memory inverted index.
//!
//! ```text
//! score_f(d) = Σ_t idf_f(t) · tf / (tf + k1 · (1 − b + b · len_f(d) / avglen_f))
//! idf_f(t)   = ln(1 + (N − df_f(t) + 0.5) / (df_f(t) + 0.5))
//! score(d)   = Σ_f w_f · score_f(d)
//! ```
//!
//! Statistics (document frequency, average length) are kept per field, the way
//! a per-field similarity in a search server computes them. Query terms are
//! deduplicated before scoring. Summation runs over fields in [`Field::ALL`]
//! order and over terms in lexicographic order, so scores are bit-reproducible.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use super::{admits, rank_order, tokenize, CollectionFilter, DocRef, HitSource, IndexError, ScoredHit};
use crate::corpus::{Field, IndexableDocument, FIELD_COUNT};

/// Per-field boosts, serialized as a `field name -> weight` map.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FieldWeights([f64; FIELD_COUNT]);

impl FieldWeights {
    pub fn uniform(weight: f64) -> Self {
        Self([weight; FIELD_COUNT])
    }

    /// Weight 1 on `field`, 0 elsewhere.
    pub fn only(field: Field) -> Self {
        let mut w = [0.0; FIELD_COUNT];
        w[field.index()] = 1.0;
        Self(w)
    }

    pub fn get(&self, field: Field) -> f64 {
        self.0[field.index()]
    }

    pub fn with(mut self, field: Field, weight: f64) -> Self {
        self.0[field.index()] = weight;
        self
    }

    /// Parses `name=3,definition=1.5`; unspecified fields keep their default weight.
    pub fn parse_overrides(spec: &str) -> Result<Self, IndexError> {
        let mut weights = Self::default();
        for part in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (name, value) = part
                .split_once('=')
                .ok_or_else(|| IndexError::InvalidParams(format!("expected field=weight, got `{part}`")))?;
            let field = Field::parse(name.trim())
                .ok_or_else(|| IndexError::InvalidParams(format!("unknown field `{name}`")))?;
            let weight: f64 = value
                .trim()
                .parse()
                .map_err(|_| IndexError::InvalidParams(format!("bad weight `{value}`")))?;
            weights = weights.with(field, weight);
        }
        Ok(weights)
    }
}

impl Default for FieldWeights {
    fn default() -> Self {
        Self([3.0, 2.0, 1.5, 1.0, 1.0, 0.5])
    }
}

impl Serialize for FieldWeights {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let map: BTreeMap<&str, f64> = Field::ALL.iter().map(|f| (f.as_str(), self.get(*f))).collect();
        map.serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for FieldWeights {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let map = BTreeMap::<String, f64>::deserialize(deserializer)?;
        let mut w = [0.0; FIELD_COUNT];
        for (name, weight) in map {
            let field = Field::parse(&name)
                .ok_or_else(|| serde::de::Error::custom(format!("unknown field `{name}`")))?;
            w[field.index()] = weight;
        }
        Ok(Self(w))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
    pub field_weights: FieldWeights,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Self {
            k1: 1.2,
            b: 0.75,
            field_weights: FieldWeights::default(),
        }
    }
}

impl Bm25Params {
    pub fn validate(&self) -> Result<(), IndexError> {
        if !(self.k1.is_finite() && self.k1 >= 0.0) {
            return Err(IndexError::InvalidParams(format!("k1 must be >= 0, got {}", self.k1)));
        }
        if !(0.0..=1.0).contains(&self.b) {
            return Err(IndexError::InvalidParams(format!("b must be in [0, 1], got {}", self.b)));
        }
        let weights = &self.field_weights.0;
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(IndexError::InvalidParams("field weights must be finite and >= 0".into()));
        }
        if !weights.iter().any(|w| *w > 0.0) {
            return Err(IndexError::InvalidParams("at least one field weight must be > 0".into()));
        }
        Ok(())
    }
}

/// Corpus snapshot the index was built from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SnapshotMeta {
    pub snapshot_date: String,
    pub record_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Posting {
    doc: u32,
    tf: [u32; FIELD_COUNT],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TermEntry {
    /// Documents containing the term, per field.
    df: [u32; FIELD_COUNT],
    postings: Vec<Posting>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LexicalIndex {
    params: Bm25Params,
    docs: Vec<DocRef>,
    field_lengths: Vec<[u32; FIELD_COUNT]>,
    avg_lengths: [f64; FIELD_COUNT],
    terms: BTreeMap<String, TermEntry>,
    snapshot: SnapshotMeta,
}

impl LexicalIndex {
    pub fn build(
        docs: &[IndexableDocument],
        params: Bm25Params,
        snapshot_date: impl Into<String>,
    ) -> Result<Self, IndexError> {
        params.validate()?;
        if docs.is_empty() {
            return Err(IndexError::EmptyCorpus);
        }
        let mut seen = BTreeSet::new();
        let mut refs = Vec::with_capacity(docs.len());
        let mut field_lengths = Vec::with_capacity(docs.len());
        let mut terms: BTreeMap<String, TermEntry> = BTreeMap::new();
        let mut totals = [0u64; FIELD_COUNT];

        for (doc_idx, doc) in docs.iter().enumerate() {
            if !seen.insert(doc.tiny_id.as_str()) {
                return Err(IndexError::DuplicateId(doc.tiny_id.clone()));
            }
            refs.push(DocRef {
                tiny_id: doc.tiny_id.clone(),
                collection: doc.collection.clone(),
            });
            let mut lengths = [0u32; FIELD_COUNT];
            let mut tfs: BTreeMap<String, [u32; FIELD_COUNT]> = BTreeMap::new();
            for (field, text) in doc.fielded_text.iter() {
                let tokens = tokenize(text);
                lengths[field.index()] = tokens.len() as u32;
                totals[field.index()] += tokens.len() as u64;
                for t in tokens {
                    tfs.entry(t).or_insert([0; FIELD_COUNT])[field.index()] += 1;
                }
            }
            field_lengths.push(lengths);
            for (term, tf) in tfs {
                let entry = terms.entry(term).or_insert_with(|| TermEntry {
                    df: [0; FIELD_COUNT],
                    postings: Vec::new(),
                });
                for (f, &count) in tf.iter().enumerate() {
                    if count > 0 {
                        entry.df[f] += 1;
                    }
                }
                entry.postings.push(Posting {
                    doc: doc_idx as u32,
                    tf,
                });
            }
        }

        let n = docs.len() as f64;
        let mut avg_lengths = [0.0; FIELD_COUNT];
        for f in 0..FIELD_COUNT {
            avg_lengths[f] = totals[f] as f64 / n;
        }

        Ok(Self {
            params,
            docs: refs,
            field_lengths,
            avg_lengths,
            terms,
            snapshot: SnapshotMeta {
                snapshot_date: snapshot_date.into(),
                record_count: docs.len(),
            },
        })
    }

    /// An index with no documents; every search returns nothing.
    pub fn empty(params: Bm25Params, snapshot_date: impl Into<String>) -> Self {
        Self {
            params,
            docs: Vec::new(),
            field_lengths: Vec::new(),
            avg_lengths: [0.0; FIELD_COUNT],
            terms: BTreeMap::new(),
            snapshot: SnapshotMeta {
                snapshot_date: snapshot_date.into(),
                record_count: 0,
            },
        }
    }

    pub fn params(&self) -> &Bm25Params {
        &self.params
    }

    pub fn snapshot(&self) -> &SnapshotMeta {
        &self.snapshot
    }

    pub fn doc_count(&self) -> usize {
        self.docs.len()
    }

    pub fn docs(&self) -> &[DocRef] {
        &self.docs
    }

    pub fn avg_length(&self, field: Field) -> f64 {
        self.avg_lengths[field.index()]
    }

    pub fn field_length(&self, doc: usize, field: Field) -> u32 {
        self.field_lengths[doc][field.index()]
    }

    /// Number of documents whose `field` contains `term`.
    pub fn document_frequency(&self, term: &str, field: Field) -> u32 {
        self.terms.get(term).map_or(0, |e| e.df[field.index()])
    }

    pub fn idf(&self, df: u32) -> f64 {
        let n = self.docs.len() as f64;
        let df = f64::from(df);
        (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
    }

    /// Top `k` documents by weighted BM25, optionally restricted to `collections`.
    /// Documents with a zero score are never returned.
    pub fn search(&self, query: &str, collections: Option<&CollectionFilter>, k: usize) -> Vec<ScoredHit> {
        if k == 0 {
            return Vec::new();
        }
        let terms: BTreeSet<String> = tokenize(query).into_iter().collect();
        let Bm25Params { k1, b, field_weights } = self.params;

        let mut per_field: HashMap<u32, [f64; FIELD_COUNT]> = HashMap::new();
        for term in &terms {
            let Some(entry) = self.terms.get(term) else { continue };
            let idf: [f64; FIELD_COUNT] = std::array::from_fn(|f| self.idf(entry.df[f]));
            for posting in &entry.postings {
                let doc = &self.docs[posting.doc as usize];
                if !admits(collections, &doc.collection) {
                    continue;
                }
                let lengths = &self.field_lengths[posting.doc as usize];
                let sums = per_field.entry(posting.doc).or_insert([0.0; FIELD_COUNT]);
                for f in 0..FIELD_COUNT {
                    let tf = posting.tf[f];
                    if tf == 0 {
                        continue;
                    }
                    let tf = f64::from(tf);
                    let norm = 1.0 - b + b * f64::from(lengths[f]) / self.avg_lengths[f];
                    sums[f] += idf[f] * tf / (tf + k1 * norm);
                }
            }
        }

        let mut scored: Vec<(u32, f64)> = per_field
            .into_iter()
            .map(|(doc, sums)| {
                let total = Field::ALL
                    .iter()
                    .fold(0.0, |acc, f| acc + field_weights.get(*f) * sums[f.index()]);
                (doc, total)
            })
            .filter(|(_, s)| *s > 0.0)
            .collect();
        scored.sort_by(|a, b| {
            rank_order(
                (self.docs[a.0 as usize].tiny_id.as_str(), a.1),
                (self.docs[b.0 as usize].tiny_id.as_str(), b.1),
            )
        });
        scored.truncate(k);
        scored
            .into_iter()
            .map(|(doc, score)| ScoredHit {
                tiny_id: self.docs[doc as usize].tiny_id.clone(),
                score,
                source: HitSource::Lexical,
            })
            .collect()
    }

    /// Verifies the structural invariants; used after loading an artifact.
    pub fn check_invariants(&self) -> Result<(), IndexError> {
        let n = self.docs.len();
        if self.field_lengths.len() != n || self.snapshot.record_count != n {
            return Err(IndexError::Corrupt("document table size mismatch".into()));
        }
        if n == 0 {
            return if self.terms.is_empty() {
                Ok(())
            } else {
                Err(IndexError::Corrupt("postings without documents".into()))
            };
        }
        for (term, entry) in &self.terms {
            for p in &entry.postings {
                if p.doc as usize >= n {
                    return Err(IndexError::Corrupt(format!("posting for `{term}` references doc {}", p.doc)));
                }
            }
        }
        for f in 0..FIELD_COUNT {
            let mean = self.field_lengths.iter().map(|l| f64::from(l[f])).sum::<f64>() / n as f64;
            if (mean - self.avg_lengths[f]).abs() > 1e-9 {
                return Err(IndexError::Corrupt(format!("average length of field {f} is stale")));
            }
        }
        Ok(())
    }
}
