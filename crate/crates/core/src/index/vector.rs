//! Exact cosine nearest-neighbour search by full scan.

use super::{admits, rank_order, CollectionFilter, DocRef, HitSource, IndexError, ScoredHit};

/// Unit-normalized embeddings stored row-major in one buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorIndex {
    model: String,
    dimension: usize,
    docs: Vec<DocRef>,
    data: Vec<f32>,
}

/// Returns `v / |v|`, or `None` for zero-norm or non-finite input.
pub fn normalize(v: &[f32]) -> Option<Vec<f32>> {
    if v.iter().any(|x| !x.is_finite()) {
        return None;
    }
    let norm = v.iter().map(|x| f64::from(*x) * f64::from(*x)).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return None;
    }
    Some(v.iter().map(|x| (f64::from(*x) / norm) as f32).collect())
}

pub(crate) fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .fold(0.0, |acc, (x, y)| acc + f64::from(*x) * f64::from(*y))
}

impl VectorIndex {
    /// Builds an index, normalizing each vector. The first vector fixes the dimension.
    pub fn build(model: impl Into<String>, embeddings: Vec<(DocRef, Vec<f32>)>) -> Result<Self, IndexError> {
        let dimension = embeddings.first().map_or(0, |(_, v)| v.len());
        let mut docs = Vec::with_capacity(embeddings.len());
        let mut data = Vec::with_capacity(embeddings.len() * dimension);
        let mut seen = std::collections::HashSet::new();
        for (doc, v) in embeddings {
            if v.len() != dimension {
                return Err(IndexError::DimensionMismatch {
                    id: doc.tiny_id,
                    expected: dimension,
                    actual: v.len(),
                });
            }
            let unit = normalize(&v).ok_or_else(|| IndexError::DegenerateVector(doc.tiny_id.clone()))?;
            if !seen.insert(doc.tiny_id.clone()) {
                return Err(IndexError::DuplicateId(doc.tiny_id));
            }
            data.extend_from_slice(&unit);
            docs.push(doc);
        }
        Ok(Self {
            model: model.into(),
            dimension,
            docs,
            data,
        })
    }

    pub(crate) fn from_parts(model: String, dimension: usize, docs: Vec<DocRef>, data: Vec<f32>) -> Self {
        Self {
            model,
            dimension,
            docs,
            data,
        }
    }

    pub fn model(&self) -> &str {
        &self.model
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    pub fn docs(&self) -> &[DocRef] {
        &self.docs
    }

    pub fn vector(&self, i: usize) -> &[f32] {
        &self.data[i * self.dimension..(i + 1) * self.dimension]
    }

    /// Top `k` documents by cosine similarity to `query`.
    pub fn search(
        &self,
        query: &[f32],
        collections: Option<&CollectionFilter>,
        k: usize,
    ) -> Result<Vec<ScoredHit>, IndexError> {
        if query.len() != self.dimension {
            return Err(IndexError::DimensionMismatch {
                id: "<query>".into(),
                expected: self.dimension,
                actual: query.len(),
            });
        }
        let query = normalize(query).ok_or_else(|| IndexError::DegenerateVector("<query>".into()))?;
        let mut scored: Vec<(usize, f64)> = self
            .docs
            .iter()
            .enumerate()
            .filter(|(_, d)| admits(collections, &d.collection))
            .map(|(i, _)| (i, dot(&query, self.vector(i)).clamp(-1.0, 1.0)))
            .collect();
        scored.sort_by(|a, b| {
            rank_order(
                (self.docs[a.0].tiny_id.as_str(), a.1),
                (self.docs[b.0].tiny_id.as_str(), b.1),
            )
        });
        scored.truncate(k);
        Ok(scored
            .into_iter()
            .map(|(i, score)| ScoredHit {
                tiny_id: self.docs[i].tiny_id.clone(),
                score,
                source: HitSource::Vector,
            })
            .collect())
    }
}
