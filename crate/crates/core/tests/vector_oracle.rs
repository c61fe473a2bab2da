use std::collections::BTreeSet;

use cdemapper_core::index::{normalize, DocRef};
use cdemapper_core::VectorIndex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const DIM: usize = 64;

fn random_vec(rng: &mut ChaCha8Rng) -> Vec<f32> {
    (0..DIM).map(|_| rng.random_range(-1.0f32..1.0)).collect()
}

fn fixture(rng: &mut ChaCha8Rng, n: usize) -> (VectorIndex, Vec<(DocRef, Vec<f32>)>) {
    let raw: Vec<(DocRef, Vec<f32>)> = (0..n)
        .map(|i| {
            let doc = DocRef {
                tiny_id: format!("v{i:04}"),
                collection: ["NINDS", "NEI"][i % 2].into(),
            };
            (doc, random_vec(rng))
        })
        .collect();
    (VectorIndex::build("test", raw.clone()).unwrap(), raw)
}

/// Cosine in f64 from the raw inputs, sorted by score then id.
fn f64_oracle(raw: &[(DocRef, Vec<f32>)], query: &[f32], filter: Option<&BTreeSet<String>>) -> Vec<(String, f64)> {
    let norm = |v: &[f32]| v.iter().map(|x| f64::from(*x).powi(2)).sum::<f64>().sqrt();
    let qn = norm(query);
    let mut out: Vec<(String, f64)> = raw
        .iter()
        .filter(|(d, _)| filter.is_none_or(|f| f.contains(&d.collection)))
        .map(|(d, v)| {
            let dot: f64 = v.iter().zip(query).map(|(a, b)| f64::from(*a) * f64::from(*b)).sum();
            (d.tiny_id.clone(), dot / (norm(v) * qn))
        })
        .collect();
    out.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    out
}

/// Argsort over the index's stored unit vectors: same data, separate ranking code.
fn stored_argsort(index: &VectorIndex, query: &[f32], filter: Option<&BTreeSet<String>>) -> Vec<String> {
    let q = normalize(query).unwrap();
    let mut scored: Vec<(String, f64)> = (0..index.len())
        .filter(|i| filter.is_none_or(|f| f.contains(&index.docs()[*i].collection)))
        .map(|i| {
            let dot: f64 = index.vector(i).iter().zip(&q).map(|(a, b)| f64::from(*a) * f64::from(*b)).sum();
            (index.docs()[i].tiny_id.clone(), dot.clamp(-1.0, 1.0))
        })
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    scored.into_iter().map(|(id, _)| id).collect()
}

#[test]
fn full_scan_matches_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(500);
    let (index, raw) = fixture(&mut rng, 500);
    for i in 0..index.len() {
        let n: f64 = index.vector(i).iter().map(|x| f64::from(*x).powi(2)).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-6);
    }
    let nei: BTreeSet<String> = ["NEI".to_string()].into();
    for q in 0..100 {
        let query = normalize(&random_vec(&mut rng)).unwrap();
        let filter = (q % 4 == 0).then_some(&nei);
        let hits = index.search(&query, filter, 500).unwrap();
        let ids: Vec<String> = hits.iter().map(|h| h.tiny_id.clone()).collect();
        assert_eq!(ids, stored_argsort(&index, &query, filter), "query {q}");
        let oracle = f64_oracle(&raw, &query, filter);
        assert_eq!(hits.len(), oracle.len());
        for (h, (_, s)) in hits.iter().zip(&oracle) {
            assert!((h.score - s).abs() < 1e-6, "query {q}: {} vs {s}", h.score);
        }
        assert!(hits.windows(2).all(|w| w[0].score >= w[1].score));
    }
}

#[test]
fn self_query_returns_self_at_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (index, raw) = fixture(&mut rng, 500);
    for (doc, v) in raw.iter().step_by(17) {
        let hits = index.search(v, None, 3).unwrap();
        assert_eq!(hits[0].tiny_id, doc.tiny_id);
        assert!((hits[0].score - 1.0).abs() < 1e-6);
    }
}

#[test]
fn orthogonal_and_invalid_queries() {
    let docs = vec![(
        DocRef {
            tiny_id: "a".into(),
            collection: "X".into(),
        },
        vec![3.0, 4.0],
    )];
    let index = VectorIndex::build("m", docs).unwrap();
    assert_eq!(index.vector(0), &[0.6, 0.8]);
    let hits = index.search(&[4.0, -3.0], None, 1).unwrap();
    assert!(hits[0].score.abs() < 1e-6);
    assert!(index.search(&[1.0, 0.0, 0.0], None, 1).is_err());
    assert!(index.search(&[0.0, 0.0], None, 1).is_err());
}
