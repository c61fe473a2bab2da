#![allow(dead_code)]

use std::fs::File;
use std::path::PathBuf;

use cdemapper_core::corpus::{load_corpus, LoadOptions};
use cdemapper_core::evaluation::{load_datasets, load_gold, DatasetSpec, GoldEntry};
use cdemapper_core::{Bm25Params, Gateway, IndexBundle, VectorIndex};

pub fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

pub fn lexical_bundle() -> IndexBundle {
    let file = File::open(fixtures().join("corpus.json")).expect("fixture corpus");
    let loaded = load_corpus(file, &LoadOptions::default()).expect("fixture corpus parses");
    assert!(loaded.rejections.is_empty(), "{:?}", loaded.rejections);
    IndexBundle::build(loaded.records, Bm25Params::default(), "2024-10-16").expect("index builds")
}

/// Lexical index plus mock-embedded vectors.
pub fn full_bundle(gateway: &Gateway) -> IndexBundle {
    let bundle = lexical_bundle();
    let inputs = bundle.embedding_inputs();
    let texts: Vec<String> = inputs.iter().map(|(_, t)| t.clone()).collect();
    let vectors = gateway.embed(&texts).expect("mock embeddings");
    let docs = inputs.into_iter().map(|(d, _)| d).zip(vectors).collect();
    let index = VectorIndex::build(gateway.embedding_model(), docs).expect("vector index");
    bundle.with_vectors(index).expect("vectors attach")
}

pub fn gold() -> Vec<GoldEntry> {
    load_gold(File::open(fixtures().join("gold.csv")).expect("gold fixture")).expect("gold parses")
}

pub fn datasets() -> Vec<DatasetSpec> {
    load_datasets(&std::fs::read_to_string(fixtures().join("datasets.toml")).expect("manifest")).expect("manifest parses")
}
