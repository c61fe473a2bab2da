//! Benchmarks for the retrieval core; see `benches/retrieval.rs`.
