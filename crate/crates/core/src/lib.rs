//! Core engine for normalizing local research data elements to NIH Common
//! Data Elements: corpus loading, BM25 and vector retrieval, an LLM gateway
//! with a deterministic offline mock, the recommendation pipeline, Acc@N
//! evaluation, and the mapping project store.

pub mod corpus;
pub mod evaluation;
pub mod index;
pub mod kv;
pub mod llm;
pub mod multivalue;
pub mod pipeline;
pub mod store;

pub use corpus::{CdeRecord, Corpus, Field, IndexableDocument, PermissibleValue};
pub use index::{tokenize, Bm25Params, IndexBundle, LexicalIndex, ScoredHit, VectorIndex};
pub use llm::{Gateway, GatewayError, LlmBackend, LlmConfig};
pub use pipeline::{recommend, Candidate, CandidateList, PipelineConfig, Preset, SourceElement};
