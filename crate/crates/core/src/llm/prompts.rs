//! Fixed instructions and the payload layout sent with each of them.
//!
//! The instruction goes out as the system message, unchanged. The user
//! message carries the task input in the `Input:` / `Search Results:` /
//! `Value Set:` layout followed by the output directive.

use serde::Serialize;

pub const QUERY_EXPANSION: &str = include_str!("../../prompts/query_expansion.txt");
pub const RERANK: &str = include_str!("../../prompts/rerank.txt");
pub const VALUE_MAPPING: &str = include_str!("../../prompts/value_mapping.txt");

pub const QUERY_EXPANSION_OUTPUT: &str =
    "Output: Return only the JSON dict of search string for terms and descriptions.";
pub const RERANK_OUTPUT: &str = "Output: Return only the JSON list of reranked search results.";
pub const VALUE_MAPPING_OUTPUT: &str =
    "Output: Return only the JSON list of top 1 matched records ordered by recalculated semantic similarity scores.";

/// Which of the three instructions a chat request carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    QueryExpansion,
    Rerank,
    ValueMapping,
}

impl Task {
    pub fn instruction(self) -> &'static str {
        match self {
            Task::QueryExpansion => QUERY_EXPANSION,
            Task::Rerank => RERANK,
            Task::ValueMapping => VALUE_MAPPING,
        }
    }

    pub fn from_instruction(text: &str) -> Option<Task> {
        [Task::QueryExpansion, Task::Rerank, Task::ValueMapping]
            .into_iter()
            .find(|t| t.instruction() == text)
    }
}

#[derive(Serialize)]
pub(crate) struct TermInput<'a> {
    pub term: &'a str,
    pub description: &'a str,
}

#[derive(Serialize)]
pub(crate) struct RerankCandidate<'a> {
    pub id: &'a str,
    pub text: &'a str,
}

#[derive(Serialize)]
struct ValueInput<'a> {
    #[serde(rename = "value name")]
    value_name: &'a str,
}

fn json<T: Serialize>(value: &T) -> String {
    serde_json::to_string(value).expect("prompt payloads always serialize")
}

pub(crate) fn query_expansion_input(term: &str, description: &str) -> String {
    format!(
        "Input: {}\n\n{}",
        json(&TermInput { term, description }),
        QUERY_EXPANSION_OUTPUT
    )
}

pub(crate) fn rerank_input(term: &str, description: &str, candidates: &[RerankCandidate<'_>]) -> String {
    format!(
        "Input: {}\n\nSearch Results: {}\n\n{}",
        json(&TermInput { term, description }),
        json(&candidates),
        RERANK_OUTPUT
    )
}

pub(crate) fn value_mapping_input(value_name: &str, value_set: &[&str]) -> String {
    format!(
        "Input: {}\n\nValue Set: {}\n\n{}",
        json(&ValueInput { value_name }),
        json(&value_set),
        VALUE_MAPPING_OUTPUT
    )
}

/// Returns the text following `label` on its line, e.g. the JSON after `Input: `.
pub(crate) fn section<'a>(message: &'a str, label: &str) -> Option<&'a str> {
    message
        .lines()
        .find_map(|line| line.strip_prefix(label))
        .map(str::trim)
}
