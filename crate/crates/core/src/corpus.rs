//! CDE corpus loading and preprocessing.
//!
//! The corpus arrives as a single JSON export: a top-level array of objects
//! with `tinyId`, `name`, `designations`, `questionTexts`, `definition`,
//! `collection`, `permissibleValues` and `detailUrl`. Records that violate
//! the record invariants are collected into a [`Rejection`] list instead of
//! aborting the load; a duplicated `tinyId` is a hard integrity error.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::io::Read;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("malformed corpus export at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("corpus export must be a top-level JSON array")]
    NotAnArray,
    #[error("duplicate tinyId `{0}` in corpus")]
    DuplicateId(String),
    #[error("i/o error reading corpus: {0}")]
    Io(#[from] std::io::Error),
}

/// One allowed response of a CDE.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct PermissibleValue {
    pub value_name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub code: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub code_system: Option<String>,
}

impl PermissibleValue {
    pub fn named(value_name: impl Into<String>) -> Self {
        Self {
            value_name: value_name.into(),
            code: None,
            code_system: None,
        }
    }
}

/// One NIH Common Data Element as it appears in the corpus export.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct CdeRecord {
    pub tiny_id: String,
    pub name: String,
    #[serde(default)]
    pub designations: Vec<String>,
    #[serde(default)]
    pub question_texts: Vec<String>,
    #[serde(default)]
    pub definition: String,
    pub collection: String,
    #[serde(default)]
    pub permissible_values: Vec<PermissibleValue>,
    pub detail_url: String,
}

impl CdeRecord {
    /// Checks the record-level invariants. Returns the first violation.
    pub fn validate(&self, allowed_collections: Option<&BTreeSet<String>>) -> Result<(), String> {
        if self.tiny_id.trim().is_empty() {
            return Err("empty tinyId".into());
        }
        if self.name.trim().is_empty() {
            return Err("empty name".into());
        }
        if self.collection.trim().is_empty() {
            return Err("empty collection".into());
        }
        if let Some(allowed) = allowed_collections {
            if !allowed.contains(&self.collection) {
                return Err(format!("collection `{}` is not declared", self.collection));
            }
        }
        if let Some(pos) = self
            .permissible_values
            .iter()
            .position(|v| v.value_name.trim().is_empty())
        {
            return Err(format!("permissible value #{pos} has an empty valueName"));
        }
        if !(self.detail_url.starts_with("http://") || self.detail_url.starts_with("https://")) {
            return Err(format!("detailUrl `{}` is not an absolute URL", self.detail_url));
        }
        Ok(())
    }

    pub fn value_names(&self) -> impl Iterator<Item = &str> {
        self.permissible_values.iter().map(|v| v.value_name.as_str())
    }

    /// `name — definition (collection)`, the form shown to humans and to the re-ranker.
    pub fn display_text(&self) -> String {
        if self.definition.trim().is_empty() {
            format!("{} ({})", self.name, self.collection)
        } else {
            format!("{} — {} ({})", self.name, self.definition, self.collection)
        }
    }
}

/// A record that failed validation during load.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rejection {
    /// Zero-based position in the export array.
    pub position: usize,
    pub tiny_id: Option<String>,
    pub reason: String,
}

#[derive(Debug, Clone, Default)]
pub struct LoadOptions {
    /// When set, records whose collection is outside this set are rejected.
    pub allowed_collections: Option<BTreeSet<String>>,
}

#[derive(Debug, Clone)]
pub struct LoadedCorpus {
    pub records: Vec<CdeRecord>,
    pub rejections: Vec<Rejection>,
}

/// Reads a corpus export. Invalid records go to the rejection list.
pub fn load_corpus<R: Read>(reader: R, options: &LoadOptions) -> Result<LoadedCorpus, CorpusError> {
    let value: serde_json::Value = serde_json::from_reader(reader).map_err(|e| {
        if e.is_io() {
            CorpusError::Io(e.into())
        } else {
            CorpusError::Parse {
                line: e.line(),
                column: e.column(),
                message: e.to_string(),
            }
        }
    })?;
    let serde_json::Value::Array(items) = value else {
        return Err(CorpusError::NotAnArray);
    };

    let mut records = Vec::with_capacity(items.len());
    let mut rejections = Vec::new();
    let mut seen = BTreeSet::new();
    for (position, item) in items.into_iter().enumerate() {
        let tiny_id = item
            .get("tinyId")
            .and_then(|v| v.as_str())
            .map(str::to_owned);
        let record: CdeRecord = match serde_json::from_value(item) {
            Ok(r) => r,
            Err(e) => {
                rejections.push(Rejection {
                    position,
                    tiny_id,
                    reason: e.to_string(),
                });
                continue;
            }
        };
        if let Err(reason) = record.validate(options.allowed_collections.as_ref()) {
            rejections.push(Rejection {
                position,
                tiny_id: Some(record.tiny_id.clone()).filter(|s| !s.is_empty()),
                reason,
            });
            continue;
        }
        if !seen.insert(record.tiny_id.clone()) {
            return Err(CorpusError::DuplicateId(record.tiny_id));
        }
        records.push(record);
    }
    Ok(LoadedCorpus {
        records,
        rejections,
    })
}

/// Writes records in the export shape accepted by [`load_corpus`].
pub fn serialize_corpus(records: &[CdeRecord]) -> Vec<u8> {
    serde_json::to_vec_pretty(records).expect("corpus records always serialize")
}

/// Immutable, id-addressable set of CDE records.
#[derive(Debug, Clone, Default)]
pub struct Corpus {
    records: Vec<CdeRecord>,
    by_id: HashMap<String, usize>,
}

impl Corpus {
    pub fn new(records: Vec<CdeRecord>) -> Result<Self, CorpusError> {
        let mut by_id = HashMap::with_capacity(records.len());
        for (i, r) in records.iter().enumerate() {
            if by_id.insert(r.tiny_id.clone(), i).is_some() {
                return Err(CorpusError::DuplicateId(r.tiny_id.clone()));
            }
        }
        Ok(Self { records, by_id })
    }

    pub fn get(&self, tiny_id: &str) -> Option<&CdeRecord> {
        self.by_id.get(tiny_id).map(|&i| &self.records[i])
    }

    pub fn contains(&self, tiny_id: &str) -> bool {
        self.by_id.contains_key(tiny_id)
    }

    pub fn records(&self) -> &[CdeRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Collection name to record count, sorted by name.
    pub fn collections(&self) -> BTreeMap<String, usize> {
        let mut out = BTreeMap::new();
        for r in &self.records {
            *out.entry(r.collection.clone()).or_insert(0) += 1;
        }
        out
    }
}

/// The indexed text fields of a CDE.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Field {
    Name,
    Designations,
    QuestionTexts,
    Definition,
    PermissibleValues,
    Collection,
}

pub const FIELD_COUNT: usize = 6;

impl Field {
    pub const ALL: [Field; FIELD_COUNT] = [
        Field::Name,
        Field::Designations,
        Field::QuestionTexts,
        Field::Definition,
        Field::PermissibleValues,
        Field::Collection,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Field::Name => "name",
            Field::Designations => "designations",
            Field::QuestionTexts => "question_texts",
            Field::Definition => "definition",
            Field::PermissibleValues => "permissible_values",
            Field::Collection => "collection",
        }
    }

    pub fn parse(s: &str) -> Option<Field> {
        Field::ALL.into_iter().find(|f| f.as_str() == s)
    }
}

impl fmt::Display for Field {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Per-field text of a record, one entry for every [`Field`].
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct FieldTexts([String; FIELD_COUNT]);

impl FieldTexts {
    pub fn get(&self, field: Field) -> &str {
        &self.0[field.index()]
    }

    pub fn set(&mut self, field: Field, text: String) {
        self.0[field.index()] = text;
    }

    pub fn iter(&self) -> impl Iterator<Item = (Field, &str)> {
        Field::ALL.into_iter().map(move |f| (f, self.get(f)))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexableDocument {
    pub tiny_id: String,
    pub collection: String,
    pub fielded_text: FieldTexts,
    pub embedding_text: String,
}

fn join_nonempty<'a>(parts: impl IntoIterator<Item = &'a str>, sep: &str) -> String {
    parts
        .into_iter()
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .collect::<Vec<_>>()
        .join(sep)
}

/// Turns a validated record into its lexical fields and embedding text.
///
/// The embedding text is the name, the definition and every permissible
/// value name, newline-joined with empty segments dropped. Question texts
/// and the collection only feed the lexical index.
pub fn preprocess(record: &CdeRecord) -> IndexableDocument {
    let mut fields = FieldTexts::default();
    fields.set(Field::Name, join_nonempty([record.name.as_str()], " "));
    fields.set(
        Field::Designations,
        join_nonempty(record.designations.iter().map(String::as_str), " "),
    );
    fields.set(
        Field::QuestionTexts,
        join_nonempty(record.question_texts.iter().map(String::as_str), " "),
    );
    fields.set(Field::Definition, join_nonempty([record.definition.as_str()], " "));
    fields.set(
        Field::PermissibleValues,
        join_nonempty(record.value_names(), " "),
    );
    fields.set(Field::Collection, join_nonempty([record.collection.as_str()], " "));

    let embedding_text = join_nonempty(
        std::iter::once(record.name.as_str())
            .chain(std::iter::once(record.definition.as_str()))
            .chain(record.value_names()),
        "\n",
    );

    IndexableDocument {
        tiny_id: record.tiny_id.clone(),
        collection: record.collection.clone(),
        fielded_text: fields,
        embedding_text,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn record(id: &str, name: &str, collection: &str) -> CdeRecord {
        CdeRecord {
            tiny_id: id.into(),
            name: name.into(),
            designations: vec![],
            question_texts: vec![],
            definition: String::new(),
            collection: collection.into(),
            permissible_values: vec![],
            detail_url: format!("https://cde.nlm.nih.gov/deView?tinyId={id}"),
        }
    }

    #[test]
    fn embedding_text_joins_name_definition_and_values() {
        let mut r = record("a1", "Ethnicity", "NIH-Endorsed");
        r.permissible_values = vec![
            PermissibleValue::named("Hispanic or Latino"),
            PermissibleValue::named("Not Hispanic or Latino"),
        ];
        let doc = preprocess(&r);
        assert_eq!(
            doc.embedding_text,
            "Ethnicity\nHispanic or Latino\nNot Hispanic or Latino"
        );
    }

    #[test]
    fn embedding_text_of_bare_record_is_name() {
        let doc = preprocess(&record("a1", "Race", "NIH-Endorsed"));
        assert_eq!(doc.embedding_text, "Race");
        for f in Field::ALL {
            if f != Field::Name && f != Field::Collection {
                assert_eq!(doc.fielded_text.get(f), "");
            }
        }
    }

    #[test]
    fn collection_field_holds_collection() {
        let doc = preprocess(&record("x", "Imaging Modality Type", "NINDS"));
        assert_eq!(doc.fielded_text.get(Field::Collection), "NINDS");
    }

    #[test]
    fn question_texts_stay_out_of_embedding_text() {
        let mut r = record("q", "Age", "NINDS");
        r.question_texts = vec!["How old are you?".into(), "Age at visit".into()];
        r.designations = vec!["Participant age".into()];
        let doc = preprocess(&r);
        assert_eq!(doc.embedding_text, "Age");
        assert_eq!(
            doc.fielded_text.get(Field::QuestionTexts),
            "How old are you? Age at visit"
        );
        assert_eq!(doc.fielded_text.get(Field::Designations), "Participant age");
    }

    #[test]
    fn empty_array_loads_nothing() {
        let loaded = load_corpus("[]".as_bytes(), &LoadOptions::default()).unwrap();
        assert!(loaded.records.is_empty());
        assert!(loaded.rejections.is_empty());
    }

    #[test]
    fn duplicate_id_is_integrity_error() {
        let recs: Vec<_> = ["a", "b", "c", "b", "d"]
            .iter()
            .map(|id| record(id, &format!("Name {id}"), "NINDS"))
            .collect();
        let bytes = serialize_corpus(&recs);
        match load_corpus(bytes.as_slice(), &LoadOptions::default()) {
            Err(CorpusError::DuplicateId(id)) => assert_eq!(id, "b"),
            other => panic!("expected duplicate error, got {other:?}"),
        }
    }

    #[test]
    fn malformed_stream_reports_position() {
        let err = load_corpus("[\n{\"tinyId\": \"a\",\n oops}]".as_bytes(), &LoadOptions::default())
            .unwrap_err();
        match err {
            CorpusError::Parse { line, .. } => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn invalid_records_are_rejected_not_dropped() {
        let json = r#"[
          {"tinyId":"ok","name":"Race","collection":"NIH-Endorsed","detailUrl":"https://x/ok"},
          {"tinyId":"noname","name":"","collection":"NINDS","detailUrl":"https://x/n"},
          {"tinyId":"badpv","name":"Sex","collection":"NINDS","detailUrl":"https://x/b",
           "permissibleValues":[{"valueName":""}]},
          {"name":"No id","collection":"NINDS","detailUrl":"https://x/none"},
          {"tinyId":"other","name":"Other","collection":"NCI","detailUrl":"https://x/o"}
        ]"#;
        let opts = LoadOptions {
            allowed_collections: Some(["NIH-Endorsed".to_string(), "NINDS".to_string()].into()),
        };
        let loaded = load_corpus(json.as_bytes(), &opts).unwrap();
        assert_eq!(loaded.records.len(), 1);
        let positions: Vec<_> = loaded.rejections.iter().map(|r| r.position).collect();
        assert_eq!(positions, vec![1, 2, 3, 4]);
        assert_eq!(loaded.rejections[0].tiny_id.as_deref(), Some("noname"));
        assert!(loaded.rejections[3].reason.contains("not declared"));
    }

    #[test]
    fn corpus_counts_collections() {
        let c = Corpus::new(vec![
            record("a", "A", "NINDS"),
            record("b", "B", "NINDS"),
            record("c", "C", "NEI"),
        ])
        .unwrap();
        let cols = c.collections();
        assert_eq!(cols["NINDS"], 2);
        assert_eq!(cols["NEI"], 1);
        assert_eq!(c.get("c").unwrap().name, "C");
    }
}
