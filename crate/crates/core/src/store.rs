//! Mapping projects: source dictionary import, candidate snapshots, review
//! decisions and export.
//!
//! Each project lives in its own directory:
//!
//! ```text
//! <root>/<project_id>/project.json      metadata
//! <root>/<project_id>/elements.jsonl    import events
//! <root>/<project_id>/candidates.jsonl  candidate snapshots
//! <root>/<project_id>/decisions.jsonl   decisions
//! <root>/<project_id>/snapshot.json     compacted state (optional)
//! ```
//!
//! Event lines are `{"seq", "type", "at", "payload"}`. Opening a project loads
//! the snapshot and replays newer events from all three files in `seq` order.
//! A torn final line (crash mid-append) is dropped and truncated away.

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, MutexGuard};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::warn;

use crate::corpus::Corpus;
use crate::llm::ValueMatch;
use crate::multivalue;
use crate::pipeline::{CandidateList, PipelineConfig, SourceElement};

/// Compact into a snapshot after this many appended events.
const SNAPSHOT_EVERY: u64 = 200;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("unknown {kind} `{id}`")]
    NotFound { kind: &'static str, id: String },
    #[error("import failed: {0}")]
    Import(String),
    #[error("invalid request: {0}")]
    Invalid(String),
    #[error("corrupt project data in {path}: {message}")]
    Corrupt { path: PathBuf, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ElementStatus {
    Unmapped,
    CandidatesReady,
    Mapped,
    NoMatch,
}

impl ElementStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Unmapped => "unmapped",
            Self::CandidatesReady => "candidates_ready",
            Self::Mapped => "mapped",
            Self::NoMatch => "no_match",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [Self::Unmapped, Self::CandidatesReady, Self::Mapped, Self::NoMatch]
            .into_iter()
            .find(|v| v.as_str() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecisionOrigin {
    AutoTop1,
    HumanSelected,
    ManualSearch,
}

impl DecisionOrigin {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::AutoTop1 => "auto_top1",
            Self::HumanSelected => "human_selected",
            Self::ManualSearch => "manual_search",
        }
    }
}

/// The chosen CDE, copied at decision time so exports need no corpus.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TargetRef {
    pub tiny_id: String,
    pub name: String,
    pub collection: String,
    pub detail_url: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MappingDecision {
    pub element_id: String,
    /// `None` records an explicit no-match.
    pub target: Option<TargetRef>,
    pub origin: DecisionOrigin,
    #[serde(default)]
    pub value_mappings: Vec<ValueMatch>,
    pub decided_at: String,
}

/// What a reviewer submits; the store resolves and timestamps it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionRequest {
    pub element_id: String,
    pub selected: Option<String>,
    pub origin: DecisionOrigin,
    #[serde(default)]
    pub value_mappings: Vec<ValueMatch>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImportedElement {
    pub element: SourceElement,
    /// The values cell exactly as read.
    pub raw_values: String,
    /// Cells of the extra columns, in column order.
    #[serde(default)]
    pub extra: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RejectedRow {
    /// 1-based line in the file, header included.
    pub line: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ImportReport {
    pub imported: usize,
    pub rejected: Vec<RejectedRow>,
    pub extra_columns: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ImportedDictionary {
    pub elements: Vec<ImportedElement>,
    pub extra_columns: Vec<String>,
    pub rejected: Vec<RejectedRow>,
}

impl ImportedDictionary {
    pub fn report(&self) -> ImportReport {
        ImportReport {
            imported: self.elements.len(),
            rejected: self.rejected.clone(),
            extra_columns: self.extra_columns.clone(),
        }
    }
}

fn header_role(h: &str) -> Option<usize> {
    match h.trim().trim_start_matches('\u{feff}').to_lowercase().as_str() {
        "name" | "source_name" => Some(0),
        "description" | "source_description" => Some(1),
        "values" | "source_values" => Some(2),
        _ => None,
    }
}

/// Reads a data dictionary CSV with `name`, `description` and `values`
/// columns (`source_*` spellings from an export are accepted too). Other
/// columns are carried along untouched. Element ids are `e1..en`.
pub fn import_source_csv<R: Read>(reader: R) -> Result<ImportedDictionary, StoreError> {
    let mut rdr = csv::ReaderBuilder::new().flexible(true).from_reader(reader);
    let headers = rdr.headers().map_err(|e| StoreError::Import(e.to_string()))?.clone();
    let mut roles = [None; 3];
    let mut extra_cols = Vec::new();
    for (i, h) in headers.iter().enumerate() {
        match header_role(h) {
            Some(r) if roles[r].is_none() => roles[r] = Some(i),
            _ => extra_cols.push(i),
        }
    }
    let [Some(name_col), Some(desc_col), Some(values_col)] = roles else {
        return Err(StoreError::Import(format!(
            "header must contain name, description and values; found: {}",
            headers.iter().collect::<Vec<_>>().join(", ")
        )));
    };
    let mut out = ImportedDictionary {
        extra_columns: extra_cols.iter().map(|&i| headers[i].to_string()).collect(),
        ..ImportedDictionary::default()
    };
    for (i, row) in rdr.records().enumerate() {
        let line = i + 2;
        let row = match row {
            Ok(r) => r,
            Err(e) => {
                out.rejected.push(RejectedRow {
                    line,
                    reason: e.to_string(),
                });
                continue;
            }
        };
        let get = |c: usize| row.get(c).unwrap_or_default().to_string();
        let name = get(name_col);
        if name.trim().is_empty() {
            out.rejected.push(RejectedRow {
                line,
                reason: "empty name".into(),
            });
            continue;
        }
        let raw_values = get(values_col);
        out.elements.push(ImportedElement {
            element: SourceElement {
                element_id: format!("e{}", out.elements.len() + 1),
                name,
                description: get(desc_col),
                value_set: multivalue::split(&raw_values),
            },
            raw_values,
            extra: extra_cols.iter().map(|&c| get(c)).collect(),
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectMeta {
    pub project_id: String,
    pub name: String,
    pub created_at: String,
    pub config: PipelineConfig,
    #[serde(default)]
    pub extra_columns: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElementState {
    #[serde(flatten)]
    pub imported: ImportedElement,
    pub status: ElementStatus,
    pub candidates: Option<CandidateList>,
    pub decision: Option<MappingDecision>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", content = "payload", rename_all = "snake_case")]
pub enum EventBody {
    Import { elements: Vec<ImportedElement> },
    Candidates(CandidateList),
    Decision(MappingDecision),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub seq: u64,
    pub at: String,
    #[serde(flatten)]
    pub body: EventBody,
}

impl Event {
    fn file_name(&self) -> &'static str {
        match self.body {
            EventBody::Import { .. } => "elements.jsonl",
            EventBody::Candidates(_) => "candidates.jsonl",
            EventBody::Decision(_) => "decisions.jsonl",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectState {
    pub meta: ProjectMeta,
    pub elements: Vec<ElementState>,
    /// Every decision ever recorded, oldest first.
    pub history: Vec<MappingDecision>,
    pub last_seq: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProjectSummary {
    pub project_id: String,
    pub name: String,
    pub created_at: String,
    pub element_count: usize,
    pub status_counts: HashMap<ElementStatus, usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ElementSort {
    #[default]
    Id,
    Name,
    NameDesc,
    Status,
}

impl ElementSort {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "" | "id" => Some(Self::Id),
            "name" => Some(Self::Name),
            "-name" => Some(Self::NameDesc),
            "status" => Some(Self::Status),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElementPage {
    pub total: usize,
    pub page: usize,
    pub page_size: usize,
    pub elements: Vec<ElementState>,
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

fn element_number(id: &str) -> u64 {
    id.trim_start_matches('e').parse().unwrap_or(u64::MAX)
}

impl ProjectState {
    pub fn new(meta: ProjectMeta) -> Self {
        Self {
            meta,
            elements: Vec::new(),
            history: Vec::new(),
            last_seq: 0,
        }
    }

    pub fn element(&self, element_id: &str) -> Result<&ElementState, StoreError> {
        self.elements
            .iter()
            .find(|e| e.imported.element.element_id == element_id)
            .ok_or_else(|| StoreError::NotFound {
                kind: "element",
                id: element_id.to_string(),
            })
    }

    fn element_mut(&mut self, element_id: &str) -> Result<&mut ElementState, StoreError> {
        self.elements
            .iter_mut()
            .find(|e| e.imported.element.element_id == element_id)
            .ok_or_else(|| StoreError::NotFound {
                kind: "element",
                id: element_id.to_string(),
            })
    }

    /// Applies one event. Events are validated before they are written, so
    /// an error here means the log itself is inconsistent.
    pub fn apply(&mut self, event: &Event) -> Result<(), StoreError> {
        match &event.body {
            EventBody::Import { elements } => {
                for imported in elements {
                    if self.element(&imported.element.element_id).is_ok() {
                        return Err(StoreError::Invalid(format!(
                            "duplicate element id {}",
                            imported.element.element_id
                        )));
                    }
                    self.elements.push(ElementState {
                        imported: imported.clone(),
                        status: ElementStatus::Unmapped,
                        candidates: None,
                        decision: None,
                    });
                }
            }
            EventBody::Candidates(list) => {
                let el = self.element_mut(&list.element_id)?;
                el.candidates = Some(list.clone());
                el.status = ElementStatus::CandidatesReady;
            }
            EventBody::Decision(decision) => {
                let el = self.element_mut(&decision.element_id)?;
                el.status = if decision.target.is_some() {
                    ElementStatus::Mapped
                } else {
                    ElementStatus::NoMatch
                };
                el.decision = Some(decision.clone());
                self.history.push(decision.clone());
            }
        }
        self.last_seq = self.last_seq.max(event.seq);
        Ok(())
    }

    fn next_event(&self, body: EventBody) -> Event {
        Event {
            seq: self.last_seq + 1,
            at: now(),
            body,
        }
    }

    /// Checks a decision and resolves its target. `Ok(None)` means the same
    /// decision is already in effect.
    pub fn prepare_decision(
        &self,
        request: &DecisionRequest,
        corpus: &Corpus,
    ) -> Result<Option<MappingDecision>, StoreError> {
        let el = self.element(&request.element_id)?;
        let target = match &request.selected {
            None => {
                if !request.value_mappings.is_empty() {
                    return Err(StoreError::Invalid("value mappings need a selected target".into()));
                }
                None
            }
            Some(id) => {
                let record = corpus.get(id).ok_or_else(|| StoreError::NotFound {
                    kind: "CDE",
                    id: id.clone(),
                })?;
                let offered = el
                    .candidates
                    .as_ref()
                    .is_some_and(|c| c.candidates.iter().any(|c| &c.tiny_id == id));
                if !offered && request.origin != DecisionOrigin::ManualSearch {
                    return Err(StoreError::Invalid(format!(
                        "{id} was not among the element's candidates; use origin manual_search"
                    )));
                }
                Some(TargetRef {
                    tiny_id: record.tiny_id.clone(),
                    name: record.name.clone(),
                    collection: record.collection.clone(),
                    detail_url: record.detail_url.clone(),
                })
            }
        };
        if let Some(current) = &el.decision {
            let same = current.target == target
                && current.origin == request.origin
                && current.value_mappings == request.value_mappings;
            if same && el.status != ElementStatus::CandidatesReady {
                return Ok(None);
            }
        }
        Ok(Some(MappingDecision {
            element_id: request.element_id.clone(),
            target,
            origin: request.origin,
            value_mappings: request.value_mappings.clone(),
            decided_at: now(),
        }))
    }

    /// Applies an in-memory import (no persistence).
    pub fn import(&mut self, elements: Vec<ImportedElement>) -> Result<(), StoreError> {
        let event = self.next_event(EventBody::Import { elements });
        self.apply(&event)
    }

    pub fn set_candidates(&mut self, list: CandidateList) -> Result<(), StoreError> {
        let event = self.next_event(EventBody::Candidates(list));
        self.apply(&event)
    }

    pub fn decide(&mut self, request: &DecisionRequest, corpus: &Corpus) -> Result<ElementStatus, StoreError> {
        if let Some(decision) = self.prepare_decision(request, corpus)? {
            let event = self.next_event(EventBody::Decision(decision));
            self.apply(&event)?;
        }
        Ok(self.element(&request.element_id)?.status)
    }

    pub fn summary(&self) -> ProjectSummary {
        let mut status_counts = HashMap::new();
        for e in &self.elements {
            *status_counts.entry(e.status).or_default() += 1;
        }
        ProjectSummary {
            project_id: self.meta.project_id.clone(),
            name: self.meta.name.clone(),
            created_at: self.meta.created_at.clone(),
            element_count: self.elements.len(),
            status_counts,
        }
    }

    /// One page of elements; `page` is 1-based.
    pub fn page(&self, status: Option<ElementStatus>, sort: ElementSort, page: usize, page_size: usize) -> ElementPage {
        let mut rows: Vec<&ElementState> = self
            .elements
            .iter()
            .filter(|e| status.is_none_or(|s| e.status == s))
            .collect();
        match sort {
            ElementSort::Id => rows.sort_by_key(|e| element_number(&e.imported.element.element_id)),
            ElementSort::Name => rows.sort_by(|a, b| a.imported.element.name.cmp(&b.imported.element.name)),
            ElementSort::NameDesc => rows.sort_by(|a, b| b.imported.element.name.cmp(&a.imported.element.name)),
            ElementSort::Status => rows.sort_by_key(|e| (e.status.as_str(), element_number(&e.imported.element.element_id))),
        }
        let page = page.max(1);
        let page_size = page_size.clamp(1, 1000);
        ElementPage {
            total: rows.len(),
            page,
            page_size,
            elements: rows.into_iter().skip((page - 1) * page_size).take(page_size).cloned().collect(),
        }
    }

    /// CSV export. Rows that are not mapped carry empty target columns.
    pub fn export_csv(&self) -> Vec<u8> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header: Vec<&str> = EXPORT_COLUMNS.to_vec();
        header.extend(self.meta.extra_columns.iter().map(String::as_str));
        w.write_record(&header).expect("in-memory csv write");
        for e in &self.elements {
            let decision = e.decision.as_ref().filter(|_| matches!(e.status, ElementStatus::Mapped | ElementStatus::NoMatch));
            let target = decision.and_then(|d| d.target.as_ref());
            let pairs: Vec<String> = decision
                .map(|d| {
                    d.value_mappings
                        .iter()
                        .map(|m| format!("{}={}", m.source_value, m.matched_value))
                        .collect()
                })
                .unwrap_or_default();
            let mut row = vec![
                e.imported.element.name.clone(),
                e.imported.element.description.clone(),
                e.imported.raw_values.clone(),
                target.map(|t| t.tiny_id.clone()).unwrap_or_default(),
                target.map(|t| t.name.clone()).unwrap_or_default(),
                target.map(|t| t.collection.clone()).unwrap_or_default(),
                target.map(|t| t.detail_url.clone()).unwrap_or_default(),
                decision.map(|d| d.origin.as_str().to_string()).unwrap_or_default(),
                multivalue::join(&pairs),
                e.status.as_str().to_string(),
            ];
            row.extend(e.imported.extra.iter().cloned());
            row.resize(header.len(), String::new());
            w.write_record(&row).expect("in-memory csv write");
        }
        w.into_inner().expect("in-memory csv flush")
    }
}

pub const EXPORT_COLUMNS: [&str; 10] = [
    "source_name",
    "source_description",
    "source_values",
    "target_tiny_id",
    "target_name",
    "target_collection",
    "target_detail_url",
    "origin",
    "value_mappings",
    "status",
];

struct OpenProject {
    dir: PathBuf,
    state: ProjectState,
    since_snapshot: u64,
}

impl OpenProject {
    fn append(&mut self, event: Event) -> Result<(), StoreError> {
        let path = self.dir.join(event.file_name());
        let mut line = serde_json::to_string(&event).map_err(|e| StoreError::Invalid(e.to_string()))?;
        line.push('\n');
        let mut f = OpenOptions::new().create(true).append(true).open(&path)?;
        f.write_all(line.as_bytes())?;
        f.sync_data()?;
        self.state.apply(&event)?;
        self.since_snapshot += 1;
        if self.since_snapshot >= SNAPSHOT_EVERY {
            self.compact()?;
        }
        Ok(())
    }

    fn compact(&mut self) -> Result<(), StoreError> {
        write_atomic(&self.dir.join("snapshot.json"), &serde_json::to_vec(&self.state).expect("state serializes"))?;
        self.since_snapshot = 0;
        Ok(())
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), StoreError> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Reads one event file, truncating a torn final line in place.
fn read_events(path: &Path) -> Result<Vec<Event>, StoreError> {
    let Ok(mut file) = OpenOptions::new().read(true).write(true).open(path) else {
        return Ok(Vec::new());
    };
    let mut events = Vec::new();
    let mut good_len = 0u64;
    let mut torn = false;
    {
        let mut reader = BufReader::new(&mut file);
        let mut line = String::new();
        let mut line_no = 0;
        loop {
            line.clear();
            let n = reader.read_line(&mut line)?;
            if n == 0 {
                break;
            }
            line_no += 1;
            let complete = line.ends_with('\n');
            match serde_json::from_str::<Event>(line.trim_end()) {
                Ok(ev) if complete => {
                    events.push(ev);
                    good_len += n as u64;
                }
                result => {
                    let at_end = reader.fill_buf()?.is_empty();
                    if at_end {
                        warn!(path = %path.display(), line = line_no, "dropping torn final event line");
                        torn = true;
                        break;
                    }
                    return Err(StoreError::Corrupt {
                        path: path.to_path_buf(),
                        message: format!(
                            "line {line_no}: {}",
                            result.err().map_or("missing newline".into(), |e| e.to_string())
                        ),
                    });
                }
            }
        }
    }
    if torn {
        file.set_len(good_len)?;
        file.seek(SeekFrom::End(0))?;
    }
    Ok(events)
}

/// On-disk collection of projects, one directory each.
pub struct Store {
    root: PathBuf,
    open: Mutex<HashMap<String, Arc<Mutex<OpenProject>>>>,
}

impl std::fmt::Debug for Store {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Store").field("root", &self.root).finish()
    }
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|p| p.into_inner())
}

fn valid_project_id(id: &str) -> bool {
    !id.is_empty() && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-')
}

impl Store {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let root = root.into();
        fs::create_dir_all(&root)?;
        Ok(Self {
            root,
            open: Mutex::new(HashMap::new()),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn handle(&self, project_id: &str) -> Result<Arc<Mutex<OpenProject>>, StoreError> {
        let not_found = || StoreError::NotFound {
            kind: "project",
            id: project_id.to_string(),
        };
        if !valid_project_id(project_id) {
            return Err(not_found());
        }
        let mut open = lock(&self.open);
        if let Some(h) = open.get(project_id) {
            return Ok(h.clone());
        }
        let dir = self.root.join(project_id);
        let meta_path = dir.join("project.json");
        if !meta_path.is_file() {
            return Err(not_found());
        }
        let corrupt = |path: &Path, e: serde_json::Error| StoreError::Corrupt {
            path: path.to_path_buf(),
            message: e.to_string(),
        };
        let meta: ProjectMeta = serde_json::from_slice(&fs::read(&meta_path)?).map_err(|e| corrupt(&meta_path, e))?;
        let snap_path = dir.join("snapshot.json");
        let mut state = if snap_path.is_file() {
            serde_json::from_slice(&fs::read(&snap_path)?).map_err(|e| corrupt(&snap_path, e))?
        } else {
            ProjectState::new(meta)
        };
        let mut events = Vec::new();
        for file in ["elements.jsonl", "candidates.jsonl", "decisions.jsonl"] {
            events.extend(read_events(&dir.join(file))?);
        }
        events.sort_by_key(|e| e.seq);
        let mut replayed = 0;
        let base = state.last_seq;
        for ev in events.iter().filter(|e| e.seq > base) {
            state.apply(ev)?;
            replayed += 1;
        }
        let handle = Arc::new(Mutex::new(OpenProject {
            dir,
            state,
            since_snapshot: replayed,
        }));
        open.insert(project_id.to_string(), handle.clone());
        Ok(handle)
    }

    /// Creates a project from a dictionary CSV. Rejected rows are reported,
    /// not fatal; a missing header is.
    pub fn create_project<R: Read>(
        &self,
        name: &str,
        config: PipelineConfig,
        csv: R,
    ) -> Result<(ProjectSummary, ImportReport), StoreError> {
        let dictionary = import_source_csv(csv)?;
        let project_id = uuid::Uuid::new_v4().simple().to_string();
        let dir = self.root.join(&project_id);
        fs::create_dir_all(&dir)?;
        let meta = ProjectMeta {
            project_id: project_id.clone(),
            name: if name.trim().is_empty() { "Untitled project".into() } else { name.to_string() },
            created_at: now(),
            config,
            extra_columns: dictionary.extra_columns.clone(),
        };
        write_atomic(&dir.join("project.json"), &serde_json::to_vec_pretty(&meta).expect("meta serializes"))?;
        let report = dictionary.report();
        let handle = self.handle(&project_id)?;
        let mut project = lock(&handle);
        let event = project.state.next_event(EventBody::Import {
            elements: dictionary.elements,
        });
        project.append(event)?;
        Ok((project.state.summary(), report))
    }

    pub fn list_projects(&self) -> Result<Vec<ProjectSummary>, StoreError> {
        let mut out = Vec::new();
        for entry in fs::read_dir(&self.root)? {
            let entry = entry?;
            let id = entry.file_name().to_string_lossy().to_string();
            if entry.path().join("project.json").is_file() {
                out.push(self.summary(&id)?);
            }
        }
        out.sort_by(|a, b| a.created_at.cmp(&b.created_at).then_with(|| a.project_id.cmp(&b.project_id)));
        Ok(out)
    }

    /// A copy of the project's current state.
    pub fn project(&self, project_id: &str) -> Result<ProjectState, StoreError> {
        let handle = self.handle(project_id)?;
        let project = lock(&handle);
        Ok(project.state.clone())
    }

    pub fn summary(&self, project_id: &str) -> Result<ProjectSummary, StoreError> {
        let handle = self.handle(project_id)?;
        let project = lock(&handle);
        Ok(project.state.summary())
    }

    /// Runs `f` on the project state while holding its lock.
    pub fn read<T>(&self, project_id: &str, f: impl FnOnce(&ProjectState) -> T) -> Result<T, StoreError> {
        let handle = self.handle(project_id)?;
        let project = lock(&handle);
        Ok(f(&project.state))
    }

    pub fn record_candidates(&self, project_id: &str, list: CandidateList) -> Result<(), StoreError> {
        let handle = self.handle(project_id)?;
        let mut project = lock(&handle);
        project.state.element(&list.element_id)?;
        let event = project.state.next_event(EventBody::Candidates(list));
        project.append(event)
    }

    /// Persists a decision and returns the element's new status. Repeating
    /// the decision in effect is a no-op.
    pub fn record_decision(
        &self,
        project_id: &str,
        request: &DecisionRequest,
        corpus: &Corpus,
    ) -> Result<ElementStatus, StoreError> {
        let handle = self.handle(project_id)?;
        let mut project = lock(&handle);
        if let Some(decision) = project.state.prepare_decision(request, corpus)? {
            let event = project.state.next_event(EventBody::Decision(decision));
            project.append(event)?;
        }
        Ok(project.state.element(&request.element_id)?.status)
    }

    pub fn export_csv(&self, project_id: &str) -> Result<Vec<u8>, StoreError> {
        let handle = self.handle(project_id)?;
        let project = lock(&handle);
        Ok(project.state.export_csv())
    }

    pub fn compact(&self, project_id: &str) -> Result<(), StoreError> {
        let handle = self.handle(project_id)?;
        let mut project = lock(&handle);
        project.compact()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::CdeRecord;
    use crate::pipeline::{Candidate, QueryTrace};
    use std::collections::BTreeMap;

    fn corpus() -> Corpus {
        let rec = |id: &str, name: &str, coll: &str| CdeRecord {
            tiny_id: id.into(),
            name: name.into(),
            designations: vec![],
            question_texts: vec![],
            definition: String::new(),
            collection: coll.into(),
            permissible_values: vec![],
            detail_url: format!("https://cde.nlm.nih.gov/deView?tinyId={id}"),
        };
        Corpus::new(vec![rec("r1", "Race", "NIH-Endorsed"), rec("e1", "Ethnicity", "NINDS")]).unwrap()
    }

    fn candidates(element_id: &str, ids: &[&str]) -> CandidateList {
        CandidateList {
            element_id: element_id.into(),
            config: PipelineConfig::default(),
            query: QueryTrace::default(),
            candidates: ids
                .iter()
                .enumerate()
                .map(|(i, id)| Candidate {
                    tiny_id: id.to_string(),
                    name: id.to_string(),
                    collection: "X".into(),
                    lexical_score: Some(1.0 / (i + 1) as f64),
                    vector_score: None,
                    fused_score: 1.0 / (61 + i) as f64,
                    rank: i + 1,
                    llm_suggested: false,
                    detail_url: String::new(),
                })
                .collect(),
            timings: BTreeMap::from([("lexical".into(), 0.123)]),
            degraded: vec![],
        }
    }

    const CSV: &str = "name,description,values,site\n\
                       Ethnicity,Self-reported ethnicity,Hispanic or Latino|Not Hispanic or Latino,A\n\
                       ,missing name,,B\n\
                       Race-White,Race,White,C\n";

    #[test]
    fn import_rules() {
        let d = import_source_csv(CSV.as_bytes()).unwrap();
        assert_eq!(d.elements.len(), 2);
        assert_eq!(d.elements[0].element.value_set.len(), 2);
        assert_eq!(d.elements[1].element.element_id, "e2");
        assert_eq!(d.rejected, [RejectedRow { line: 3, reason: "empty name".into() }]);
        assert_eq!(d.extra_columns, ["site"]);
        assert!(import_source_csv("name,description,values\n".as_bytes()).unwrap().elements.is_empty());
        let err = import_source_csv("label,description,values\nx,y,z\n".as_bytes()).unwrap_err();
        assert!(err.to_string().contains("label"));
    }

    #[test]
    fn decisions_and_export() {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::open(dir.path()).unwrap();
        let (summary, report) = store.create_project("demo", PipelineConfig::default(), CSV.as_bytes()).unwrap();
        assert_eq!(report.rejected.len(), 1);
        let pid = summary.project_id;
        let c = corpus();
        store.record_candidates(&pid, candidates("e2", &["r1", "e1"])).unwrap();
        let req = DecisionRequest {
            element_id: "e2".into(),
            selected: Some("r1".into()),
            origin: DecisionOrigin::AutoTop1,
            value_mappings: vec![ValueMatch {
                source_value: "White".into(),
                matched_value: "White".into(),
                score: 1.0,
                fallback: false,
            }],
        };
        assert_eq!(store.record_decision(&pid, &req, &c).unwrap(), ElementStatus::Mapped);
        // identical payload again: no new history entry
        store.record_decision(&pid, &req, &c).unwrap();
        assert_eq!(store.project(&pid).unwrap().history.len(), 1);

        let no_match = DecisionRequest {
            element_id: "e1".into(),
            selected: None,
            origin: DecisionOrigin::HumanSelected,
            value_mappings: vec![],
        };
        assert_eq!(store.record_decision(&pid, &no_match, &c).unwrap(), ElementStatus::NoMatch);
        let unknown = DecisionRequest {
            element_id: "e9".into(),
            ..no_match.clone()
        };
        assert!(matches!(store.record_decision(&pid, &unknown, &c), Err(StoreError::NotFound { .. })));
        let not_offered = DecisionRequest {
            element_id: "e1".into(),
            selected: Some("r1".into()),
            origin: DecisionOrigin::HumanSelected,
            value_mappings: vec![],
        };
        assert!(store.record_decision(&pid, &not_offered, &c).is_err());
        let manual = DecisionRequest {
            origin: DecisionOrigin::ManualSearch,
            ..not_offered
        };
        assert_eq!(store.record_decision(&pid, &manual, &c).unwrap(), ElementStatus::Mapped);

        let csv = String::from_utf8(store.export_csv(&pid).unwrap()).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(
            lines[0],
            "source_name,source_description,source_values,target_tiny_id,target_name,target_collection,target_detail_url,origin,value_mappings,status,site"
        );
        assert!(lines[2].starts_with("Race-White,Race,White,r1,Race,NIH-Endorsed,"));
        assert!(lines[2].ends_with(",auto_top1,White=White,mapped,C"));
        assert_eq!(store.project(&pid).unwrap().history.len(), 3);
    }

    #[test]
    fn reload_replays_and_drops_torn_line() {
        let dir = tempfile::tempdir().unwrap();
        let pid;
        let before;
        {
            let store = Store::open(dir.path()).unwrap();
            pid = store.create_project("p", PipelineConfig::default(), CSV.as_bytes()).unwrap().0.project_id;
            store.record_candidates(&pid, candidates("e1", &["e1", "r1"])).unwrap();
            before = store.project(&pid).unwrap();
        }
        let path = dir.path().join(&pid).join("decisions.jsonl");
        fs::write(&path, "{\"seq\": 99, \"type\": \"decis").unwrap();
        let store = Store::open(dir.path()).unwrap();
        assert_eq!(store.project(&pid).unwrap(), before);
        assert_eq!(fs::read(&path).unwrap().len(), 0);
        store.compact(&pid).unwrap();
        drop(store);
        let store = Store::open(dir.path()).unwrap();
        assert_eq!(store.project(&pid).unwrap(), before);
    }

    #[test]
    fn unknown_project() {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::open(dir.path()).unwrap();
        assert!(matches!(store.project("nope"), Err(StoreError::NotFound { .. })));
        assert!(matches!(store.project("../etc"), Err(StoreError::NotFound { .. })));
    }

    #[test]
    fn empty_project_exports_header_only() {
        let mut state = ProjectState::new(ProjectMeta {
            project_id: "p".into(),
            name: "p".into(),
            created_at: String::new(),
            config: PipelineConfig::default(),
            extra_columns: vec![],
        });
        state.import(vec![]).unwrap();
        assert_eq!(String::from_utf8(state.export_csv()).unwrap().lines().count(), 1);
    }

    #[test]
    fn paging_and_sorting() {
        let mut state = ProjectState::new(ProjectMeta {
            project_id: "p".into(),
            name: "p".into(),
            created_at: String::new(),
            config: PipelineConfig::default(),
            extra_columns: vec![],
        });
        let text: String = std::iter::once("name,description,values\n".to_string())
            .chain((1..=12).map(|i| format!("N{i:02},,\n")))
            .collect();
        state.import(import_source_csv(text.as_bytes()).unwrap().elements).unwrap();
        let p = state.page(None, ElementSort::Id, 2, 5);
        assert_eq!(p.total, 12);
        assert_eq!(p.elements[0].imported.element.element_id, "e6");
        let p = state.page(None, ElementSort::NameDesc, 1, 3);
        assert_eq!(p.elements[0].imported.element.name, "N12");
        state.set_candidates(candidates("e3", &["r1"])).unwrap();
        let ready = state.page(Some(ElementStatus::CandidatesReady), ElementSort::Id, 1, 10);
        assert_eq!(ready.total, 1);
    }
}
