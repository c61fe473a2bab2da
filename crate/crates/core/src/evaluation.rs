//! Gold-standard loading, mapping-setting classification, Acc@N and coverage,
//! and benchmark reports laid out like the published accuracy table.
//!
//! A one-to-many entry counts as a hit when any of its accepted targets
//! appears in the top N. Aggregation is per entry.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::{info, warn};

use crate::corpus::Corpus;
use crate::index::IndexBundle;
use crate::llm::Gateway;
use crate::multivalue;
use crate::pipeline::{recommend_all, PipelineError, Preset, SourceElement};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("gold file: {0}")]
    Gold(String),
    #[error("datasets manifest: {0}")]
    Manifest(String),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A percentage held in hundredths so that reported values round half-up
/// exactly and compare without float noise.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Percentage(u32);

impl Percentage {
    /// `100 * num / den`, rounded half-up to two decimals.
    pub fn from_ratio(num: u64, den: u64) -> Option<Self> {
        if den == 0 || num > den {
            return None;
        }
        Some(Self(((num * 20_000 + den) / (2 * den)) as u32))
    }

    pub fn hundredths(self) -> u32 {
        self.0
    }

    pub fn value(self) -> f64 {
        f64::from(self.0) / 100.0
    }
}

impl fmt::Display for Percentage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{:02}", self.0 / 100, self.0 % 100)
    }
}

impl Serialize for Percentage {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(self.value())
    }
}

impl<'de> Deserialize<'de> for Percentage {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let v = f64::deserialize(d)?;
        if !(0.0..=100.0).contains(&v) {
            return Err(serde::de::Error::custom("percentage out of range"));
        }
        Ok(Self((v * 100.0).round() as u32))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoldEntry {
    pub dataset: String,
    pub source: SourceElement,
    pub accepted_targets: BTreeSet<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MappingSetting {
    OneToOne,
    ManyToOne,
    OneToMany,
}

impl MappingSetting {
    pub const ALL: [MappingSetting; 3] = [Self::OneToOne, Self::ManyToOne, Self::OneToMany];

    pub fn label(self) -> &'static str {
        match self {
            Self::OneToOne => "1 vs 1",
            Self::ManyToOne => "M vs 1",
            Self::OneToMany => "1 vs M",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub name: String,
    #[serde(default)]
    pub collections: Vec<String>,
    /// Size of the source dictionary; absent when coverage does not apply.
    #[serde(default)]
    pub total_elements: Option<usize>,
}

#[derive(Deserialize)]
struct Manifest {
    #[serde(default)]
    dataset: Vec<DatasetSpec>,
}

/// Reads `[[dataset]]` tables with `name`, `collections` and optional `total_elements`.
pub fn load_datasets(text: &str) -> Result<Vec<DatasetSpec>, EvalError> {
    let manifest: Manifest = toml::from_str(text).map_err(|e| EvalError::Manifest(e.to_string()))?;
    let mut seen = BTreeSet::new();
    for d in &manifest.dataset {
        if d.name.trim().is_empty() || !seen.insert(d.name.clone()) {
            return Err(EvalError::Manifest(format!("empty or duplicate dataset name `{}`", d.name)));
        }
        if d.total_elements == Some(0) {
            return Err(EvalError::Manifest(format!("dataset `{}` has total_elements = 0", d.name)));
        }
    }
    Ok(manifest.dataset)
}

pub const GOLD_HEADER: [&str; 5] = [
    "dataset",
    "source_name",
    "source_description",
    "source_values",
    "accepted_target_ids",
];

/// Parses the normalized gold CSV. Element ids are `<dataset>-<row>` with 1-based rows.
pub fn load_gold<R: Read>(reader: R) -> Result<Vec<GoldEntry>, EvalError> {
    let mut rdr = csv::ReaderBuilder::new().flexible(false).from_reader(reader);
    let headers = rdr.headers().map_err(|e| EvalError::Gold(e.to_string()))?.clone();
    let column = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| EvalError::Gold(format!("missing column `{name}` (found: {})", headers.iter().collect::<Vec<_>>().join(", "))))
    };
    let cols: Vec<usize> = GOLD_HEADER.iter().map(|h| column(h)).collect::<Result<_, _>>()?;
    let mut entries = Vec::new();
    let mut per_dataset: HashMap<String, usize> = HashMap::new();
    for (i, row) in rdr.records().enumerate() {
        let row = row.map_err(|e| EvalError::Gold(e.to_string()))?;
        let line = i + 2;
        let get = |c: usize| row.get(cols[c]).unwrap_or_default().to_string();
        let dataset = get(0).trim().to_string();
        let name = get(1);
        if dataset.is_empty() || name.trim().is_empty() {
            return Err(EvalError::Gold(format!("line {line}: dataset and source_name are required")));
        }
        let targets: BTreeSet<String> = get(4)
            .split(';')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(String::from)
            .collect();
        if targets.is_empty() {
            return Err(EvalError::Gold(format!("line {line}: no accepted target ids")));
        }
        let n = per_dataset.entry(dataset.clone()).or_default();
        *n += 1;
        entries.push(GoldEntry {
            source: SourceElement {
                element_id: format!("{dataset}-{n}"),
                name,
                description: get(2),
                value_set: multivalue::split(&get(3)),
            },
            dataset,
            accepted_targets: targets,
        });
    }
    Ok(entries)
}

pub fn write_gold<W: Write>(writer: W, entries: &[GoldEntry]) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_writer(writer);
    let csv_err = |e: csv::Error| EvalError::Gold(e.to_string());
    w.write_record(GOLD_HEADER).map_err(csv_err)?;
    for e in entries {
        w.write_record([
            e.dataset.as_str(),
            &e.source.name,
            &e.source.description,
            &multivalue::join(&e.source.value_set),
            &e.accepted_targets.iter().cloned().collect::<Vec<_>>().join(";"),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Errors when any accepted target is missing from the corpus.
pub fn check_gold(entries: &[GoldEntry], corpus: &Corpus) -> Result<(), EvalError> {
    let missing: BTreeSet<&str> = entries
        .iter()
        .flat_map(|e| e.accepted_targets.iter())
        .filter(|id| !corpus.contains(id))
        .map(String::as_str)
        .collect();
    if missing.is_empty() {
        Ok(())
    } else {
        Err(EvalError::Gold(format!(
            "{} target id(s) not in the corpus: {}",
            missing.len(),
            missing.into_iter().take(10).collect::<Vec<_>>().join(", ")
        )))
    }
}

/// Classifies each entry of one dataset, in input order.
///
/// Several accepted targets make an entry one-to-many, even when its targets
/// are also shared (logged as ambiguous). A single target referenced by two or
/// more distinct sources makes it many-to-one.
pub fn classify_settings(entries: &[GoldEntry]) -> Vec<MappingSetting> {
    let mut sources_per_target: HashMap<&str, BTreeSet<(&str, &str)>> = HashMap::new();
    for e in entries {
        for t in &e.accepted_targets {
            sources_per_target
                .entry(t.as_str())
                .or_default()
                .insert((e.source.name.as_str(), e.source.description.as_str()));
        }
    }
    let shared = |t: &str| sources_per_target.get(t).is_some_and(|s| s.len() >= 2);
    entries
        .iter()
        .map(|e| {
            if e.accepted_targets.len() > 1 {
                if e.accepted_targets.iter().all(|t| shared(t)) {
                    warn!(source = %e.source.name, "ambiguous gold entry: several targets, each shared; counted as 1 vs M");
                }
                MappingSetting::OneToMany
            } else if e.accepted_targets.iter().any(|t| shared(t)) {
                MappingSetting::ManyToOne
            } else {
                MappingSetting::OneToOne
            }
        })
        .collect()
}

/// 1-based position of the first accepted target in `ranked`.
pub fn hit_rank<S: AsRef<str>>(ranked: &[S], accepted: &BTreeSet<String>) -> Option<usize> {
    ranked.iter().position(|id| accepted.contains(id.as_ref())).map(|p| p + 1)
}

/// Share of entries whose hit rank is at most `n`.
pub fn accuracy_from_ranks(ranks: &[Option<usize>], n: usize) -> Result<Percentage, EvalError> {
    if n < 1 {
        return Err(EvalError::Argument("n must be >= 1".into()));
    }
    let hits = ranks.iter().filter(|r| r.is_some_and(|r| r <= n)).count();
    Ok(Percentage::from_ratio(hits as u64, ranks.len() as u64).unwrap_or_default())
}

/// Acc@n over gold entries, with predictions keyed by element id. Missing
/// predictions count as misses.
pub fn acc_at_n(
    predictions: &HashMap<String, Vec<String>>,
    gold: &[GoldEntry],
    n: usize,
) -> Result<Percentage, EvalError> {
    let ranks: Vec<Option<usize>> = gold
        .iter()
        .map(|e| match predictions.get(&e.source.element_id) {
            Some(ranked) => hit_rank(ranked, &e.accepted_targets),
            None => {
                warn!(element = %e.source.element_id, "no prediction for gold entry; counted as a miss");
                None
            }
        })
        .collect();
    accuracy_from_ranks(&ranks, n)
}

pub fn coverage(total_elements: usize, mapped: usize) -> Result<Percentage, EvalError> {
    if total_elements == 0 {
        return Err(EvalError::Argument("total_elements must be >= 1".into()));
    }
    Percentage::from_ratio(mapped as u64, total_elements as u64)
        .ok_or_else(|| EvalError::Argument(format!("mapped ({mapped}) exceeds total ({total_elements})")))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub dataset: String,
    pub setting: MappingSetting,
    pub entry_count: usize,
    pub preset: Preset,
    /// Absent only when the row could not be run.
    pub acc1: Option<Percentage>,
    pub acc5: Option<Percentage>,
    pub acc10: Option<Percentage>,
    pub degraded: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageRow {
    pub dataset: String,
    pub total_elements: Option<usize>,
    pub mapped_elements: usize,
    pub coverage_rate: Option<Percentage>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub rows: Vec<ReportRow>,
    pub coverage: Vec<CoverageRow>,
    pub mock_gateway: bool,
}

/// One recommendation outcome, enough to recompute every reported number.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub dataset: String,
    pub preset: Preset,
    pub setting: MappingSetting,
    pub element_id: String,
    pub source_name: String,
    pub query: String,
    pub candidate_ids: Vec<String>,
    pub accepted_targets: BTreeSet<String>,
    pub hit_rank: Option<usize>,
    pub degraded: bool,
}

#[derive(Debug, Clone, Default)]
pub struct BenchmarkRun {
    pub report: EvaluationReport,
    pub audit: Vec<AuditRecord>,
}

/// Hit rank and degraded flag for one gold entry.
type EntryOutcome = (Option<usize>, bool);

/// Runs every preset over every dataset that has gold entries.
///
/// Rows are ordered by dataset (manifest order), setting, then preset. A
/// preset that needs an LLM when no gateway is available yields degraded rows
/// with no accuracies.
pub fn run_benchmark(
    datasets: &[DatasetSpec],
    gold: &[GoldEntry],
    presets: &[Preset],
    bundle: &IndexBundle,
    gateway: Option<&Gateway>,
) -> Result<BenchmarkRun, EvalError> {
    let mut run = BenchmarkRun {
        report: EvaluationReport {
            mock_gateway: gateway.is_some_and(Gateway::is_mock),
            ..EvaluationReport::default()
        },
        audit: Vec::new(),
    };
    let known: BTreeSet<&str> = datasets.iter().map(|d| d.name.as_str()).collect();
    for e in gold {
        if !known.contains(e.dataset.as_str()) {
            return Err(EvalError::Gold(format!("dataset `{}` is not in the manifest", e.dataset)));
        }
    }
    for spec in datasets {
        let entries: Vec<GoldEntry> = gold.iter().filter(|e| e.dataset == spec.name).cloned().collect();
        if entries.is_empty() {
            continue;
        }
        run.report.coverage.push(CoverageRow {
            dataset: spec.name.clone(),
            total_elements: spec.total_elements,
            mapped_elements: entries.len(),
            coverage_rate: spec.total_elements.map(|t| coverage(t, entries.len())).transpose()?,
        });
        if presets.is_empty() {
            continue;
        }
        let settings = classify_settings(&entries);
        let elements: Vec<SourceElement> = entries.iter().map(|e| e.source.clone()).collect();
        let collections: BTreeSet<String> = spec.collections.iter().cloned().collect();

        // None when the preset could not run
        let mut outcomes: BTreeMap<Preset, Option<Vec<EntryOutcome>>> = BTreeMap::new();
        for &preset in presets {
            let mut config = preset.config();
            config.collections = (!collections.is_empty()).then(|| collections.clone());
            if config.needs_gateway() && gateway.is_none() {
                warn!(dataset = %spec.name, %preset, "no LLM gateway; rows marked degraded");
                outcomes.insert(preset, None);
                continue;
            }
            info!(dataset = %spec.name, %preset, entries = entries.len(), "running benchmark");
            let lists = recommend_all(&elements, &config, bundle, gateway, &|_| {});
            let mut per_entry = Vec::with_capacity(entries.len());
            for ((entry, setting), list) in entries.iter().zip(&settings).zip(lists) {
                let list = list?;
                let ids: Vec<String> = list.candidates.iter().map(|c| c.tiny_id.clone()).collect();
                let rank = hit_rank(&ids, &entry.accepted_targets);
                let degraded = !list.degraded.is_empty();
                run.audit.push(AuditRecord {
                    dataset: spec.name.clone(),
                    preset,
                    setting: *setting,
                    element_id: entry.source.element_id.clone(),
                    source_name: entry.source.name.clone(),
                    query: list.query.lexical_query.clone(),
                    candidate_ids: ids,
                    accepted_targets: entry.accepted_targets.clone(),
                    hit_rank: rank,
                    degraded,
                });
                per_entry.push((rank, degraded));
            }
            outcomes.insert(preset, Some(per_entry));
        }

        for setting in MappingSetting::ALL {
            let members: Vec<usize> = (0..entries.len()).filter(|i| settings[*i] == setting).collect();
            for &preset in presets {
                let row = match &outcomes[&preset] {
                    None => ReportRow {
                        dataset: spec.name.clone(),
                        setting,
                        entry_count: members.len(),
                        preset,
                        acc1: None,
                        acc5: None,
                        acc10: None,
                        degraded: true,
                    },
                    Some(per_entry) => {
                        let ranks: Vec<Option<usize>> = members.iter().map(|i| per_entry[*i].0).collect();
                        let full = !preset.uses_rerank();
                        ReportRow {
                            dataset: spec.name.clone(),
                            setting,
                            entry_count: members.len(),
                            preset,
                            acc1: Some(accuracy_from_ranks(&ranks, 1)?),
                            acc5: full.then(|| accuracy_from_ranks(&ranks, 5)).transpose()?,
                            acc10: full.then(|| accuracy_from_ranks(&ranks, 10)).transpose()?,
                            degraded: members.iter().any(|i| per_entry[*i].1),
                        }
                    }
                };
                run.report.rows.push(row);
            }
        }
    }
    Ok(run)
}

fn cell(p: Option<Percentage>) -> String {
    p.map_or_else(|| "-".to_string(), |p| p.to_string())
}

impl EvaluationReport {
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        let rows = std::iter::once(
            ["dataset", "setting", "entry_count", "method", "acc@1", "acc@5", "acc@10", "degraded"].map(String::from),
        )
        .chain(self.rows.iter().map(|r| {
            [
                r.dataset.clone(),
                r.setting.label().to_string(),
                r.entry_count.to_string(),
                r.preset.as_str().to_string(),
                cell(r.acc1),
                cell(r.acc5),
                cell(r.acc10),
                r.degraded.to_string(),
            ]
        }));
        for row in rows {
            w.write_record(&row).expect("in-memory csv write");
        }
        String::from_utf8(w.into_inner().expect("in-memory csv flush")).expect("utf-8 csv")
    }

    pub fn coverage_csv(&self) -> String {
        let mut out = String::from("dataset,total_elements,mapped_elements,coverage_rate\n");
        for c in &self.coverage {
            let total = c.total_elements.map_or_else(|| "n/a".into(), |t| t.to_string());
            let rate = c.coverage_rate.map_or_else(|| "not applicable".into(), |p| format!("{p}%"));
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record([c.dataset.clone(), total, c.mapped_elements.to_string(), rate])
                .expect("in-memory csv write");
            out.push_str(std::str::from_utf8(&w.into_inner().expect("in-memory csv flush")).expect("utf-8 csv"));
        }
        out
    }

    /// Plain-text table: dataset and category are printed on the first row of
    /// each group; "-" marks values that do not apply.
    pub fn to_table(&self) -> String {
        let header = ["Datasets", "Category (numbers)", "Method", "Acc@1", "Acc@5", "Acc@10"];
        let mut lines: Vec<[String; 6]> = vec![header.map(String::from)];
        let mut last_dataset = "";
        let mut last_group: Option<(&str, MappingSetting)> = None;
        for r in &self.rows {
            let dataset = if r.dataset != last_dataset { r.dataset.clone() } else { String::new() };
            let group = (r.dataset.as_str(), r.setting);
            let category = if last_group != Some(group) {
                format!("{} ({})", r.setting.label(), r.entry_count)
            } else {
                String::new()
            };
            last_dataset = &r.dataset;
            last_group = Some(group);
            let method = if r.degraded { format!("{}*", r.preset.label()) } else { r.preset.label().to_string() };
            lines.push([dataset, category, method, cell(r.acc1), cell(r.acc5), cell(r.acc10)]);
        }
        let widths: Vec<usize> = (0..6).map(|c| lines.iter().map(|l| l[c].chars().count()).max().unwrap_or(0)).collect();
        let mut out = String::new();
        for (i, l) in lines.iter().enumerate() {
            let row: Vec<String> = l
                .iter()
                .enumerate()
                .map(|(c, v)| if c < 3 { format!("{v:<w$}", w = widths[c]) } else { format!("{v:>w$}", w = widths[c]) })
                .collect();
            out.push_str(row.join("  ").trim_end());
            out.push('\n');
            if i == 0 {
                out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 10));
                out.push('\n');
            }
        }
        out.push_str("\nAcc@N: an entry is a hit when any accepted target is within the top N candidates.\n");
        out.push_str("\"-\": not applicable after re-ranking, or the row could not be run.\n");
        if self.rows.iter().any(|r| r.degraded) {
            out.push_str("*: degraded run (LLM unavailable or fell back); numbers do not reflect the LLM method.\n");
        }
        if self.mock_gateway {
            out.push_str("LLM stages used the deterministic offline mock.\n");
        }
        out
    }
}

pub fn write_audit<W: Write>(mut writer: W, audit: &[AuditRecord]) -> std::io::Result<()> {
    for record in audit {
        serde_json::to_writer(&mut writer, record)?;
        writer.write_all(b"\n")?;
    }
    writer.flush()
}
