use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use cdemapper_core::corpus::{load_corpus, LoadOptions};
use cdemapper_core::evaluation::{self, check_gold, load_datasets, load_gold, run_benchmark, EvalError};
use cdemapper_core::index::FieldWeights;
use cdemapper_core::pipeline::{map_values, parse_collections, recommend_all, PipelineError, ValueMapping};
use cdemapper_core::store::{import_source_csv, DecisionOrigin, DecisionRequest, ProjectMeta, ProjectState, Store};
use cdemapper_core::{Bm25Params, Gateway, IndexBundle, LlmConfig, Preset, VectorIndex};
use clap::{Args, Parser, Subcommand};
use tracing::{info, warn};

use crate::config::ServiceConfig;
use crate::jobs::Jobs;
use crate::server::{self, Shared};

#[derive(Debug, Parser)]
#[command(name = "cdemapper", version, about = "Map local data dictionaries to NIH Common Data Elements")]
pub struct Cli {
    /// Use the deterministic offline LLM mock instead of a live endpoint.
    #[arg(long, global = true)]
    pub mock_llm: bool,
    /// LLM endpoint settings (flat `key = value` file).
    #[arg(long, global = true, value_name = "FILE")]
    pub llm_config: Option<PathBuf>,
    /// More log output on standard error (repeat for more).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Index management.
    Index {
        #[command(subcommand)]
        command: IndexCommand,
    },
    /// Map every element of a dictionary CSV and write the export CSV.
    Map(MapArgs),
    /// Run the Acc@N benchmark over gold datasets.
    Eval(EvalArgs),
    /// Start the HTTP service.
    Serve(ServeArgs),
}

#[derive(Debug, Subcommand)]
pub enum IndexCommand {
    /// Build the BM25 index and, unless disabled, the embedding index.
    Build(BuildArgs),
}

#[derive(Debug, Args)]
pub struct BuildArgs {
    /// CDE export as a JSON array of records.
    #[arg(long, value_name = "FILE")]
    pub corpus: PathBuf,
    /// Directory the index bundle is written to.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Field boosts, e.g. `name=3,designations=2`; unlisted fields keep defaults.
    #[arg(long, value_name = "SPEC")]
    pub field_weights: Option<String>,
    /// BM25 term-frequency saturation (default 1.2).
    #[arg(long)]
    pub k1: Option<f64>,
    /// BM25 length normalization in [0, 1] (default 0.75).
    #[arg(long)]
    pub b: Option<f64>,
    /// Skip the embedding index (lexical search only).
    #[arg(long)]
    pub no_embeddings: bool,
    /// Only keep records from these collections (comma-separated).
    #[arg(long, value_name = "A,B")]
    pub collections: Option<String>,
    /// Date of the corpus export; defaults to today (UTC).
    #[arg(long, value_name = "YYYY-MM-DD")]
    pub snapshot_date: Option<String>,
}

#[derive(Debug, Args)]
pub struct MapArgs {
    /// Index bundle built by `index build`.
    #[arg(long, value_name = "DIR")]
    pub index: PathBuf,
    /// Data dictionary with name, description and values columns.
    #[arg(long, value_name = "CSV")]
    pub input: PathBuf,
    /// One of bm25, bm25+emb, bm25+rank, bm25+emb+rank.
    #[arg(long, value_parser = parse_preset, default_value = "bm25")]
    pub preset: Preset,
    /// Restrict candidates to these collections (comma-separated).
    #[arg(long, value_name = "A,B")]
    pub collections: Option<String>,
    /// Export CSV with the top candidate recorded for each element.
    #[arg(long, value_name = "CSV")]
    pub out: PathBuf,
    /// Candidates kept per element (default 10).
    #[arg(long)]
    pub top_k: Option<usize>,
    /// Also fill value mappings for each chosen CDE through the LLM.
    #[arg(long)]
    pub map_values: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Index bundle built by `index build`.
    #[arg(long, value_name = "DIR")]
    pub index: PathBuf,
    /// Gold mappings in the normalized CSV layout.
    #[arg(long, value_name = "CSV")]
    pub gold: PathBuf,
    /// Dataset manifest (TOML `[[dataset]]` tables with name, collections, total_elements).
    #[arg(long, value_name = "TOML")]
    pub datasets: PathBuf,
    /// Comma-separated presets: bm25, bm25+emb, bm25+rank, bm25+emb+rank.
    #[arg(long, default_value = "bm25")]
    pub presets: String,
    /// Text report in the accuracy-table layout.
    #[arg(long, value_name = "PATH")]
    pub report: PathBuf,
    /// Same rows as CSV.
    #[arg(long, value_name = "PATH")]
    pub csv: Option<PathBuf>,
    /// Per-entry audit trail (JSONL).
    #[arg(long, value_name = "PATH")]
    pub audit: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// Service settings (flat `key = value` file).
    #[arg(long, value_name = "FILE")]
    pub config: PathBuf,
}

fn parse_preset(s: &str) -> Result<Preset, String> {
    s.parse().map_err(|e: PipelineError| e.to_string())
}

/// Why a command failed; decides the exit code.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Data(String),
    Upstream(String),
}

impl Failure {
    pub fn code(&self) -> i32 {
        match self {
            Self::Usage(_) => 1,
            Self::Data(_) => 2,
            Self::Upstream(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Self::Usage(m) | Self::Data(m) | Self::Upstream(m) => m,
        }
    }
}

fn data(context: impl std::fmt::Display) -> impl FnOnce(String) -> Failure {
    move |e| Failure::Data(format!("{context}: {e}"))
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Gateway(_) | PipelineError::GatewayRequired => Self::Upstream(e.to_string()),
            PipelineError::Config(_) => Self::Usage(e.to_string()),
            _ => Self::Data(e.to_string()),
        }
    }
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    init_logging(cli.verbose);
    match execute(&cli) {
        Ok(()) => 0,
        Err(f) => {
            eprintln!("error: {}", f.message());
            f.code()
        }
    }
}

fn init_logging(verbose: u8) {
    let default = match verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let filter = tracing_subscriber::EnvFilter::try_from_default_env()
        .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new(default));
    let _ = tracing_subscriber::fmt().with_env_filter(filter).with_writer(std::io::stderr).try_init();
}

pub fn execute(cli: &Cli) -> Result<(), Failure> {
    match &cli.command {
        Command::Index {
            command: IndexCommand::Build(args),
        } => build_index(cli, args),
        Command::Map(args) => map(cli, args),
        Command::Eval(args) => eval(cli, args),
        Command::Serve(args) => serve(cli, args),
    }
}

fn llm_config(cli: &Cli) -> Result<LlmConfig, Failure> {
    match &cli.llm_config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| data(path.display())(e.to_string()))?;
            LlmConfig::from_kv(&text).map_err(|e| data(path.display())(e.to_string()))
        }
        None => Ok(LlmConfig::default()),
    }
}

fn gateway(cli: &Cli, config: &LlmConfig) -> Result<Gateway, Failure> {
    if cli.mock_llm {
        return Ok(Gateway::mock());
    }
    Gateway::http(config).map_err(|e| Failure::Upstream(e.to_string()))
}

fn load_bundle(dir: &Path) -> Result<IndexBundle, Failure> {
    IndexBundle::load(dir).map_err(|e| Failure::Data(format!("cannot load index {}: {e}", dir.display())))
}

fn build_index(cli: &Cli, args: &BuildArgs) -> Result<(), Failure> {
    let mut params = Bm25Params::default();
    if let Some(spec) = &args.field_weights {
        params.field_weights = FieldWeights::parse_overrides(spec).map_err(|e| Failure::Usage(e.to_string()))?;
    }
    params.k1 = args.k1.unwrap_or(params.k1);
    params.b = args.b.unwrap_or(params.b);
    params.validate().map_err(|e| Failure::Usage(e.to_string()))?;

    let file = File::open(&args.corpus).map_err(|e| data(args.corpus.display())(e.to_string()))?;
    let options = LoadOptions {
        allowed_collections: args.collections.as_deref().and_then(parse_collections),
    };
    let loaded = load_corpus(BufReader::new(file), &options).map_err(|e| data(args.corpus.display())(e.to_string()))?;
    for r in &loaded.rejections {
        warn!(position = r.position, tiny_id = ?r.tiny_id, "record rejected: {}", r.reason);
    }
    if loaded.records.is_empty() {
        return Err(Failure::Data(format!("{}: no usable records", args.corpus.display())));
    }
    let snapshot = args
        .snapshot_date
        .clone()
        .unwrap_or_else(|| chrono::Utc::now().date_naive().to_string());
    let started = Instant::now();
    let mut bundle = IndexBundle::build(loaded.records, params, &snapshot).map_err(|e| Failure::Data(e.to_string()))?;
    info!(records = bundle.corpus.len(), elapsed_ms = started.elapsed().as_millis() as u64, "lexical index built");

    if !args.no_embeddings {
        let gateway = gateway(cli, &llm_config(cli)?)?;
        let inputs = bundle.embedding_inputs();
        let texts: Vec<String> = inputs.iter().map(|(_, t)| t.clone()).collect();
        let vectors = gateway.embed(&texts).map_err(|e| Failure::Upstream(format!("embedding the corpus: {e}")))?;
        let docs = inputs.into_iter().map(|(d, _)| d).zip(vectors).collect();
        let index = VectorIndex::build(gateway.embedding_model(), docs).map_err(|e| Failure::Data(e.to_string()))?;
        bundle = bundle.with_vectors(index).map_err(|e| Failure::Data(e.to_string()))?;
        info!(model = gateway.embedding_model(), "embedding index built");
    }
    bundle
        .save(&args.out)
        .map_err(|e| Failure::Data(format!("cannot write index to {}: {e}", args.out.display())))?;
    eprintln!(
        "indexed {} records ({} rejected) into {}",
        bundle.corpus.len(),
        loaded.rejections.len(),
        args.out.display()
    );
    Ok(())
}

fn map(cli: &Cli, args: &MapArgs) -> Result<(), Failure> {
    let bundle = load_bundle(&args.index)?;
    let mut config = args.preset.config();
    if let Some(c) = &args.collections {
        config.collections = parse_collections(c);
    }
    if let Some(k) = args.top_k {
        config.top_k = k;
    }
    config.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    let gateway = if config.needs_gateway() || args.map_values {
        Some(gateway(cli, &llm_config(cli)?)?)
    } else {
        None
    };

    let file = File::open(&args.input).map_err(|e| data(args.input.display())(e.to_string()))?;
    let dictionary = import_source_csv(BufReader::new(file)).map_err(|e| data(args.input.display())(e.to_string()))?;
    for r in &dictionary.rejected {
        warn!(line = r.line, "row rejected: {}", r.reason);
    }
    let mut state = ProjectState::new(ProjectMeta {
        project_id: "batch".into(),
        name: args.input.display().to_string(),
        created_at: String::new(),
        config: config.clone(),
        extra_columns: dictionary.extra_columns.clone(),
    });
    let elements: Vec<_> = dictionary.elements.iter().map(|e| e.element.clone()).collect();
    state.import(dictionary.elements).map_err(|e| Failure::Data(e.to_string()))?;

    let lists = recommend_all(&elements, &config, &bundle, gateway.as_ref(), &|done| {
        if done % 25 == 0 {
            info!(done, total = elements.len(), "mapping");
        }
    });
    let mut degraded = 0;
    for (element, list) in elements.iter().zip(lists) {
        let list = list?;
        if !list.degraded.is_empty() {
            degraded += 1;
            warn!(element = %element.element_id, "degraded: {}", list.degraded.join("; "));
        }
        let top = list.candidates.first().map(|c| c.tiny_id.clone());
        state.set_candidates(list).map_err(|e| Failure::Data(e.to_string()))?;
        let Some(top) = top else { continue };
        let mut value_mappings = Vec::new();
        if let (true, Some(g), Some(target)) = (args.map_values, gateway.as_ref(), bundle.corpus.get(&top)) {
            if let ValueMapping::Available { matches } = map_values(&element.value_set, target, g) {
                value_mappings = matches;
            }
        }
        let request = DecisionRequest {
            element_id: element.element_id.clone(),
            selected: Some(top),
            origin: DecisionOrigin::AutoTop1,
            value_mappings,
        };
        state.decide(&request, &bundle.corpus).map_err(|e| Failure::Data(e.to_string()))?;
    }
    fs::write(&args.out, state.export_csv()).map_err(|e| data(args.out.display())(e.to_string()))?;
    eprintln!("mapped {} elements with {} into {}", elements.len(), args.preset, args.out.display());
    if degraded > 0 {
        return Err(Failure::Upstream(format!(
            "{degraded} elements fell back to non-LLM behavior; output written but does not reflect the full preset"
        )));
    }
    Ok(())
}

fn eval_failure(e: EvalError) -> Failure {
    match e {
        EvalError::Pipeline(p) => p.into(),
        EvalError::Argument(m) => Failure::Usage(m),
        other => Failure::Data(other.to_string()),
    }
}

fn eval(cli: &Cli, args: &EvalArgs) -> Result<(), Failure> {
    let presets = Preset::parse_list(&args.presets).map_err(|e| Failure::Usage(e.to_string()))?;
    let bundle = load_bundle(&args.index)?;
    let manifest = fs::read_to_string(&args.datasets).map_err(|e| data(args.datasets.display())(e.to_string()))?;
    let datasets = load_datasets(&manifest).map_err(eval_failure)?;
    let file = File::open(&args.gold).map_err(|e| data(args.gold.display())(e.to_string()))?;
    let gold = load_gold(BufReader::new(file)).map_err(eval_failure)?;
    check_gold(&gold, &bundle.corpus).map_err(eval_failure)?;

    let needs_llm = presets.iter().any(|p| p.uses_embedding() || p.uses_rerank());
    let gateway = if needs_llm { Some(gateway(cli, &llm_config(cli)?)?) } else { None };
    let started = Instant::now();
    let run = run_benchmark(&datasets, &gold, &presets, &bundle, gateway.as_ref()).map_err(eval_failure)?;
    info!(elapsed_ms = started.elapsed().as_millis() as u64, rows = run.report.rows.len(), "benchmark finished");

    let text = format!("{}\n{}", run.report.to_table(), coverage_table(&run.report));
    fs::write(&args.report, &text).map_err(|e| data(args.report.display())(e.to_string()))?;
    if let Some(path) = &args.csv {
        fs::write(path, run.report.to_csv()).map_err(|e| data(path.display())(e.to_string()))?;
    }
    if let Some(path) = &args.audit {
        let file = File::create(path).map_err(|e| data(path.display())(e.to_string()))?;
        let mut w = BufWriter::new(file);
        evaluation::write_audit(&mut w, &run.audit)
            .and_then(|_| w.flush())
            .map_err(|e| data(path.display())(e.to_string()))?;
    }
    print!("{text}");
    if run.report.rows.iter().any(|r| r.degraded) {
        return Err(Failure::Upstream("some rows are degraded; see the report footnotes".into()));
    }
    Ok(())
}

fn coverage_table(report: &evaluation::EvaluationReport) -> String {
    let mut out = String::from("Coverage\n");
    let width = report.coverage.iter().map(|c| c.dataset.len()).max().unwrap_or(0).max(7);
    for c in &report.coverage {
        let total = c.total_elements.map_or_else(|| "-".to_string(), |t| t.to_string());
        let rate = c.coverage_rate.map_or_else(|| "not applicable".to_string(), |r| format!("{r}%"));
        out.push_str(&format!(
            "{:<width$}  {:>5} elements  {:>4} mapped  {rate}\n",
            c.dataset, total, c.mapped_elements
        ));
    }
    out
}

fn serve(cli: &Cli, args: &ServeArgs) -> Result<(), Failure> {
    let text = fs::read_to_string(&args.config).map_err(|e| data(args.config.display())(e.to_string()))?;
    let mut config = ServiceConfig::parse(&text).map_err(data(args.config.display()))?;
    if cli.llm_config.is_some() {
        config.llm = llm_config(cli)?;
    }
    let bundle = load_bundle(&config.index)?;
    let store = Store::open(&config.store).map_err(|e| data(config.store.display())(e.to_string()))?;
    let gateway = match gateway(cli, &config.llm) {
        Ok(g) => Some(g),
        Err(e) => {
            warn!("LLM gateway unavailable, serving lexical search only: {}", e.message());
            None
        }
    };
    let shared = Arc::new(Shared {
        bundle,
        store,
        gateway,
        jobs: Jobs::default(),
        default_config: config.default_preset.config(),
    });
    let app = server::router(shared, config.static_dir.as_deref(), &config.cors_allowlist);
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| Failure::Data(e.to_string()))?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind(config.listen)
            .await
            .map_err(|e| Failure::Data(format!("cannot listen on {}: {e}", config.listen)))?;
        eprintln!("listening on http://{}", config.listen);
        axum::serve(listener, app)
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await
            .map_err(|e| Failure::Data(e.to_string()))
    })
}
