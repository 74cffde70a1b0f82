//! Command-line front end. Every subcommand writes its outputs plus a
//! `manifest.json` into the `--out` directory.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};
use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::embedstore::{self, load_dataset, EmbeddingDataset};
use crate::harness::{self, DemoPlan, ReportContext};
use crate::manifold::{self, ChartConfig};
use crate::nnet::Checkpoint;
use crate::samplers::{self, Bm25Index, Method, SelectionResult};
use crate::trainer::{self, LabeledEmbeddings, TrainConfig, TrainError};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

pub const CHECKPOINT_FILE: &str = "checkpoint.mbic";
pub const TRAIN_LOG_FILE: &str = "train.log";
pub const SELECTIONS_FILE: &str = "selections.jsonl";
pub const PROMPTS_FILE: &str = "prompts.jsonl";
pub const REPORT_FILE: &str = "report.json";
pub const SWEEP_FILE: &str = "sweep.json";
pub const CHARTS_FILE: &str = "charts.json";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Parser)]
#[command(name = "mbicl", version, about = "Prototype-based demonstration selection for hallucination detection")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the projection head and proxies.
    Train(TrainArgs),
    /// Select demonstrations with one of the sampling methods.
    Select(SelectArgs),
    /// Build prompts for the evaluation set.
    Prompts(PromptsArgs),
    /// Score completions against gold labels.
    Score(ScoreArgs),
    /// Merge per-temperature reports into one sweep file.
    Sweep(SweepArgs),
    /// Debug dumps.
    #[command(subcommand)]
    Inspect(InspectCommand),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// TOML training configuration; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset stem: reads `<stem>.mbic` and `<stem>.meta.jsonl`.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Override the configured number of epochs.
    #[arg(long)]
    pub epochs: Option<u32>,
    /// Override the configured seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct SelectArgs {
    #[arg(long)]
    pub method: Method,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub shots: usize,
    #[arg(long)]
    pub out: PathBuf,
    /// Trained checkpoint; required for `mbicl`.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// File with one query id per line; required for `knn` and `bm25`.
    /// Queries are removed from the demonstration pool.
    #[arg(long)]
    pub queries: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PromptsArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Selections file from `select`; zero-shot when omitted.
    #[arg(long)]
    pub selections: Option<PathBuf>,
    /// Evaluation ids, one per line. Defaults to the query ids of per-query
    /// selections, otherwise every record not used as a demonstration.
    #[arg(long)]
    pub eval: Option<PathBuf>,
    #[arg(long, default_value_t = 0.0)]
    pub temperature: f64,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub prompts: PathBuf,
    #[arg(long)]
    pub completions: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// Report files, one per temperature.
    #[arg(long, num_args = 1.., required = true)]
    pub reports: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum InspectCommand {
    /// Build charts on one batch of projected embeddings and dump them.
    Charts(ChartsArgs),
}

#[derive(Debug, Args)]
pub struct ChartsArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Batch = the first `batch-size` records.
    #[arg(long, default_value_t = 128)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Failure carrying its exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub error: anyhow::Error,
}

impl CliError {
    fn usage(msg: impl Into<String>) -> Self {
        CliError { code: EXIT_USAGE, error: anyhow!(msg.into()) }
    }
}

impl<E: Into<anyhow::Error>> From<E> for CliError {
    fn from(e: E) -> Self {
        let error = e.into();
        let numeric = error.chain().any(|c| {
            matches!(
                c.downcast_ref::<TrainError>(),
                Some(TrainError::NonFinite { .. } | TrainError::Loss(_) | TrainError::Manifold(_))
            )
        });
        CliError { code: if numeric { EXIT_NUMERIC } else { EXIT_DATA }, error }
    }
}

type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub tool_version: String,
    pub command: String,
    pub config: serde_json::Value,
    /// Input path → SHA-256 of its contents.
    pub inputs: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub started_at: u64,
    pub finished_at: u64,
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

pub fn sha256_file(path: &Path) -> anyhow::Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

struct ManifestBuilder {
    command: &'static str,
    config: serde_json::Value,
    inputs: BTreeMap<String, String>,
    seed: Option<u64>,
    started_at: u64,
}

impl ManifestBuilder {
    fn new(command: &'static str) -> Self {
        ManifestBuilder {
            command,
            config: serde_json::Value::Null,
            inputs: BTreeMap::new(),
            seed: None,
            started_at: unix_now(),
        }
    }

    fn input(&mut self, path: &Path) -> anyhow::Result<()> {
        self.inputs.insert(path.display().to_string(), sha256_file(path)?);
        Ok(())
    }

    fn finish(self, out_dir: &Path) -> anyhow::Result<()> {
        let manifest = RunManifest {
            schema_version: 1,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            command: self.command.to_string(),
            config: self.config,
            inputs: self.inputs,
            seed: self.seed,
            started_at: self.started_at,
            finished_at: unix_now(),
        };
        let mut bytes = serde_json::to_vec_pretty(&manifest)?;
        bytes.push(b'\n');
        embedstore::write_atomic(&out_dir.join(MANIFEST_FILE), &bytes)?;
        Ok(())
    }
}

/// `<stem>.mbic` and `<stem>.meta.jsonl`; a trailing `.mbic` on the stem is
/// ignored.
pub fn data_paths(stem: &Path) -> (PathBuf, PathBuf) {
    let base = if stem.extension().is_some_and(|e| e == "mbic") { stem.with_extension("") } else { stem.to_path_buf() };
    let s = base.as_os_str().to_string_lossy();
    (PathBuf::from(format!("{s}.mbic")), PathBuf::from(format!("{s}.meta.jsonl")))
}

fn load_data(stem: &Path, manifest: &mut ManifestBuilder) -> CliResult<EmbeddingDataset> {
    let (emb, meta) = data_paths(stem);
    manifest.input(&emb)?;
    manifest.input(&meta)?;
    Ok(load_dataset(&emb, &meta).with_context(|| format!("loading dataset {}", stem.display()))?)
}

/// Parse an id list: one id per line, blank lines and `#` comments ignored.
pub fn read_ids(path: &Path) -> anyhow::Result<Vec<usize>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .enumerate()
        .map(|(i, l)| (i, l.split('#').next().unwrap_or("").trim()))
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, l)| l.parse().with_context(|| format!("{} line {}: bad id {l:?}", path.display(), i + 1)))
        .collect()
}

fn create_out(dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn run_train(args: &TrainArgs) -> CliResult<()> {
    let mut manifest = ManifestBuilder::new("train");
    let mut config = match &args.config {
        Some(path) => {
            manifest.input(path)?;
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            TrainConfig::from_toml(&text)?
        }
        None => TrainConfig::default(),
    };
    if let Some(e) = args.epochs {
        config.epochs = e;
    }
    if let Some(s) = args.seed {
        config.seed = s;
    }
    config.validate().map_err(|e| CliError::usage(e.to_string()))?;
    let data = load_data(&args.data, &mut manifest)?;
    create_out(&args.out)?;
    let outcome = trainer::train(&LabeledEmbeddings::from_dataset(&data), &config)?;
    outcome.checkpoint(&config).save(&args.out.join(CHECKPOINT_FILE))?;
    embedstore::write_atomic(&args.out.join(TRAIN_LOG_FILE), trainer::format_log(&outcome.history).as_bytes())?;
    manifest.config = serde_json::to_value(&config)?;
    manifest.seed = Some(config.seed);
    manifest.finish(&args.out)?;
    Ok(())
}

fn pool_and_queries(data: &EmbeddingDataset, queries: Option<&Path>) -> anyhow::Result<(Vec<usize>, Vec<usize>)> {
    let queries = match queries {
        Some(p) => read_ids(p)?,
        None => Vec::new(),
    };
    let split = embedstore::split_holdout(data, &queries)?;
    Ok((split.eval_set, split.demo_pool))
}

pub fn select(
    data: &EmbeddingDataset,
    method: Method,
    shots: usize,
    checkpoint: Option<&Checkpoint>,
    pool: &[usize],
    queries: &[usize],
) -> anyhow::Result<Vec<SelectionResult>> {
    let classes = data.task().num_classes();
    let class_of = |id: usize| data.get(id).ok().and_then(|r| data.task().class_of(&r.label));
    let mut out = match method {
        Method::Mbicl => {
            let ck = checkpoint.ok_or_else(|| anyhow!("mbicl needs a checkpoint"))?;
            if ck.header.input_dim != data.dim() {
                bail!("checkpoint expects dimension {}, dataset has {}", ck.header.input_dim, data.dim());
            }
            let (projected, _) = ck.head.forward(&data.matrix_of(pool)?)?;
            vec![samplers::mbicl_select(pool, &projected, &ck.theta_m, shots)?]
        }
        Method::Cluster => {
            let labels: Vec<usize> = pool.iter().map(|&id| class_of(id).expect("validated label")).collect();
            vec![samplers::cluster_select(pool, &data.matrix_of(pool)?, &labels, classes, shots)?]
        }
        Method::Perplexity => {
            let scores: Vec<Option<f64>> = pool.iter().map(|&id| data.records()[id].perplexity_score).collect();
            vec![samplers::perplexity_select(pool, &scores, shots)?]
        }
        Method::Knn => {
            let pool_z = data.matrix_of(pool)?;
            queries
                .iter()
                .map(|&q| {
                    let v = DVector::from_iterator(data.dim(), data.records()[q].vector.iter().map(|&x| f64::from(x)));
                    samplers::knn_select(Some(q), &v, pool, &pool_z, shots)
                })
                .collect::<Result<_, _>>()?
        }
        Method::Bm25 => {
            let texts: Vec<&str> = pool.iter().map(|&id| data.records()[id].consolidated_text.as_str()).collect();
            let index = Bm25Index::new(&texts);
            queries
                .iter()
                .map(|&q| samplers::bm25_select(Some(q), &data.records()[q].consolidated_text, pool, &index, shots))
                .collect::<Result<_, _>>()?
        }
    };
    for s in &mut out {
        s.annotate_classes(class_of);
    }
    Ok(out)
}

fn run_select(args: &SelectArgs) -> CliResult<()> {
    if args.shots == 0 {
        return Err(CliError::usage("--shots must be at least 1"));
    }
    if args.method.is_query_dependent() && args.queries.is_none() {
        return Err(CliError::usage(format!("--method {} needs --queries", args.method)));
    }
    if args.method == Method::Mbicl && args.checkpoint.is_none() {
        return Err(CliError::usage("--method mbicl needs --checkpoint"));
    }
    let mut manifest = ManifestBuilder::new("select");
    let data = load_data(&args.data, &mut manifest)?;
    let checkpoint = match &args.checkpoint {
        Some(p) => {
            manifest.input(p)?;
            Some(Checkpoint::load(p)?)
        }
        None => None,
    };
    if let Some(q) = &args.queries {
        manifest.input(q)?;
    }
    let (pool, queries) = pool_and_queries(&data, args.queries.as_deref())?;
    let selections = select(&data, args.method, args.shots, checkpoint.as_ref(), &pool, &queries)?;
    create_out(&args.out)?;
    harness::write_jsonl(&args.out.join(SELECTIONS_FILE), &selections)?;
    manifest.config = serde_json::json!({ "method": args.method, "shots": args.shots });
    manifest.finish(&args.out)?;
    Ok(())
}

fn run_prompts(args: &PromptsArgs) -> CliResult<()> {
    if !(0.0..=2.0).contains(&args.temperature) {
        return Err(CliError::usage("--temperature must lie in [0, 2]"));
    }
    let mut manifest = ManifestBuilder::new("prompts");
    let data = load_data(&args.data, &mut manifest)?;
    let plan = match &args.selections {
        Some(p) => {
            manifest.input(p)?;
            DemoPlan::from_selections(harness::read_jsonl(p)?)
        }
        None => DemoPlan::ZeroShot,
    };
    let eval_ids = match (&args.eval, &plan) {
        (Some(p), _) => {
            manifest.input(p)?;
            read_ids(p)?
        }
        (None, DemoPlan::PerQuery(m)) => m.keys().copied().collect(),
        (None, DemoPlan::Shared(s)) => embedstore::split_holdout(&data, &s.demo_ids)?.eval_set,
        (None, DemoPlan::ZeroShot) => (0..data.len()).collect(),
    };
    create_out(&args.out)?;
    harness::emit_prompts(&data, &plan, &eval_ids, args.temperature, &args.out.join(PROMPTS_FILE))?;
    manifest.config = serde_json::json!({ "temperature": args.temperature, "method": plan.method() });
    manifest.finish(&args.out)?;
    Ok(())
}

fn run_score(args: &ScoreArgs) -> CliResult<()> {
    let mut manifest = ManifestBuilder::new("score");
    let data = load_data(&args.data, &mut manifest)?;
    manifest.input(&args.prompts)?;
    manifest.input(&args.completions)?;
    let prompts = harness::read_prompts(&args.prompts)?;
    let completions = harness::read_completions(&args.completions)?;
    let mut gold = BTreeMap::new();
    for p in &prompts {
        gold.insert(p.query_id, data.get(p.query_id)?.label.clone());
    }
    let report = harness::score(&completions, &gold, &ReportContext::from_prompts(data.task(), &prompts))?;
    create_out(&args.out)?;
    write_json(&args.out.join(REPORT_FILE), &report)?;
    manifest.finish(&args.out)?;
    Ok(())
}

fn run_sweep(args: &SweepArgs) -> CliResult<()> {
    let mut manifest = ManifestBuilder::new("sweep");
    let mut reports = Vec::with_capacity(args.reports.len());
    for p in &args.reports {
        manifest.input(p)?;
        let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
        reports.push(serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?);
    }
    let sweep = harness::merge_sweep(&reports)?;
    if sweep.points.len() != harness::sweep_temperatures().len() {
        log::warn!("sweep has {} temperatures, expected 11", sweep.points.len());
    }
    create_out(&args.out)?;
    write_json(&args.out.join(SWEEP_FILE), &sweep)?;
    manifest.finish(&args.out)?;
    Ok(())
}

fn run_inspect_charts(args: &ChartsArgs) -> CliResult<()> {
    let mut manifest = ManifestBuilder::new("inspect charts");
    let data = load_data(&args.data, &mut manifest)?;
    manifest.input(&args.checkpoint)?;
    let ck = Checkpoint::load(&args.checkpoint)?;
    let n = args.batch_size.min(data.len());
    let ids: Vec<usize> = (0..n).collect();
    let (projected, _) = ck.head.forward(&data.matrix_of(&ids)?)?;
    let cfg = ChartConfig { seed: args.seed, ..serde_json::from_value(ck.header.config["chart"].clone())? };
    let charts = manifold::build_charts(&projected, &cfg)?;
    let points = manifold::rows_of(&projected);
    let dumps: Vec<_> = charts.iter().map(|c| c.dump(&points)).collect();
    create_out(&args.out)?;
    write_json(&args.out.join(CHARTS_FILE), &dumps)?;
    manifest.seed = Some(args.seed);
    manifest.finish(&args.out)?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    embedstore::write_atomic(path, &bytes)?;
    Ok(())
}

pub fn run(cli: &Cli) -> CliResult<()> {
    match &cli.command {
        Command::Train(a) => run_train(a),
        Command::Select(a) => run_select(a),
        Command::Prompts(a) => run_prompts(a),
        Command::Score(a) => run_score(a),
        Command::Sweep(a) => run_sweep(a),
        Command::Inspect(InspectCommand::Charts(a)) => run_inspect_charts(a),
    }
}

/// Configure the rayon pool from `MBICL_THREADS`.
pub fn init_threads() -> Result<(), CliError> {
    let Ok(raw) = std::env::var("MBICL_THREADS") else {
        return Ok(());
    };
    let n: usize = raw.trim().parse().map_err(|_| CliError::usage(format!("MBICL_THREADS={raw:?} is not a number")))?;
    if n == 0 {
        return Err(CliError::usage("MBICL_THREADS must be at least 1"));
    }
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| CliError::usage(e.to_string()))
}

/// Parse arguments, run, and return the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match init_threads().and_then(|()| run(&cli)) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {:#}", e.error);
            e.code
        }
    }
}
