//! The `gate` command line.
//!
//! Settings come from an optional TOML config file; flags override the
//! file, and the file overrides built-in defaults. Every command writes into
//! one output directory: `--out`, else `$GATE_OUT_ROOT/<command>`, else
//! `runs/<command>`.
//!
//! ```toml
//! seed = 3
//! data = "runs/gen-data"
//! kind = "gate"                 # gate | mtl
//! sources = ["s0", "s1", "s2", "s3"]
//! target = "t"
//!
//! [model]                       # network shapes and dropout
//! [train]                       # optimizer, epochs, loss weights, perturbation
//! [suite]                       # gen-data generator settings
//! [timing]                      # bench-time settings
//! ```

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::bench::{attach_recovery, evaluate, summarize, summary_text, timing_harness, MetricReport, TimingConfig};
use crate::data::{generate_synthetic_suite, load_prepared, write_suite, PreparedData, Subset, SuiteSpec};
use crate::error::{GateError, Result};
use crate::model::{AnyModel, ModelConfig, ModelKind};
use crate::persist::{self, CheckpointInfo, LineageEntry};
use crate::trainer::{RunRecord, TrainConfig, Trainer};

pub const OUT_ROOT_ENV: &str = "GATE_OUT_ROOT";

pub const CONFIG_COPY: &str = "config.toml";
pub const LOG_FILE: &str = "run.log";
pub const EPOCH_LOG: &str = "epochs.jsonl";
pub const RUN_RECORD: &str = "run.json";
pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const METRICS_CSV: &str = "metrics.csv";
pub const METRICS_JSON: &str = "metrics.json";
pub const SUMMARY: &str = "summary.txt";

#[derive(Debug, Parser)]
#[command(name = "gate", version, about = "Task addition for aligned multi-task regression")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic multi-task suite.
    GenData(Common),
    /// Pre-train a GATE or MTL model on source tasks.
    Pretrain(Common),
    /// Add a target task to a pre-trained checkpoint.
    AddTask(Common),
    /// Train a GATE or MTL model on all tasks from scratch.
    TrainVanilla(Common),
    /// Train a single-task baseline.
    TrainSingle(Common),
    /// Score a checkpoint on the test split.
    Evaluate(Common),
    /// Measure seconds per epoch across regimes and task counts.
    BenchTime(Common),
    /// Aggregate the metrics of several run directories.
    Report(ReportArgs),
}

#[derive(Debug, Clone, Default, Args)]
pub struct Common {
    /// TOML config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Dataset directory or CSV file.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Checkpoint directory to start from or to evaluate.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Vanilla checkpoint used as the recovery-rate reference.
    #[arg(long)]
    pub reference: Option<PathBuf>,
    /// Model family: gate or mtl.
    #[arg(long)]
    pub kind: Option<ModelKind>,
    /// Comma-separated source tasks.
    #[arg(long, value_delimiter = ',')]
    pub sources: Option<Vec<String>>,
    /// Comma-separated tasks for vanilla training.
    #[arg(long, value_delimiter = ',')]
    pub tasks: Option<Vec<String>>,
    /// Target task for add-task and train-single.
    #[arg(long)]
    pub target: Option<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Run label used in metric files.
    #[arg(long)]
    pub name: Option<String>,
    /// More log output; repeat for more.
    #[arg(short, long, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[arg(short, long)]
    pub quiet: bool,
}

#[derive(Debug, Clone, Args)]
pub struct ReportArgs {
    #[command(flatten)]
    pub common: Common,
    /// Run directories holding metrics.json.
    pub runs: Vec<PathBuf>,
}

/// Config file contents; every field is optional.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub data: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub reference: Option<PathBuf>,
    pub kind: Option<ModelKind>,
    pub sources: Vec<String>,
    pub tasks: Vec<String>,
    pub target: Option<String>,
    pub name: Option<String>,
    pub runs: Vec<PathBuf>,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub suite: Option<SuiteSpec>,
    pub timing: TimingConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| GateError::io(path, e))?;
        toml::from_str(&text).map_err(|e| GateError::Config(format!("{}: {e}", path.display())))
    }

    /// Applies flag values over the file values.
    pub fn apply(&mut self, c: &Common) {
        if let Some(s) = c.seed {
            self.seed = Some(s);
        }
        macro_rules! over {
            ($($f:ident),*) => {$(
                if let Some(v) = &c.$f {
                    self.$f = Some(v.clone());
                }
            )*};
        }
        over!(data, checkpoint, reference, kind, target, name);
        if let Some(v) = &c.sources {
            self.sources = v.clone();
        }
        if let Some(v) = &c.tasks {
            self.tasks = v.clone();
        }
        if let Some(e) = c.epochs {
            self.train.epochs = e;
        }
        if let Some(s) = self.seed {
            self.train.seed = s;
            self.timing.seed = s;
            if let Some(suite) = self.suite.as_mut() {
                suite.seed = s;
            }
        }
    }

    fn require<'a, T>(v: &'a Option<T>, what: &str) -> Result<&'a T> {
        v.as_ref().ok_or_else(|| GateError::Config(format!("missing `{what}` (config key or --{what})")))
    }
}

/// Parses `argv` and runs the command. Returns the process exit status.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(out) => {
            log::info!("wrote {}", out.display());
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn name_of(cmd: &Command) -> &'static str {
    match cmd {
        Command::GenData(_) => "gen-data",
        Command::Pretrain(_) => "pretrain",
        Command::AddTask(_) => "add-task",
        Command::TrainVanilla(_) => "train-vanilla",
        Command::TrainSingle(_) => "train-single",
        Command::Evaluate(_) => "evaluate",
        Command::BenchTime(_) => "bench-time",
        Command::Report(_) => "report",
    }
}

/// Runs a parsed command and returns its output directory.
pub fn execute(cli: &Cli) -> Result<PathBuf> {
    let cmd_name = name_of(&cli.command);
    let common = match &cli.command {
        Command::Report(r) => &r.common,
        Command::GenData(c)
        | Command::Pretrain(c)
        | Command::AddTask(c)
        | Command::TrainVanilla(c)
        | Command::TrainSingle(c)
        | Command::Evaluate(c)
        | Command::BenchTime(c) => c,
    };
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.apply(common);
    if let Command::Report(r) = &cli.command {
        if !r.runs.is_empty() {
            cfg.runs = r.runs.clone();
        }
    }
    cfg.model.validate()?;
    cfg.train.validate()?;

    let out = match &common.out {
        Some(p) => p.clone(),
        None => std::env::var_os(OUT_ROOT_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("runs"))
            .join(cmd_name),
    };
    fs::create_dir_all(&out).map_err(|e| GateError::io(&out, e))?;
    init_logging(&out, common.verbose, common.quiet)?;
    let text = toml::to_string_pretty(&cfg).map_err(|e| GateError::Config(e.to_string()))?;
    write_file(&out.join(CONFIG_COPY), &text)?;
    log::info!("gate {cmd_name} -> {}", out.display());

    match &cli.command {
        Command::GenData(_) => gen_data(&cfg, &out),
        Command::Pretrain(_) => pretrain(&cfg, &out),
        Command::AddTask(_) => add_task(&cfg, &out),
        Command::TrainVanilla(_) => train_vanilla(&cfg, &out),
        Command::TrainSingle(_) => train_single(&cfg, &out),
        Command::Evaluate(_) => evaluate_cmd(&cfg, &out),
        Command::BenchTime(_) => bench_time(&cfg, &out),
        Command::Report(_) => report(&cfg, &out),
    }?;
    Ok(out)
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| GateError::io(path, e))
}

/// Writes log lines to stderr and to the run directory.
#[derive(Clone)]
struct Tee(Arc<Mutex<fs::File>>);

impl Write for Tee {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        let _ = std::io::stderr().write_all(buf);
        self.0.lock().expect("log file lock").write_all(buf)?;
        Ok(buf.len())
    }

    fn flush(&mut self) -> std::io::Result<()> {
        self.0.lock().expect("log file lock").flush()
    }
}

fn init_logging(out: &Path, verbose: u8, quiet: bool) -> Result<()> {
    let path = out.join(LOG_FILE);
    let file = fs::File::create(&path).map_err(|e| GateError::io(&path, e))?;
    let level = match (quiet, verbose) {
        (true, _) => log::LevelFilter::Error,
        (false, 0) => log::LevelFilter::Info,
        (false, 1) => log::LevelFilter::Debug,
        _ => log::LevelFilter::Trace,
    };
    // a second command in the same process keeps the first logger
    let _ = env_logger::Builder::new()
        .filter_level(level)
        .parse_env("GATE_LOG")
        .target(env_logger::Target::Pipe(Box::new(Tee(Arc::new(Mutex::new(file))))))
        .try_init();
    Ok(())
}

fn load_data(cfg: &RunConfig) -> Result<PreparedData> {
    let path = RunConfig::require(&cfg.data, "data")?;
    let data = load_prepared(path, cfg.train.seed)?;
    log::info!(
        "data {}: {} samples, {} features, tasks {:?}, split seed {}",
        path.display(),
        data.dataset.n_samples(),
        data.dataset.n_features(),
        data.dataset.tasks(),
        data.metadata.split_seed
    );
    Ok(data)
}

fn gen_data(cfg: &RunConfig, out: &Path) -> Result<()> {
    let spec = match &cfg.suite {
        Some(s) => s.clone(),
        None => SuiteSpec::transfer(4, 2000, 16, 0.9, 200, cfg.seed.unwrap_or(0)),
    };
    let suite = generate_synthetic_suite(&spec)?;
    let meta = write_suite(&suite, out)?;
    for c in &meta.correlations {
        if let Some(r) = c.correlation {
            log::info!("corr({}, {}) = {r:.4} over {} samples", c.a, c.b, c.co_labeled);
        }
    }
    Ok(())
}

/// Trains with a fresh epoch log and saves the model and run record.
fn finish<M>(
    cfg: &RunConfig,
    out: &Path,
    data: &PreparedData,
    model: M,
    mut record: RunRecord,
    mut lineage: Vec<LineageEntry>,
) -> Result<()>
where
    AnyModel: From<M>,
{
    lineage.push(LineageEntry {
        stage: format!("{:?}", record.regime).to_lowercase(),
        seed: cfg.train.seed,
    });
    let info = CheckpointInfo {
        lineage,
        dataset_metadata_hash: Some(data.metadata.hash()),
    };
    let dir = out.join(CHECKPOINT_DIR);
    persist::save(&AnyModel::from(model), None, &info, &dir)?;
    record.checkpoint = Some(CHECKPOINT_DIR.to_string());
    if let Some((before, after)) = &record.frozen_fingerprint {
        log::info!("frozen parameters: {before} before, {after} after");
    }
    log::info!(
        "selected epoch {} (val rmse {:?}); {} alignment terms per step",
        record.selected_epoch,
        record.selected_val_rmse,
        record.terms_per_step.alignment
    );
    persist::write_json(&out.join(RUN_RECORD), &record)
}

fn trainer<'d>(cfg: &RunConfig, out: &Path, data: &'d PreparedData) -> Result<Trainer<'d>> {
    let log = out.join(EPOCH_LOG);
    if log.exists() {
        fs::remove_file(&log).map_err(|e| GateError::io(&log, e))?;
    }
    Ok(Trainer::new(&data.dataset, cfg.train.clone())?.with_epoch_log(log))
}

fn task_list(data: &PreparedData, explicit: &[String], fallback: &[String]) -> Vec<String> {
    if !explicit.is_empty() {
        explicit.to_vec()
    } else if !fallback.is_empty() {
        fallback.to_vec()
    } else {
        data.dataset.tasks()
    }
}

fn pretrain(cfg: &RunConfig, out: &Path) -> Result<()> {
    let data = load_data(cfg)?;
    let sources = task_list(&data, &cfg.sources, &data.metadata.sources);
    let tr = trainer(cfg, out, &data)?;
    match cfg.kind.unwrap_or(ModelKind::Gate) {
        ModelKind::Gate => {
            let o = tr.pretrain_gate(&cfg.model, &sources)?;
            finish(cfg, out, &data, o.model, o.record, Vec::new())
        }
        ModelKind::Mtl => {
            let o = tr.pretrain_mtl(&cfg.model, &sources)?;
            finish(cfg, out, &data, o.model, o.record, Vec::new())
        }
        ModelKind::Single => Err(GateError::Config("pretrain needs kind gate or mtl".into())),
    }
}

fn add_task(cfg: &RunConfig, out: &Path) -> Result<()> {
    let data = load_data(cfg)?;
    let ckpt = checkpoint_dir(RunConfig::require(&cfg.checkpoint, "checkpoint")?);
    let target = RunConfig::require(&cfg.target, "target")?;
    let loaded = persist::load(&ckpt)?;
    if let Some(k) = cfg.kind {
        if k != loaded.manifest.model_kind {
            return Err(GateError::KindMismatch {
                expected: k.to_string(),
                found: loaded.manifest.model_kind.to_string(),
            });
        }
    }
    let lineage = loaded.manifest.lineage.clone();
    let tr = trainer(cfg, out, &data)?;
    match loaded.model {
        AnyModel::Gate(m) => {
            let o = tr.add_and_train_gate(m, target)?;
            finish(cfg, out, &data, o.model, o.record, lineage)
        }
        AnyModel::Mtl(m) => {
            let o = tr.add_and_train_mtl(m, target)?;
            finish(cfg, out, &data, o.model, o.record, lineage)
        }
        AnyModel::Single(_) => Err(GateError::KindMismatch {
            expected: "gate or mtl".into(),
            found: "single".into(),
        }),
    }
}

fn train_vanilla(cfg: &RunConfig, out: &Path) -> Result<()> {
    let data = load_data(cfg)?;
    let tasks = task_list(&data, &cfg.tasks, &[]);
    let tr = trainer(cfg, out, &data)?;
    match cfg.kind.unwrap_or(ModelKind::Gate) {
        ModelKind::Gate => {
            let o = tr.train_vanilla_gate(&cfg.model, &tasks)?;
            finish(cfg, out, &data, o.model, o.record, Vec::new())
        }
        ModelKind::Mtl => {
            let o = tr.train_vanilla_mtl(&cfg.model, &tasks)?;
            finish(cfg, out, &data, o.model, o.record, Vec::new())
        }
        ModelKind::Single => Err(GateError::Config("train-vanilla needs kind gate or mtl; use train-single".into())),
    }
}

fn train_single(cfg: &RunConfig, out: &Path) -> Result<()> {
    let data = load_data(cfg)?;
    let task = RunConfig::require(&cfg.target, "target")?;
    let tr = trainer(cfg, out, &data)?;
    let o = tr.train_single(&cfg.model, task)?;
    finish(cfg, out, &data, o.model, o.record, Vec::new())
}

/// Resolves a run directory to its checkpoint directory.
fn checkpoint_dir(path: &Path) -> PathBuf {
    if path.join(persist::MANIFEST).exists() {
        path.to_path_buf()
    } else {
        path.join(CHECKPOINT_DIR)
    }
}

fn evaluate_cmd(cfg: &RunConfig, out: &Path) -> Result<()> {
    let data = load_data(cfg)?;
    let ckpt = checkpoint_dir(RunConfig::require(&cfg.checkpoint, "checkpoint")?);
    let loaded = persist::load(&ckpt)?;
    if let Some(h) = &loaded.manifest.dataset_metadata_hash {
        if *h != data.metadata.hash() {
            log::warn!("checkpoint was trained on a different dataset (metadata hash {h})");
        }
    }
    let run = cfg.name.clone().unwrap_or_else(|| {
        let dir = if ckpt.ends_with(CHECKPOINT_DIR) { ckpt.parent().unwrap_or(&ckpt) } else { &ckpt };
        dir.file_name().map_or("run".into(), |n| n.to_string_lossy().into_owned())
    });
    let mut report = evaluate(&loaded.model, &data.dataset, Subset::Test, &run)?;
    if let Some(r) = &cfg.reference {
        let reference = persist::load(&checkpoint_dir(r))?;
        let vanilla = evaluate(&reference.model, &data.dataset, Subset::Test, "reference")?;
        let n = attach_recovery(&mut report, &vanilla);
        log::info!("recovery rates for {n} task(s)");
    }
    write_report(&report, out)
}

fn write_report(report: &MetricReport, out: &Path) -> Result<()> {
    write_file(&out.join(METRICS_CSV), &report.to_csv()?)?;
    persist::write_json(&out.join(METRICS_JSON), report)?;
    let summary = summary_text(&summarize(std::slice::from_ref(report))?);
    log::info!("\n{summary}");
    write_file(&out.join(SUMMARY), &summary)
}

fn bench_time(cfg: &RunConfig, out: &Path) -> Result<()> {
    let report = timing_harness(&cfg.timing, &cfg.model, &cfg.train)?;
    write_file(&out.join("timing.csv"), &report.to_csv()?)?;
    persist::write_json(&out.join("timing.json"), &report)?;
    let summary = report.summary();
    log::info!("\n{summary}");
    write_file(&out.join(SUMMARY), &summary)
}

fn report(cfg: &RunConfig, out: &Path) -> Result<()> {
    if cfg.runs.is_empty() {
        return Err(GateError::Config("report needs at least one run directory".into()));
    }
    let mut reports = Vec::new();
    for dir in &cfg.runs {
        let path = if dir.is_dir() { dir.join(METRICS_JSON) } else { dir.clone() };
        let r: MetricReport = persist::read_json(&path)?;
        reports.push(r);
    }
    let mut csv = String::new();
    for (i, r) in reports.iter().enumerate() {
        let part = r.to_csv()?;
        // keep a single header row
        let body = if i == 0 { part.as_str() } else { part.split_once('\n').map_or("", |(_, b)| b) };
        csv.push_str(body);
    }
    write_file(&out.join("report.csv"), &csv)?;
    let summaries = summarize(&reports)?;
    persist::write_json(&out.join("report.json"), &summaries)?;
    let text = summary_text(&summaries);
    log::info!("\n{text}");
    write_file(&out.join(SUMMARY), &text)
}
