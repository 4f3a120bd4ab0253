//! Evaluation metrics, correlation analyses and report files.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::{generate_synthetic_suite, Subset, SuiteSpec, TaskDataset, MIN_CO_LABELED};
use crate::error::{GateError, Result};
use crate::model::{AnyModel, ModelConfig, ModelKind};
use crate::trainer::{predict_rows, CheckpointPolicy, Regime, RunRecord, TermCounts, TrainConfig, Trainer};

/// Root mean squared error.
pub fn rmse(y: &[f64], y_hat: &[f64]) -> Result<f64> {
    if y.is_empty() {
        return Err(GateError::Empty("rmse", 1));
    }
    if y.len() != y_hat.len() {
        return Err(GateError::shape("rmse", y.len(), y_hat.len()));
    }
    let s: f64 = y.iter().zip(y_hat).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok((s / y.len() as f64).sqrt())
}

/// Sample Pearson correlation. Constant inputs are an error rather than 0.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(GateError::shape("pearson", x.len(), y.len()));
    }
    if x.len() < 2 {
        return Err(GateError::Empty("pearson", 2));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(GateError::Undefined("pearson correlation of a constant input".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Task-added correlation divided by the vanilla reference correlation.
pub fn recovery_rate(added_corr: f64, vanilla_corr: f64) -> Result<f64> {
    if vanilla_corr == 0.0 || !vanilla_corr.is_finite() || !added_corr.is_finite() {
        return Err(GateError::Undefined(format!("recovery rate against vanilla correlation {vanilla_corr}")));
    }
    Ok(added_corr / vanilla_corr)
}

/// Largest `|pearson|` between `target` and any source sharing at least
/// [`MIN_CO_LABELED`] labeled samples with it.
pub fn source_correlation_analysis(ds: &TaskDataset, sources: &[String], target: &str) -> Result<f64> {
    let mut best: Option<f64> = None;
    for s in sources {
        let pc = ds.pair_correlation(s, target)?;
        if pc.co_labeled < MIN_CO_LABELED {
            continue;
        }
        if let Some(c) = pc.correlation {
            best = Some(best.map_or(c.abs(), |b: f64| b.max(c.abs())));
        }
    }
    best.ok_or_else(|| GateError::Undefined(format!("no source shares {MIN_CO_LABELED} labeled samples with `{target}`")))
}

/// Mean and sample standard deviation (`n − 1`; 0 for a single value).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

pub fn aggregate(values: &[f64]) -> Result<Aggregate> {
    if values.is_empty() {
        return Err(GateError::Empty("aggregate", 1));
    }
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let std = if n > 1 {
        (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    Ok(Aggregate { mean, std, n })
}

pub fn median(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(GateError::Empty("median", 1));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Ok(if v.len() % 2 == 1 { v[m] } else { 0.5 * (v[m - 1] + v[m]) })
}

/// Metrics of one task on one evaluation subset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskMetrics {
    pub task: String,
    pub n: usize,
    /// RMSE on standardized labels.
    pub rmse_std: f64,
    /// RMSE in raw label units.
    pub rmse_raw: f64,
    /// `None` when predictions or labels are constant.
    pub pearson: Option<f64>,
}

pub fn task_metrics(ds: &TaskDataset, task: &str, y: &[f64], y_hat: &[f64]) -> Result<TaskMetrics> {
    let raw = |v: &[f64]| v.iter().map(|&x| ds.unstandardize(task, x)).collect::<Vec<_>>();
    Ok(TaskMetrics {
        task: task.to_string(),
        n: y.len(),
        rmse_std: rmse(y, y_hat)?,
        rmse_raw: rmse(&raw(y), &raw(y_hat))?,
        pearson: pearson(y, y_hat).ok(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub run: String,
    pub model_kind: String,
    /// Split provenance: subset name and split seed.
    pub subset: String,
    pub split_seed: u64,
    pub tasks: Vec<TaskMetrics>,
    pub rmse: Option<Aggregate>,
    pub pearson: Option<Aggregate>,
    pub recovery_rate: BTreeMap<String, f64>,
    pub max_source_correlation: BTreeMap<String, f64>,
}

impl MetricReport {
    pub fn finish_aggregates(&mut self) {
        let rm: Vec<f64> = self.tasks.iter().map(|t| t.rmse_std).collect();
        let pc: Vec<f64> = self.tasks.iter().filter_map(|t| t.pearson).collect();
        self.rmse = aggregate(&rm).ok();
        self.pearson = aggregate(&pc).ok();
    }

    /// One row per task.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "run",
            "model_kind",
            "subset",
            "task",
            "n",
            "rmse_std",
            "rmse_raw",
            "pearson",
            "recovery_rate",
            "max_source_correlation",
        ])?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for t in &self.tasks {
            w.write_record([
                self.run.clone(),
                self.model_kind.clone(),
                self.subset.clone(),
                t.task.clone(),
                t.n.to_string(),
                t.rmse_std.to_string(),
                t.rmse_raw.to_string(),
                opt(t.pearson),
                opt(self.recovery_rate.get(&t.task).copied()),
                opt(self.max_source_correlation.get(&t.task).copied()),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| GateError::Data(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

/// Evaluates every task of `model` that has labeled rows in `subset`.
/// Targets also get the largest absolute label correlation with any of the
/// model's source tasks, when defined.
pub fn evaluate(model: &AnyModel, data: &TaskDataset, subset: Subset, run: &str) -> Result<MetricReport> {
    let m = model.as_model();
    let (sources, targets) = match model {
        AnyModel::Gate(g) => (g.source_tasks().to_vec(), g.target_tasks().to_vec()),
        AnyModel::Mtl(g) => (g.source_tasks().to_vec(), g.target_tasks().to_vec()),
        AnyModel::Single(s) => (vec![s.task_id().to_string()], Vec::new()),
    };
    let mut report = MetricReport {
        run: run.to_string(),
        model_kind: m.kind().to_string(),
        subset: subset_name(subset),
        split_seed: data.split_seed().unwrap_or_default(),
        tasks: Vec::new(),
        rmse: None,
        pearson: None,
        recovery_rate: BTreeMap::new(),
        max_source_correlation: BTreeMap::new(),
    };
    for task in m.tasks() {
        if !data.has_task(&task) {
            log::warn!("task `{task}` is not in the dataset; skipped");
            continue;
        }
        let rows = data.rows(&task, subset)?;
        if rows.is_empty() {
            continue;
        }
        let (y, y_hat) = predict_rows(m, data, &task, &rows)?;
        report.tasks.push(task_metrics(data, &task, &y, &y_hat)?);
        if targets.contains(&task) {
            match source_correlation_analysis(data, &sources, &task) {
                Ok(c) => {
                    report.max_source_correlation.insert(task.clone(), c);
                }
                Err(e) => log::info!("{e}"),
            }
        }
    }
    if report.tasks.is_empty() {
        return Err(GateError::Data(format!("no labeled rows to evaluate in subset {}", report.subset)));
    }
    report.finish_aggregates();
    Ok(report)
}

pub fn subset_name(subset: Subset) -> String {
    match subset {
        Subset::Test => "test".into(),
        Subset::Validation { fold } => format!("validation{fold}"),
        Subset::Train { validation_fold } => format!("train{validation_fold}"),
        Subset::AllFolds => "all_folds".into(),
    }
}

/// Fills `report.recovery_rate` for tasks whose Pearson correlation is
/// defined in both reports. Returns the number of rates set.
pub fn attach_recovery(report: &mut MetricReport, vanilla: &MetricReport) -> usize {
    let reference: BTreeMap<&str, f64> = vanilla
        .tasks
        .iter()
        .filter_map(|t| t.pearson.map(|p| (t.task.as_str(), p)))
        .collect();
    let mut n = 0;
    for t in &report.tasks {
        let (Some(p), Some(&r)) = (t.pearson, reference.get(t.task.as_str())) else {
            continue;
        };
        match recovery_rate(p, r) {
            Ok(v) => {
                report.recovery_rate.insert(t.task.clone(), v);
                n += 1;
            }
            Err(e) => log::warn!("task `{}`: {e}", t.task),
        }
    }
    n
}

/// Per-run mean/std over tasks, and across repeated reports (folds or
/// seeds) sharing a run name, over those per-report means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run: String,
    pub model_kind: String,
    pub reports: usize,
    pub rmse: Aggregate,
    pub pearson: Option<Aggregate>,
    pub recovery: Option<Aggregate>,
}

pub fn summarize(reports: &[MetricReport]) -> Result<Vec<RunSummary>> {
    let mut groups: BTreeMap<&str, Vec<&MetricReport>> = BTreeMap::new();
    for r in reports {
        groups.entry(r.run.as_str()).or_default().push(r);
    }
    let mut out = Vec::new();
    for (run, rs) in groups {
        let pick = |f: &dyn Fn(&MetricReport) -> Option<Aggregate>| -> Result<Option<Aggregate>> {
            let vals: Vec<Aggregate> = rs.iter().filter_map(|r| f(r)).collect();
            match vals.len() {
                0 => Ok(None),
                1 => Ok(Some(vals[0])),
                _ => aggregate(&vals.iter().map(|a| a.mean).collect::<Vec<_>>()).map(Some),
            }
        };
        let rmse = pick(&|r| r.rmse)?.ok_or_else(|| GateError::Data(format!("run `{run}` has no RMSE values")))?;
        let pearson = pick(&|r| r.pearson)?;
        let recovery = pick(&|r| aggregate(&r.recovery_rate.values().copied().collect::<Vec<_>>()).ok())?;
        out.push(RunSummary {
            run: run.to_string(),
            model_kind: rs[0].model_kind.clone(),
            reports: rs.len(),
            rmse,
            pearson,
            recovery,
        });
    }
    Ok(out)
}

pub fn summary_text(summaries: &[RunSummary]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{:<24} {:<7} {:>3}  {:>16}  {:>16}  {:>16}", "run", "kind", "n", "rmse mean±std", "pearson mean±std", "recovery");
    let fmt = |a: Option<Aggregate>| a.map_or("-".to_string(), |a| format!("{:.3} ± {:.3}", a.mean, a.std));
    for r in summaries {
        let _ = writeln!(
            s,
            "{:<24} {:<7} {:>3}  {:>16}  {:>16}  {:>16}",
            r.run,
            r.model_kind,
            r.reports,
            fmt(Some(r.rmse)),
            fmt(r.pearson),
            fmt(r.recovery)
        );
    }
    s
}

/// Inputs of the epoch-timing table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TimingConfig {
    pub n_samples: usize,
    pub n_features: usize,
    /// Task counts for the vanilla rows.
    pub vanilla_tasks: Vec<usize>,
    /// Source count of the task-addition rows.
    pub addition_sources: usize,
    pub warmup_epochs: usize,
    pub measured_epochs: usize,
    pub include_mtl: bool,
    pub seed: u64,
}

impl Default for TimingConfig {
    fn default() -> Self {
        TimingConfig {
            n_samples: 1000,
            n_features: 16,
            vanilla_tasks: vec![4, 8],
            addition_sources: 4,
            warmup_epochs: 1,
            measured_epochs: 3,
            include_mtl: true,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingCell {
    pub label: String,
    pub model_kind: ModelKind,
    pub regime: Regime,
    pub tasks: usize,
    pub terms_per_step: TermCounts,
    pub steps_per_epoch: usize,
    pub epoch_seconds: Vec<f64>,
    pub median_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub config: TimingConfig,
    pub cells: Vec<TimingCell>,
}

impl TimingReport {
    pub fn cell(&self, label: &str) -> Option<&TimingCell> {
        self.cells.iter().find(|c| c.label == label)
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["label", "model_kind", "regime", "tasks", "regression_terms", "alignment_terms", "steps_per_epoch", "median_seconds", "epoch_seconds"])?;
        for c in &self.cells {
            let secs: Vec<String> = c.epoch_seconds.iter().map(|s| format!("{s:.6}")).collect();
            w.write_record([
                c.label.clone(),
                c.model_kind.to_string(),
                format!("{:?}", c.regime).to_lowercase(),
                c.tasks.to_string(),
                c.terms_per_step.regression.to_string(),
                c.terms_per_step.alignment.to_string(),
                c.steps_per_epoch.to_string(),
                format!("{:.6}", c.median_seconds),
                secs.join(";"),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| GateError::Data(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<20} {:>6} {:>10} {:>12}", "cell", "tasks", "alignment", "s/epoch");
        for c in &self.cells {
            let _ = writeln!(s, "{:<20} {:>6} {:>10} {:>12.4}", c.label, c.tasks, c.terms_per_step.alignment, c.median_seconds);
        }
        s
    }
}

fn timed_cell(label: String, tasks: usize, record: RunRecord, warmup: usize) -> Result<TimingCell> {
    let measured: Vec<f64> = record.epochs.iter().skip(warmup).map(|e| e.seconds).collect();
    Ok(TimingCell {
        label,
        model_kind: record.model_kind,
        regime: record.regime,
        tasks,
        terms_per_step: record.terms_per_step,
        steps_per_epoch: record.epochs.first().map_or(0, |e| e.steps),
        median_seconds: median(&measured)?,
        epoch_seconds: measured,
    })
}

/// Seconds per epoch for vanilla GATE (and MTL) over task counts, task
/// addition on a pre-trained model, and SINGLE, all on one fixed synthetic
/// pool. Pre-training for the addition rows is not timed.
pub fn timing_harness(cfg: &TimingConfig, model: &ModelConfig, train: &TrainConfig) -> Result<TimingReport> {
    if cfg.measured_epochs < 3 {
        return Err(GateError::Config("timing needs at least 3 measured epochs".into()));
    }
    let max_tasks = cfg.vanilla_tasks.iter().copied().max().unwrap_or(0).max(cfg.addition_sources);
    if max_tasks < 2 || cfg.vanilla_tasks.iter().any(|&n| n < 2) {
        return Err(GateError::Config("timing task counts must be >= 2".into()));
    }
    let spec = SuiteSpec::transfer(max_tasks, cfg.n_samples, cfg.n_features, 0.9, cfg.n_samples, cfg.seed);
    let mut data = generate_synthetic_suite(&spec)?.dataset;
    data.standardize()?;
    let timed = TrainConfig {
        epochs: cfg.warmup_epochs + cfg.measured_epochs,
        checkpoint_policy: CheckpointPolicy::Last,
        ..train.clone()
    };
    let trainer = Trainer::new(&data, timed)?;
    let names = |n: usize| (0..n).map(|i| format!("s{i}")).collect::<Vec<_>>();
    let w = cfg.warmup_epochs;
    let mut cells = Vec::new();
    for &n in &cfg.vanilla_tasks {
        let r = trainer.train_vanilla_gate(model, &names(n))?.record;
        cells.push(timed_cell(format!("vanilla_gate_{n}"), n, r, w)?);
        if cfg.include_mtl {
            let r = trainer.train_vanilla_mtl(model, &names(n))?.record;
            cells.push(timed_cell(format!("vanilla_mtl_{n}"), n, r, w)?);
        }
    }
    let sources = names(cfg.addition_sources);
    let pre_cfg = TrainConfig {
        epochs: 1,
        checkpoint_policy: CheckpointPolicy::Last,
        ..train.clone()
    };
    let pre = Trainer::new(&data, pre_cfg)?;
    let gate = pre.pretrain_gate(model, &sources)?.model;
    let r = trainer.add_and_train_gate(gate, "t")?.record;
    cells.push(timed_cell("added_gate".into(), 1, r, w)?);
    if cfg.include_mtl {
        let mtl = pre.pretrain_mtl(model, &sources)?.model;
        let r = trainer.add_and_train_mtl(mtl, "t")?.record;
        cells.push(timed_cell("added_mtl".into(), 1, r, w)?);
    }
    let r = trainer.train_single(model, "t")?.record;
    cells.push(timed_cell("single".into(), 1, r, w)?);
    Ok(TimingReport {
        config: cfg.clone(),
        cells,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rmse_examples() {
        assert_eq!(rmse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(rmse(&[0.0, 0.0], &[1.0, 1.0]).unwrap(), 1.0);
        assert_eq!(rmse(&[0.0, 2.0], &[0.0, 0.0]).unwrap(), 2f64.sqrt());
        assert!(rmse(&[], &[]).is_err());
    }

    #[test]
    fn pearson_examples() {
        let y = [0.3, -1.0, 2.0, 0.7];
        let up: Vec<f64> = y.iter().map(|v| 2.0 * v + 3.0).collect();
        let down: Vec<f64> = y.iter().map(|v| -v).collect();
        assert!((pearson(&y, &up).unwrap() - 1.0).abs() < 1e-15);
        assert!((pearson(&y, &down).unwrap() + 1.0).abs() < 1e-15);
        assert!((pearson(&[1.0, 2.0, 3.0], &[1.0, 3.0, 2.0]).unwrap() - 0.5).abs() < 1e-15);
        assert!(matches!(pearson(&[1.0, 1.0], &[1.0, 2.0]), Err(GateError::Undefined(_))));
        assert!(pearson(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn recovery_examples() {
        assert_eq!(recovery_rate(0.5, 0.5).unwrap(), 1.0);
        assert!((recovery_rate(0.988, 1.0).unwrap() - 0.988).abs() < 1e-15);
        assert!(recovery_rate(0.52, 0.5).unwrap() > 1.0);
        assert!(recovery_rate(0.5, 0.0).is_err());
    }

    #[test]
    fn aggregate_uses_sample_std() {
        let a = aggregate(&[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(a.mean, 2.0);
        assert_eq!(a.std, 1.0);
        assert_eq!(aggregate(&[4.0]).unwrap().std, 0.0);
        assert_eq!(median(&[3.0, 1.0, 2.0]).unwrap(), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]).unwrap(), 2.5);
    }

    #[test]
    fn source_threshold_excludes_small_overlaps() {
        let n = 1000;
        let t: Vec<Option<f64>> = (0..n).map(|i| Some(((i * 37) % 101) as f64)).collect();
        // source a: perfect copy but only 9 co-labeled samples
        let a: Vec<Option<f64>> = (0..n).map(|i| if i < 9 { t[i] } else { None }).collect();
        // source b: weakly related on every sample
        let b: Vec<Option<f64>> = (0..n)
            .map(|i| Some(0.3 * t[i].unwrap() + ((i * 53) % 97) as f64))
            .collect();
        let labels = BTreeMap::from([("t".to_string(), t), ("a".to_string(), a), ("b".to_string(), b.clone())]);
        let ds = TaskDataset::new(1, vec![0.0; n], labels).unwrap();
        let got = source_correlation_analysis(&ds, &["a".into(), "b".into()], "t").unwrap();
        let expect = ds.pair_correlation("b", "t").unwrap().correlation.unwrap().abs();
        assert_eq!(got, expect);
        assert!(source_correlation_analysis(&ds, &["a".into()], "t").is_err());
        let dup = source_correlation_analysis(&ds, &["t".into()], "t").unwrap();
        assert!((dup - 1.0).abs() < 1e-15);
    }
}
