//! Pooled multi-task datasets: CSV ingestion, seeded 80:20 split with four
//! cross-validation folds, train-only standardization, and a synthetic
//! suite generator with controllable label correlation.
//!
//! All tasks share one feature matrix; a task's label column marks samples
//! it has no label for as missing.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{GateRng, Tensor};
use crate::bench::pearson;
use crate::error::{GateError, Result};
use crate::model::validate_task_id;

pub const FOLDS: usize = 4;
pub const TEST_RATIO: f64 = 0.2;
/// Minimum co-labeled samples for a pairwise correlation to be defined.
pub const MIN_CO_LABELED: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SplitBucket {
    Fold(u8),
    Test,
}

/// Seeded 80:20 split: `round(0.2·n)` test samples, the rest dealt
/// round-robin into four folds after a shuffle.
pub fn split_assignment(n: usize, seed: u64) -> Result<Vec<SplitBucket>> {
    if n < FOLDS + 1 {
        return Err(GateError::Data(format!("split needs at least {} samples, got {n}", FOLDS + 1)));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut GateRng::seed_from_u64(seed));
    let n_test = (n as f64 * TEST_RATIO).round() as usize;
    let mut out = vec![SplitBucket::Test; n];
    for (k, &i) in order[n_test..].iter().enumerate() {
        out[i] = SplitBucket::Fold((k % FOLDS) as u8);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub mean: f64,
    pub std: f64,
}

/// Which samples a query covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Subset {
    /// Every fold except the validation fold.
    Train { validation_fold: u8 },
    Validation { fold: u8 },
    /// All four folds.
    AllFolds,
    Test,
}

impl Subset {
    fn contains(self, b: SplitBucket) -> bool {
        match (self, b) {
            (Subset::Train { validation_fold }, SplitBucket::Fold(f)) => f != validation_fold,
            (Subset::Validation { fold }, SplitBucket::Fold(f)) => f == fold,
            (Subset::AllFolds, SplitBucket::Fold(_)) => true,
            (Subset::Test, SplitBucket::Test) => true,
            _ => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskDataset {
    feature_names: Vec<String>,
    n_features: usize,
    features: Vec<f64>,
    labels: BTreeMap<String, Vec<Option<f64>>>,
    split: Option<Vec<SplitBucket>>,
    split_seed: Option<u64>,
    task_stats: BTreeMap<String, Stats>,
    feature_stats: Vec<Stats>,
}

impl TaskDataset {
    pub fn new(n_features: usize, features: Vec<f64>, labels: BTreeMap<String, Vec<Option<f64>>>) -> Result<Self> {
        if n_features == 0 || features.is_empty() || !features.len().is_multiple_of(n_features) {
            return Err(GateError::Data("feature matrix is empty or ragged".into()));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(GateError::Data("feature matrix contains non-finite values".into()));
        }
        let n = features.len() / n_features;
        for (task, col) in &labels {
            validate_task_id(task)?;
            if col.len() != n {
                return Err(GateError::Data(format!("label column `{task}` has {} rows, expected {n}", col.len())));
            }
            if col.iter().flatten().any(|v| !v.is_finite()) {
                return Err(GateError::Data(format!("label column `{task}` contains infinities")));
            }
        }
        Ok(TaskDataset {
            feature_names: (0..n_features).map(|j| format!("f_{j}")).collect(),
            n_features,
            features,
            labels,
            split: None,
            split_seed: None,
            task_stats: BTreeMap::new(),
            feature_stats: Vec::new(),
        })
    }

    pub fn n_samples(&self) -> usize {
        self.features.len() / self.n_features
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn tasks(&self) -> Vec<String> {
        self.labels.keys().cloned().collect()
    }

    pub fn has_task(&self, task: &str) -> bool {
        self.labels.contains_key(task)
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn labels(&self, task: &str) -> Result<&[Option<f64>]> {
        self.labels
            .get(task)
            .map(Vec::as_slice)
            .ok_or_else(|| GateError::UnknownTask(task.to_string()))
    }

    pub fn split(&self) -> Option<&[SplitBucket]> {
        self.split.as_deref()
    }

    pub fn split_seed(&self) -> Option<u64> {
        self.split_seed
    }

    pub fn task_stats(&self) -> &BTreeMap<String, Stats> {
        &self.task_stats
    }

    pub fn is_standardized(&self) -> bool {
        !self.task_stats.is_empty()
    }

    /// Assigns the seeded split, replacing any previous one.
    pub fn assign_split(&mut self, seed: u64) -> Result<()> {
        self.split = Some(split_assignment(self.n_samples(), seed)?);
        self.split_seed = Some(seed);
        Ok(())
    }

    /// Samples in `subset` that carry a label for `task`, in index order.
    pub fn rows(&self, task: &str, subset: Subset) -> Result<Vec<usize>> {
        let labels = self.labels(task)?;
        let split = self.split.as_ref().ok_or_else(|| GateError::Data("dataset has no split".into()))?;
        Ok((0..self.n_samples())
            .filter(|&i| labels[i].is_some() && subset.contains(split[i]))
            .collect())
    }

    pub fn feature_batch(&self, rows: &[usize]) -> Result<Tensor> {
        let d = self.n_features;
        let mut v = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            v.extend_from_slice(&self.features[r * d..(r + 1) * d]);
        }
        Tensor::matrix(rows.len(), d, v)
    }

    /// Labels of `rows` for `task` as a `[rows, 1]` tensor; every row must be
    /// labeled.
    pub fn label_batch(&self, task: &str, rows: &[usize]) -> Result<Tensor> {
        let labels = self.labels(task)?;
        let v = rows
            .iter()
            .map(|&r| labels[r].ok_or_else(|| GateError::Data(format!("row {r} has no `{task}` label"))))
            .collect::<Result<Vec<_>>>()?;
        Tensor::matrix(rows.len(), 1, v)
    }

    /// Fits per-task label statistics and per-feature statistics on the
    /// non-test samples and transforms the whole dataset with them.
    /// Uses the population standard deviation.
    pub fn standardize(&mut self) -> Result<()> {
        let split = self
            .split
            .clone()
            .ok_or_else(|| GateError::Data("standardize needs a split".into()))?;
        let train: Vec<usize> = (0..self.n_samples()).filter(|&i| split[i] != SplitBucket::Test).collect();
        let mut stats = BTreeMap::new();
        for (task, col) in &self.labels {
            let vals: Vec<f64> = train.iter().filter_map(|&i| col[i]).collect();
            let s = population_stats(&vals)
                .ok_or_else(|| GateError::Data(format!("task `{task}` has no training labels")))?;
            if !(s.std > 0.0) {
                return Err(GateError::Data(format!("task `{task}` has constant training labels")));
            }
            stats.insert(task.clone(), s);
        }
        let d = self.n_features;
        let feature_stats: Vec<Stats> = (0..d)
            .map(|j| {
                let vals: Vec<f64> = train.iter().map(|&i| self.features[i * d + j]).collect();
                let s = population_stats(&vals).expect("train split is non-empty");
                Stats {
                    mean: s.mean,
                    std: if s.std > 0.0 { s.std } else { 1.0 },
                }
            })
            .collect();
        for (task, col) in self.labels.iter_mut() {
            let s = stats[task];
            col.iter_mut().flatten().for_each(|v| *v = (*v - s.mean) / s.std);
        }
        for row in self.features.chunks_exact_mut(d) {
            for (v, s) in row.iter_mut().zip(&feature_stats) {
                *v = (*v - s.mean) / s.std;
            }
        }
        // compose with earlier statistics so values map back to raw units
        for (task, s) in stats {
            let prev = self.task_stats.get(&task).copied();
            let composed = match prev {
                Some(p) => Stats {
                    mean: p.mean + p.std * s.mean,
                    std: p.std * s.std,
                },
                None => s,
            };
            self.task_stats.insert(task, composed);
        }
        self.feature_stats = feature_stats;
        Ok(())
    }

    /// Maps a standardized label back to raw units.
    pub fn unstandardize(&self, task: &str, value: f64) -> f64 {
        match self.task_stats.get(task) {
            Some(s) => value * s.std + s.mean,
            None => value,
        }
    }

    /// Copy restricted to the given tasks (features and split kept).
    pub fn select_tasks(&self, tasks: &[String]) -> Result<TaskDataset> {
        let mut out = self.clone();
        out.labels = BTreeMap::new();
        out.task_stats = BTreeMap::new();
        for t in tasks {
            out.labels.insert(t.clone(), self.labels(t)?.to_vec());
            if let Some(s) = self.task_stats.get(t) {
                out.task_stats.insert(t.clone(), *s);
            }
        }
        Ok(out)
    }

    /// Pearson correlation of every task pair on co-labeled samples, or
    /// `None` below [`MIN_CO_LABELED`] samples or for constant labels.
    pub fn correlation_matrix(&self) -> Vec<PairCorrelation> {
        let tasks = self.tasks();
        let mut out = Vec::new();
        for (i, a) in tasks.iter().enumerate() {
            for b in &tasks[i + 1..] {
                out.push(self.pair_correlation(a, b).expect("tasks exist"));
            }
        }
        out
    }

    pub fn pair_correlation(&self, a: &str, b: &str) -> Result<PairCorrelation> {
        let (la, lb) = (self.labels(a)?, self.labels(b)?);
        let (xs, ys): (Vec<f64>, Vec<f64>) = la
            .iter()
            .zip(lb)
            .filter_map(|(x, y)| Some(((*x)?, (*y)?)))
            .unzip();
        let corr = if xs.len() >= MIN_CO_LABELED { pearson(&xs, &ys).ok() } else { None };
        Ok(PairCorrelation {
            a: a.to_string(),
            b: b.to_string(),
            co_labeled: xs.len(),
            correlation: corr,
        })
    }

    pub fn load_csv(path: &Path) -> Result<TaskDataset> {
        let mut reader = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_path(path)
            .map_err(|e| csv_error(path, e))?;
        let headers = reader.headers().map_err(|e| csv_error(path, e))?.clone();
        let mut feature_cols = Vec::new();
        let mut label_cols = Vec::new();
        let mut seen = std::collections::HashSet::new();
        for (k, h) in headers.iter().enumerate() {
            if !seen.insert(h.to_string()) {
                return Err(GateError::Data(format!("duplicate column `{h}`")));
            }
            if h.starts_with("f_") {
                feature_cols.push((k, h.to_string()));
            } else if let Some(task) = h.strip_prefix("y_") {
                validate_task_id(task)?;
                label_cols.push((k, task.to_string()));
            } else {
                return Err(GateError::Data(format!("column `{h}` is neither `f_*` nor `y_<task>`")));
            }
        }
        if feature_cols.is_empty() {
            return Err(GateError::Data("no `f_*` feature columns".into()));
        }
        let mut features = Vec::new();
        let mut labels: BTreeMap<String, Vec<Option<f64>>> =
            label_cols.iter().map(|(_, t)| (t.clone(), Vec::new())).collect();
        for (line, record) in reader.records().enumerate() {
            let record = record.map_err(|e| csv_error(path, e))?;
            if record.len() != headers.len() {
                return Err(GateError::Data(format!("row {} has {} cells, expected {}", line + 1, record.len(), headers.len())));
            }
            for (k, name) in &feature_cols {
                let cell = &record[*k];
                let v: f64 = cell
                    .parse()
                    .ok()
                    .filter(|v: &f64| v.is_finite())
                    .ok_or_else(|| GateError::Data(format!("row {}: feature `{name}` = `{cell}` is not a finite number", line + 1)))?;
                features.push(v);
            }
            for (k, task) in &label_cols {
                let cell = &record[*k];
                let v = if cell.is_empty() || cell.eq_ignore_ascii_case("nan") {
                    None
                } else {
                    Some(cell.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| {
                        GateError::Data(format!("row {}: label `y_{task}` = `{cell}` is not a number", line + 1))
                    })?)
                };
                labels.get_mut(task).expect("column registered").push(v);
            }
        }
        if features.is_empty() {
            return Err(GateError::Data(format!("{} has no data rows", path.display())));
        }
        let mut ds = TaskDataset::new(feature_cols.len(), features, labels)?;
        ds.feature_names = feature_cols.into_iter().map(|(_, n)| n).collect();
        Ok(ds)
    }

    /// Writes the current (possibly standardized) values; missing labels
    /// become empty cells.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
        let mut header: Vec<String> = self.feature_names.clone();
        header.extend(self.labels.keys().map(|t| format!("y_{t}")));
        w.write_record(&header).map_err(|e| csv_error(path, e))?;
        for i in 0..self.n_samples() {
            let mut row: Vec<String> = self.features[i * self.n_features..(i + 1) * self.n_features]
                .iter()
                .map(|v| v.to_string())
                .collect();
            row.extend(self.labels.values().map(|c| c[i].map(|v| v.to_string()).unwrap_or_default()));
            w.write_record(&row).map_err(|e| csv_error(path, e))?;
        }
        w.flush().map_err(|e| GateError::io(path, e))?;
        Ok(())
    }
}

fn csv_error(path: &Path, e: csv::Error) -> GateError {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => GateError::io(path, io),
            _ => unreachable!(),
        }
    } else {
        GateError::Data(format!("{}: {e}", path.display()))
    }
}

fn population_stats(v: &[f64]) -> Option<Stats> {
    if v.is_empty() {
        return None;
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    Some(Stats { mean, std: var.sqrt() })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairCorrelation {
    pub a: String,
    pub b: String,
    pub co_labeled: usize,
    pub correlation: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskRole {
    Source,
    Target,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LatentFunction {
    Linear,
    Quadratic,
    Sinusoidal,
}

fn default_one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticTaskSpec {
    pub id: String,
    pub role: TaskRole,
    pub family: LatentFunction,
    /// Task whose labels this task correlates with.
    #[serde(default)]
    pub reference: Option<String>,
    /// Designed label correlation with `reference`.
    #[serde(default)]
    pub target_correlation: f64,
    #[serde(default)]
    pub noise_std: f64,
    /// Fraction of pool samples carrying a label.
    #[serde(default = "default_one")]
    pub label_coverage: f64,
    /// Exact labeled count; overrides `label_coverage`.
    #[serde(default)]
    pub n_labeled: Option<usize>,
    #[serde(default)]
    pub offset: f64,
    #[serde(default = "default_one")]
    pub scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuiteSpec {
    pub n_samples: usize,
    pub n_features: usize,
    pub seed: u64,
    /// Shift test-split features to probe extrapolation.
    #[serde(default)]
    pub ood_test: bool,
    #[serde(default = "default_one")]
    pub ood_shift: f64,
    /// Angular frequency of the sinusoidal family.
    #[serde(default = "default_frequency")]
    pub frequency: f64,
    /// Linear component added to the sinusoidal family.
    #[serde(default = "default_linear_mix")]
    pub linear_mix: f64,
    pub tasks: Vec<SyntheticTaskSpec>,
}

fn default_frequency() -> f64 {
    1.5
}

fn default_linear_mix() -> f64 {
    0.5
}

impl SuiteSpec {
    /// Sinusoidal sources `s0..s{n-1}` on independent directions, labeled
    /// on every sample, plus target `t` correlated with `s0` and labeled on
    /// `target_labeled` samples.
    pub fn transfer(
        n_sources: usize,
        n_samples: usize,
        n_features: usize,
        target_correlation: f64,
        target_labeled: usize,
        seed: u64,
    ) -> SuiteSpec {
        let task = |id: String, role, reference: Option<&str>, corr, n_labeled| SyntheticTaskSpec {
            id,
            role,
            family: LatentFunction::Sinusoidal,
            reference: reference.map(str::to_string),
            target_correlation: corr,
            noise_std: 0.1,
            label_coverage: 1.0,
            n_labeled,
            offset: 0.0,
            scale: 1.0,
        };
        let mut tasks: Vec<SyntheticTaskSpec> = (0..n_sources)
            .map(|i| task(format!("s{i}"), TaskRole::Source, None, 0.0, None))
            .collect();
        tasks.push(task(
            "t".into(),
            TaskRole::Target,
            Some("s0"),
            target_correlation,
            Some(target_labeled),
        ));
        SuiteSpec {
            n_samples,
            n_features,
            seed,
            ood_test: false,
            ood_shift: 1.0,
            frequency: default_frequency(),
            linear_mix: default_linear_mix(),
            tasks,
        }
    }

    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("spec serializes");
        hex::encode(Sha256::digest(json))
    }

    pub fn sources(&self) -> Vec<String> {
        self.role_ids(TaskRole::Source)
    }

    pub fn targets(&self) -> Vec<String> {
        self.role_ids(TaskRole::Target)
    }

    fn role_ids(&self, role: TaskRole) -> Vec<String> {
        self.tasks.iter().filter(|t| t.role == role).map(|t| t.id.clone()).collect()
    }

    fn validate(&self) -> Result<()> {
        if self.n_samples < FOLDS + 1 || self.n_features == 0 {
            return Err(GateError::Config("suite needs n_samples >= 5 and n_features >= 1".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for t in &self.tasks {
            validate_task_id(&t.id)?;
            if !seen.insert(t.id.as_str()) {
                return Err(GateError::DuplicateTask(t.id.clone()));
            }
            if !(t.target_correlation.abs() <= 1.0) {
                return Err(GateError::Config(format!("task `{}`: |target_correlation| must be <= 1", t.id)));
            }
            if !(t.label_coverage > 0.0 && t.label_coverage <= 1.0) {
                return Err(GateError::Config(format!("task `{}`: label_coverage must lie in (0, 1]", t.id)));
            }
            if t.n_labeled.is_some_and(|n| n == 0 || n > self.n_samples) {
                return Err(GateError::Config(format!("task `{}`: n_labeled outside 1..={}", t.id, self.n_samples)));
            }
            if !(t.noise_std >= 0.0) || t.scale == 0.0 {
                return Err(GateError::Config(format!("task `{}`: noise_std >= 0 and scale != 0 required", t.id)));
            }
            if let Some(r) = &t.reference {
                if !seen.contains(r.as_str()) || r == &t.id {
                    return Err(GateError::Config(format!(
                        "task `{}`: reference `{r}` must be declared earlier in the suite",
                        t.id
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Hermite coefficients `E[f(h)·Heₖ(h)] / √k!` of a family, `k = 0..K`, for
/// `h ~ N(0, 1)`. `Cov(f(a), g(b)) = Σₖ≥₁ aₖ bₖ ρᵏ` when `corr(a, b) = ρ`.
fn hermite_coefficients(f: LatentFunction, frequency: f64, linear_mix: f64) -> Vec<f64> {
    const K: usize = 80;
    let mut a = vec![0.0; K + 1];
    match f {
        LatentFunction::Linear => a[1] = 1.0,
        LatentFunction::Quadratic => a[2] = 1.0,
        LatentFunction::Sinusoidal => {
            // E[sin(ωh)·Heₖ] = E[dᵏ/dhᵏ sin(ωh)] = ωᵏ sin(kπ/2) e^{−ω²/2}
            let damp = (-frequency * frequency / 2.0).exp();
            let mut term = 1.0; // ωᵏ / √k!
            for (k, slot) in a.iter_mut().enumerate() {
                if k > 0 {
                    term *= frequency / (k as f64).sqrt();
                }
                *slot = match k % 4 {
                    1 => term * damp,
                    3 => -term * damp,
                    _ => 0.0,
                };
            }
            a[1] += linear_mix;
        }
    }
    a
}

fn family_value(f: LatentFunction, h: f64, frequency: f64, linear_mix: f64) -> f64 {
    match f {
        LatentFunction::Linear => h,
        LatentFunction::Quadratic => (h * h - 1.0) / std::f64::consts::SQRT_2,
        LatentFunction::Sinusoidal => (frequency * h).sin() + linear_mix * h,
    }
}

/// Label correlation implied by latent correlation `rho` between two tasks.
fn implied_correlation(a: &[f64], b: &[f64], noise_a: f64, noise_b: f64, rho: f64) -> f64 {
    let mut cov = 0.0;
    let mut p = 1.0;
    for k in 1..a.len() {
        p *= rho;
        cov += a[k] * b[k] * p;
    }
    let var = |c: &[f64], n: f64| c[1..].iter().map(|x| x * x).sum::<f64>() + n * n;
    cov / (var(a, noise_a) * var(b, noise_b)).sqrt()
}

/// Latent correlation achieving label correlation `target`, or an error if
/// no `rho ∈ [−1, 1]` reaches it.
fn calibrate_latent_correlation(a: &[f64], b: &[f64], noise_a: f64, noise_b: f64, target: f64) -> Option<f64> {
    let g = |rho: f64| implied_correlation(a, b, noise_a, noise_b, rho) - target;
    if g(0.0) == 0.0 {
        return Some(0.0);
    }
    const STEPS: usize = 2000;
    let grid: Vec<f64> = (0..=STEPS).map(|i| -1.0 + 2.0 * i as f64 / STEPS as f64).collect();
    // prefer the bracket nearest to zero latent correlation
    let mut brackets: Vec<(f64, f64)> = grid
        .windows(2)
        .filter(|w| g(w[0]) == 0.0 || g(w[0]).signum() != g(w[1]).signum())
        .map(|w| (w[0], w[1]))
        .collect();
    brackets.sort_by(|x, y| x.0.abs().min(x.1.abs()).total_cmp(&y.0.abs().min(y.1.abs())));
    let (mut lo, mut hi) = *brackets.first()?;
    if g(lo) == 0.0 {
        return Some(lo);
    }
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if g(mid).signum() == g(lo).signum() {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Some(0.5 * (lo + hi))
}

/// Unit directions, orthonormal when there are at most `dim` of them.
fn directions(count: usize, dim: usize, rng: &mut GateRng) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(count);
    for k in 0..count {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        if k < dim {
            for u in &out[..k] {
                let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(u).for_each(|(a, b)| *a -= dot * b);
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= norm);
        out.push(v);
    }
    out
}

/// Generated suite: the pooled dataset (raw units, split assigned) plus
/// provenance.
#[derive(Debug, Clone)]
pub struct Suite {
    pub spec: SuiteSpec,
    pub dataset: TaskDataset,
    /// Latent correlation used for each task with a reference.
    pub latent_correlation: BTreeMap<String, f64>,
}

impl Suite {
    pub fn metadata(&self) -> Result<DatasetMetadata> {
        let mut prepared = self.dataset.clone();
        prepared.standardize()?;
        Ok(DatasetMetadata {
            format_version: METADATA_VERSION,
            n_samples: self.dataset.n_samples(),
            n_features: self.dataset.n_features(),
            tasks: self.dataset.tasks(),
            sources: self.spec.sources(),
            targets: self.spec.targets(),
            split_seed: self.spec.seed,
            std_convention: "population".into(),
            task_stats: prepared.task_stats().clone(),
            generator_spec_hash: Some(self.spec.hash()),
            generator_spec: Some(self.spec.clone()),
            correlations: self.dataset.correlation_matrix(),
        })
    }
}

pub fn generate_synthetic_suite(spec: &SuiteSpec) -> Result<Suite> {
    spec.validate()?;
    let n = spec.n_samples;
    let d = spec.n_features;
    let mut rng = GateRng::seed_from_u64(spec.seed);
    let mut features: Vec<f64> = (0..n * d).map(|_| rng.sample(StandardNormal)).collect();
    let split = split_assignment(n, spec.seed)?;
    if spec.ood_test {
        for (i, b) in split.iter().enumerate() {
            if *b == SplitBucket::Test {
                features[i * d..(i + 1) * d].iter_mut().for_each(|v| *v += spec.ood_shift);
            }
        }
    }
    if spec.tasks.len() > d {
        log::warn!("{} tasks but {} features: latent directions are not orthogonal", spec.tasks.len(), d);
    }
    let dirs = directions(spec.tasks.len(), d, &mut rng);

    let mut latents: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut labels = BTreeMap::new();
    let mut latent_correlation = BTreeMap::new();
    let by_id: BTreeMap<&str, &SyntheticTaskSpec> = spec.tasks.iter().map(|t| (t.id.as_str(), t)).collect();
    for (k, task) in spec.tasks.iter().enumerate() {
        let own: Vec<f64> = features
            .chunks_exact(d)
            .map(|x| x.iter().zip(&dirs[k]).map(|(a, b)| a * b).sum())
            .collect();
        let h = match &task.reference {
            None => own,
            Some(r) => {
                let rs = by_id[r.as_str()];
                let ca = hermite_coefficients(task.family, spec.frequency, spec.linear_mix);
                let cb = hermite_coefficients(rs.family, spec.frequency, spec.linear_mix);
                let rho = calibrate_latent_correlation(&ca, &cb, task.noise_std, rs.noise_std, task.target_correlation)
                    .ok_or_else(|| {
                        GateError::Config(format!(
                            "task `{}`: correlation {} with `{r}` is infeasible for families {:?}/{:?}",
                            task.id, task.target_correlation, task.family, rs.family
                        ))
                    })?;
                latent_correlation.insert(task.id.clone(), rho);
                let w = (1.0 - rho * rho).max(0.0).sqrt();
                latents[r].iter().zip(&own).map(|(a, b)| rho * a + w * b).collect()
            }
        };
        let n_labeled = task
            .n_labeled
            .unwrap_or_else(|| ((task.label_coverage * n as f64).round() as usize).max(1));
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut rng);
        let mut col = vec![None; n];
        for &i in &idx[..n_labeled] {
            let noise: f64 = rng.sample(StandardNormal);
            let f = family_value(task.family, h[i], spec.frequency, spec.linear_mix);
            col[i] = Some(task.offset + task.scale * (f + task.noise_std * noise));
        }
        labels.insert(task.id.clone(), col);
        latents.insert(task.id.clone(), h);
    }
    let mut dataset = TaskDataset::new(d, features, labels)?;
    dataset.split = Some(split);
    dataset.split_seed = Some(spec.seed);
    Ok(Suite {
        spec: spec.clone(),
        dataset,
        latent_correlation,
    })
}

pub const METADATA_VERSION: u32 = 1;

/// Sidecar written next to a dataset CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMetadata {
    pub format_version: u32,
    pub n_samples: usize,
    pub n_features: usize,
    pub tasks: Vec<String>,
    pub sources: Vec<String>,
    pub targets: Vec<String>,
    pub split_seed: u64,
    pub std_convention: String,
    /// Raw-unit label statistics on the non-test samples.
    pub task_stats: BTreeMap<String, Stats>,
    pub generator_spec_hash: Option<String>,
    pub generator_spec: Option<SuiteSpec>,
    pub correlations: Vec<PairCorrelation>,
}

impl DatasetMetadata {
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("metadata serializes");
        hex::encode(Sha256::digest(json))
    }
}

pub const DATA_FILE: &str = "data.csv";
pub const META_FILE: &str = "data.meta.json";

/// Writes `data.csv` and `data.meta.json` into `dir`.
pub fn write_suite(suite: &Suite, dir: &Path) -> Result<DatasetMetadata> {
    fs::create_dir_all(dir).map_err(|e| GateError::io(dir, e))?;
    suite.dataset.write_csv(&dir.join(DATA_FILE))?;
    let meta = suite.metadata()?;
    let path = dir.join(META_FILE);
    let json = serde_json::to_string_pretty(&meta)?;
    fs::write(&path, json + "\n").map_err(|e| GateError::io(&path, e))?;
    Ok(meta)
}

/// A dataset ready for training: split assigned and standardized.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub dataset: TaskDataset,
    pub metadata: DatasetMetadata,
    pub path: PathBuf,
}

/// Loads a dataset directory (or a bare CSV), assigns the split recorded in
/// the sidecar (or `fallback_seed`) and standardizes on the training part.
pub fn load_prepared(path: &Path, fallback_seed: u64) -> Result<PreparedData> {
    let (csv_path, meta_path) = if path.is_dir() {
        (path.join(DATA_FILE), path.join(META_FILE))
    } else {
        (path.to_path_buf(), path.with_extension("meta.json"))
    };
    let mut dataset = TaskDataset::load_csv(&csv_path)?;
    let metadata = if meta_path.exists() {
        let text = fs::read_to_string(&meta_path).map_err(|e| GateError::io(&meta_path, e))?;
        let meta: DatasetMetadata = serde_json::from_str(&text)?;
        if meta.format_version != METADATA_VERSION {
            return Err(GateError::Data(format!("unsupported metadata version {}", meta.format_version)));
        }
        meta
    } else {
        dataset.assign_split(fallback_seed)?;
        let mut prepared = dataset.clone();
        prepared.standardize()?;
        DatasetMetadata {
            format_version: METADATA_VERSION,
            n_samples: dataset.n_samples(),
            n_features: dataset.n_features(),
            tasks: dataset.tasks(),
            sources: Vec::new(),
            targets: Vec::new(),
            split_seed: fallback_seed,
            std_convention: "population".into(),
            task_stats: prepared.task_stats().clone(),
            generator_spec_hash: None,
            generator_spec: None,
            correlations: dataset.correlation_matrix(),
        }
    };
    if metadata.n_samples != dataset.n_samples() || metadata.n_features != dataset.n_features() {
        return Err(GateError::Data("dataset shape disagrees with its metadata".into()));
    }
    dataset.assign_split(metadata.split_seed)?;
    dataset.standardize()?;
    Ok(PreparedData {
        dataset,
        metadata,
        path: path.to_path_buf(),
    })
}
