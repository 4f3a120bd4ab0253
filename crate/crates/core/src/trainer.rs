//! Training regimes: vanilla multi-task from scratch, pre-training,
//! task addition on a frozen model, and single-task baselines.
//!
//! One epoch is one pass over the largest active task's training rows;
//! smaller tasks cycle. Every step draws one batch per active task, builds
//! that task's loss on its own tape, accumulates gradients and applies a
//! single optimizer update.

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{clip_grad_norm, AdamW, AdamWConfig, GateRng, Mode, Tape, Tensor, Var};
use crate::bench::rmse;
use crate::data::{Subset, TaskDataset};
use crate::error::{GateError, Result};
use crate::losses::{
    autoencoder_loss, consistency_loss, distance_loss, mapping_loss, total_loss, LossBreakdown, LossTerms, LossWeights,
};
use crate::model::{GateModel, Model, ModelConfig, ModelKind, MtlModel, SingleModel};
use crate::perturb::{column_std, probe_displacements, sample_noise, stack_perturbed, PerturbSite, PerturbationConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointPolicy {
    BestValidationRmse,
    Last,
}

/// What the detoured prediction is compared against in the mapping loss.
/// `Label` is the default. With `Prediction` both sides of the term are
/// free, and pre-training tends to settle into a constant-output solution
/// where every alignment term vanishes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MappingTarget {
    Prediction,
    Label,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Vanilla,
    Pretrain,
    Addition,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub weights: LossWeights,
    pub perturbation: PerturbationConfig,
    pub seed: u64,
    pub checkpoint_policy: CheckpointPolicy,
    pub validation_fold: u8,
    pub weight_decay: f64,
    /// Global gradient-norm bound; 0 disables clipping.
    pub clip_norm: f64,
    pub mapping_target: MappingTarget,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 5e-4,
            batch_size: 512,
            epochs: 1000,
            weights: LossWeights::default(),
            perturbation: PerturbationConfig::default(),
            seed: 0,
            checkpoint_policy: CheckpointPolicy::BestValidationRmse,
            validation_fold: 0,
            weight_decay: 0.01,
            clip_norm: 5.0,
            mapping_target: MappingTarget::Label,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(GateError::Config("batch_size and epochs must be >= 1".into()));
        }
        if self.validation_fold as usize >= crate::data::FOLDS {
            return Err(GateError::Config(format!("validation_fold must be < {}", crate::data::FOLDS)));
        }
        if !(self.clip_norm >= 0.0) {
            return Err(GateError::Config("clip_norm must be >= 0".into()));
        }
        self.weights.validate()?;
        self.perturbation.validate()?;
        AdamW::new(self.adamw())?;
        Ok(())
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }
}

/// Loss-term instances built in one optimizer step.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TermCounts {
    /// Per-task regression terms.
    pub regression: usize,
    /// (consistency, mapping, distance) triples, one per ordered task pair.
    pub alignment: usize,
}

impl std::ops::AddAssign for TermCounts {
    fn add_assign(&mut self, o: TermCounts) {
        self.regression += o.regression;
        self.alignment += o.alignment;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: usize,
    /// Mean over the epoch's steps.
    pub loss: LossBreakdown,
    /// Mean validation RMSE over validated tasks (standardized units).
    pub val_rmse: Option<f64>,
    /// Wall-clock seconds spent in optimizer steps.
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub model_kind: ModelKind,
    pub regime: Regime,
    pub sources: Vec<String>,
    pub targets: Vec<String>,
    pub seed: u64,
    pub validation_fold: u8,
    pub terms_per_step: TermCounts,
    pub trainable_params: usize,
    pub total_params: usize,
    pub trainable_networks: Vec<String>,
    pub epochs: Vec<EpochRecord>,
    pub selected_epoch: usize,
    pub selected_val_rmse: Option<f64>,
    /// Fingerprint of all frozen parameters before and after training.
    pub frozen_fingerprint: Option<(String, String)>,
    /// Where the selected model was saved, when it was.
    #[serde(default)]
    pub checkpoint: Option<String>,
}

pub struct TrainOutcome<M> {
    pub model: M,
    pub record: RunRecord,
}

/// One batch for the task playing the target role in a step.
pub struct Batch {
    pub task: String,
    pub x: Tensor,
    pub y: Tensor,
}

/// Generator streams of one run, derived from its seed.
pub struct StepRngs {
    pub dropout: GateRng,
    pub perturb: GateRng,
}

/// Splits a run seed into independent streams.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Builds the loss of one batch.
trait Objective<M> {
    fn loss<'a>(&self, model: &'a M, tape: &mut Tape<'a>, batch: &Batch, rngs: &mut StepRngs) -> Result<(Var, LossBreakdown, TermCounts)>;
}

/// GATE loss for batch task `b` against `partners`, each partner acting as
/// source `α` in the alignment terms.
struct GateObjective<'c> {
    cfg: &'c TrainConfig,
    partners_of: Box<dyn Fn(&str) -> Vec<String> + 'c>,
    /// Weight of the batch task's regression term (1/K).
    reg_weight: f64,
    /// Also add the partners' own reconstruction terms.
    partner_auto: bool,
    input_scale: Vec<f64>,
}

impl Objective<GateModel> for GateObjective<'_> {
    fn loss<'a>(
        &self,
        model: &'a GateModel,
        tape: &mut Tape<'a>,
        batch: &Batch,
        rngs: &mut StepRngs,
    ) -> Result<(Var, LossBreakdown, TermCounts)> {
        let cfg = self.cfg;
        let pcfg = &cfg.perturbation;
        let rows = batch.x.dims2().0;
        let b = model.unit(&batch.task)?;
        let x = tape.input(&batch.x);
        let e = model.embed(tape, x, Mode::Train, &mut rngs.dropout)?;
        let out = b.forward(tape, e, Mode::Train, &mut rngs.dropout)?;
        let y = tape.input(&batch.y);
        let reg = tape.mse(out.prediction, y)?;
        let reg = tape.scale(reg, self.reg_weight);

        let probe_input = match pcfg.site {
            PerturbSite::Embedding => {
                let (_, cols) = tape.dims(e);
                let scale = column_std(tape.value(e), cols);
                let noise = sample_noise(rows, &scale, pcfg, &mut rngs.perturb);
                stack_perturbed(tape, e, &noise)?
            }
            PerturbSite::Input => {
                let noise = sample_noise(rows, &self.input_scale, pcfg, &mut rngs.perturb);
                let stacked_x = stack_perturbed(tape, x, &noise)?;
                model.embed(tape, stacked_x, Mode::Eval, &mut rngs.dropout)?
            }
        };
        let s_b = probe_displacements(tape, b, probe_input, rows, pcfg.count_m, &mut rngs.dropout)?;

        let partners = (self.partners_of)(&batch.task);
        let mut auto_pairs = vec![(out.latent, out.reconstruction)];
        let mut lf = Vec::with_capacity(partners.len());
        let mut detours = Vec::with_capacity(partners.len());
        let mut s_partners = Vec::with_capacity(partners.len());
        for a in &partners {
            let ua = model.unit(a)?;
            let (za, zpa) = ua.lf_point(tape, e, Mode::Train, &mut rngs.dropout)?;
            if self.partner_auto {
                let zh = if ua.inverse_transfer.is_frozen() {
                    ua.inverse_transfer.forward(tape, zpa, Mode::Eval, &mut rngs.dropout)?
                } else {
                    ua.inverse_transfer.forward(tape, zpa, Mode::Train, &mut rngs.dropout)?
                };
                auto_pairs.push((za, zh));
            }
            lf.push(zpa);
            detours.push(b.decode(tape, zpa, Mode::Train, &mut rngs.dropout)?);
            let s = probe_displacements(tape, ua, probe_input, rows, pcfg.count_m, &mut rngs.dropout)?;
            s_partners.push((a.as_str(), s));
        }
        let mut terms = LossTerms {
            reg: Some(reg),
            auto: Some(autoencoder_loss(tape, &auto_pairs)?),
            ..LossTerms::default()
        };
        if !partners.is_empty() {
            let map_target = match cfg.mapping_target {
                MappingTarget::Prediction => out.prediction,
                MappingTarget::Label => y,
            };
            terms.cons = Some(consistency_loss(tape, &lf, out.lf_point)?);
            terms.map = Some(mapping_loss(tape, map_target, &detours)?);
            terms.dis = Some(distance_loss(tape, &s_partners, &s_b, &cfg.weights)?);
        }
        let (total, breakdown) = total_loss(tape, terms, &cfg.weights)?;
        let counts = TermCounts {
            regression: 1,
            alignment: partners.len(),
        };
        Ok((total, breakdown, counts))
    }
}

struct MtlObjective {
    reg_weight: f64,
}

impl Objective<MtlModel> for MtlObjective {
    fn loss<'a>(
        &self,
        model: &'a MtlModel,
        tape: &mut Tape<'a>,
        batch: &Batch,
        rngs: &mut StepRngs,
    ) -> Result<(Var, LossBreakdown, TermCounts)> {
        let x = tape.input(&batch.x);
        let z = model.latent(tape, x, Mode::Train, &mut rngs.dropout)?;
        let p = model.head_forward(tape, &batch.task, z, Mode::Train, &mut rngs.dropout)?;
        let y = tape.input(&batch.y);
        let reg = tape.mse(p, y)?;
        let reg = tape.scale(reg, self.reg_weight);
        let v = tape.scalar(reg);
        let breakdown = LossBreakdown {
            reg: v,
            total: v,
            ..LossBreakdown::default()
        };
        Ok((reg, breakdown, TermCounts { regression: 1, alignment: 0 }))
    }
}

struct SingleObjective;

impl Objective<SingleModel> for SingleObjective {
    fn loss<'a>(
        &self,
        model: &'a SingleModel,
        tape: &mut Tape<'a>,
        batch: &Batch,
        rngs: &mut StepRngs,
    ) -> Result<(Var, LossBreakdown, TermCounts)> {
        let x = tape.input(&batch.x);
        let p = model.forward(tape, x, Mode::Train, &mut rngs.dropout)?;
        let y = tape.input(&batch.y);
        let reg = tape.mse(p, y)?;
        let v = tape.scalar(reg);
        let breakdown = LossBreakdown {
            reg: v,
            total: v,
            ..LossBreakdown::default()
        };
        Ok((reg, breakdown, TermCounts { regression: 1, alignment: 0 }))
    }
}

/// Cycles through a task's training rows in seeded shuffled order.
struct Sampler {
    rows: Vec<usize>,
    pos: usize,
    rng: GateRng,
}

impl Sampler {
    fn new(mut rows: Vec<usize>, seed: u64) -> Self {
        let mut rng = GateRng::seed_from_u64(seed);
        rows.shuffle(&mut rng);
        Sampler { rows, pos: 0, rng }
    }

    fn next(&mut self, k: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(k);
        while out.len() < k {
            if self.pos == self.rows.len() {
                self.rows.shuffle(&mut self.rng);
                self.pos = 0;
            }
            out.push(self.rows[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Runs training for datasets drawn from one pooled, standardized dataset.
pub struct Trainer<'d> {
    pub data: &'d TaskDataset,
    pub cfg: TrainConfig,
    /// Appends one JSON line per epoch when set.
    pub epoch_log: Option<PathBuf>,
}

impl<'d> Trainer<'d> {
    pub fn new(data: &'d TaskDataset, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if data.split().is_none() {
            return Err(GateError::Data("training data needs a split".into()));
        }
        Ok(Trainer {
            data,
            cfg,
            epoch_log: None,
        })
    }

    pub fn with_epoch_log(mut self, path: impl Into<PathBuf>) -> Self {
        self.epoch_log = Some(path.into());
        self
    }

    fn model_config(&self, base: &ModelConfig) -> ModelConfig {
        base.clone().with_input_dim(self.data.n_features())
    }

    fn check_tasks(&self, tasks: &[String], min: usize, what: &'static str) -> Result<()> {
        if tasks.len() < min {
            return Err(GateError::Empty(what, min));
        }
        for (i, t) in tasks.iter().enumerate() {
            if tasks[..i].contains(t) {
                return Err(GateError::DuplicateTask(t.clone()));
            }
            let n = self.data.rows(t, self.train_subset())?.len();
            if n == 0 {
                return Err(GateError::Data(format!("task `{t}` has no training rows")));
            }
        }
        Ok(())
    }

    fn train_subset(&self) -> Subset {
        Subset::Train {
            validation_fold: self.cfg.validation_fold,
        }
    }

    fn input_scale(&self) -> Vec<f64> {
        column_std(self.data.features(), self.data.n_features())
    }

    fn gate_objective(&self, partners: Vec<String>, exclude_self: bool, reg_weight: f64, partner_auto: bool) -> GateObjective<'_> {
        GateObjective {
            cfg: &self.cfg,
            partners_of: Box::new(move |b: &str| {
                partners
                    .iter()
                    .filter(|a| !(exclude_self && a.as_str() == b))
                    .cloned()
                    .collect()
            }),
            reg_weight,
            partner_auto,
            input_scale: self.input_scale(),
        }
    }

    /// Vanilla GATE from scratch on `tasks`: every ordered pair `(a, b)`
    /// contributes alignment terms on task `b`'s batch.
    pub fn train_vanilla_gate(&self, base: &ModelConfig, tasks: &[String]) -> Result<TrainOutcome<GateModel>> {
        self.check_tasks(tasks, 2, "vanilla GATE tasks")?;
        let model = GateModel::new(self.model_config(base), tasks, derive_seed(self.cfg.seed, 1))?;
        let obj = self.gate_objective(tasks.to_vec(), true, 1.0 / tasks.len() as f64, false);
        self.fit(model, &obj, tasks, tasks, Regime::Vanilla, None)
    }

    /// Vanilla GATE restricted to source tasks.
    pub fn pretrain_gate(&self, base: &ModelConfig, sources: &[String]) -> Result<TrainOutcome<GateModel>> {
        let mut out = self.train_vanilla_gate(base, sources)?;
        out.record.regime = Regime::Pretrain;
        Ok(out)
    }

    /// Adds a unit for `target` to a pre-trained model and trains only it.
    pub fn add_and_train_gate(&self, mut model: GateModel, target: &str) -> Result<TrainOutcome<GateModel>> {
        let target_list = vec![target.to_string()];
        self.check_tasks(&target_list, 1, "target task")?;
        if model.config().input_dim != self.data.n_features() {
            return Err(GateError::shape("checkpoint input dim", model.config().input_dim, self.data.n_features()));
        }
        if model.source_tasks().is_empty() {
            return Err(GateError::Config("task addition needs a model with source tasks".into()));
        }
        model.add_target_unit(target, derive_seed(self.cfg.seed, 2))?;
        let sources = model.source_tasks().to_vec();
        let obj = self.gate_objective(sources, false, 1.0, true);
        let prefix = format!("unit.{target}.");
        self.fit(model, &obj, &target_list, &target_list, Regime::Addition, Some(&prefix))
    }

    pub fn train_vanilla_mtl(&self, base: &ModelConfig, tasks: &[String]) -> Result<TrainOutcome<MtlModel>> {
        self.check_tasks(tasks, 1, "MTL tasks")?;
        let model = MtlModel::new(self.model_config(base), tasks, derive_seed(self.cfg.seed, 1))?;
        let obj = MtlObjective {
            reg_weight: 1.0 / tasks.len() as f64,
        };
        self.fit(model, &obj, tasks, tasks, Regime::Vanilla, None)
    }

    pub fn pretrain_mtl(&self, base: &ModelConfig, sources: &[String]) -> Result<TrainOutcome<MtlModel>> {
        let mut out = self.train_vanilla_mtl(base, sources)?;
        out.record.regime = Regime::Pretrain;
        Ok(out)
    }

    pub fn add_and_train_mtl(&self, mut model: MtlModel, target: &str) -> Result<TrainOutcome<MtlModel>> {
        let target_list = vec![target.to_string()];
        self.check_tasks(&target_list, 1, "target task")?;
        if model.config().input_dim != self.data.n_features() {
            return Err(GateError::shape("checkpoint input dim", model.config().input_dim, self.data.n_features()));
        }
        model.mtl_add_head(target, derive_seed(self.cfg.seed, 2))?;
        let obj = MtlObjective { reg_weight: 1.0 };
        let prefix = format!("head.{target}.");
        self.fit(model, &obj, &target_list, &target_list, Regime::Addition, Some(&prefix))
    }

    pub fn train_single(&self, base: &ModelConfig, task: &str) -> Result<TrainOutcome<SingleModel>> {
        let tasks = vec![task.to_string()];
        self.check_tasks(&tasks, 1, "single task")?;
        let model = SingleModel::new(self.model_config(base), task, derive_seed(self.cfg.seed, 1))?;
        self.fit(model, &SingleObjective, &tasks, &tasks, Regime::Vanilla, None)
    }

    /// Mean validation RMSE over `tasks` in eval mode, or `None` when no
    /// task has validation rows.
    pub fn validation_rmse<M: Model>(&self, model: &M, tasks: &[String]) -> Result<Option<f64>> {
        let subset = Subset::Validation {
            fold: self.cfg.validation_fold,
        };
        let mut vals = Vec::new();
        for t in tasks {
            let rows = self.data.rows(t, subset)?;
            if rows.is_empty() {
                continue;
            }
            let (y, y_hat) = predict_rows(model, self.data, t, &rows)?;
            vals.push(rmse(&y, &y_hat)?);
        }
        Ok((!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64))
    }

    fn fit<M, O>(
        &self,
        mut model: M,
        objective: &O,
        batch_tasks: &[String],
        val_tasks: &[String],
        regime: Regime,
        trainable_prefix: Option<&str>,
    ) -> Result<TrainOutcome<M>>
    where
        M: Model + Clone,
        O: Objective<M>,
    {
        let cfg = &self.cfg;
        let frozen = |name: &str| trainable_prefix.is_some_and(|p| !name.starts_with(p));
        let fingerprint_before = trainable_prefix.map(|_| model.param_fingerprint(&frozen));
        if let Some(prefix) = trainable_prefix {
            let trainable = model.trainable_networks();
            if trainable.is_empty() || trainable.iter().any(|n| !format!("{n}.").starts_with(prefix)) {
                return Err(GateError::Training(format!("trainable set {trainable:?} is not exactly `{prefix}*`")));
            }
        }

        let mut samplers: Vec<Sampler> = batch_tasks
            .iter()
            .enumerate()
            .map(|(i, t)| Ok(Sampler::new(self.data.rows(t, self.train_subset())?, derive_seed(cfg.seed, 100 + i as u64))))
            .collect::<Result<_>>()?;
        let sizes: Vec<usize> = samplers.iter().map(|s| cfg.batch_size.min(s.rows.len())).collect();
        let largest = samplers.iter().map(|s| s.rows.len()).max().unwrap_or(0);
        let steps = largest.div_ceil(cfg.batch_size.min(largest).max(1));
        let mut rngs = StepRngs {
            dropout: GateRng::seed_from_u64(derive_seed(cfg.seed, 3)),
            perturb: GateRng::seed_from_u64(derive_seed(cfg.seed ^ cfg.perturbation.seed, 4)),
        };
        let mut opt = AdamW::new(cfg.adamw())?;
        let mut log = match &self.epoch_log {
            Some(p) => Some(open_log(p)?),
            None => None,
        };

        let mut epochs = Vec::with_capacity(cfg.epochs);
        let mut best: Option<(usize, f64, M)> = None;
        let mut counts_per_step: Option<TermCounts> = None;
        for epoch in 0..cfg.epochs {
            let start = Instant::now();
            let mut acc = LossBreakdown::default();
            for _ in 0..steps {
                model.zero_grad();
                let mut step = LossBreakdown::default();
                let mut counts = TermCounts::default();
                for (k, task) in batch_tasks.iter().enumerate() {
                    let rows = samplers[k].next(sizes[k]);
                    let batch = Batch {
                        task: task.clone(),
                        x: self.data.feature_batch(&rows)?,
                        y: self.data.label_batch(task, &rows)?,
                    };
                    let grads = {
                        let mut tape = Tape::new();
                        let (loss, b, c) = objective.loss(&model, &mut tape, &batch, &mut rngs)?;
                        step.add_scaled(&b, 1.0);
                        counts += c;
                        tape.backward(loss).map_err(|e| match e {
                            GateError::NonFinite(_) => GateError::Training(format!("non-finite loss in epoch {epoch}")),
                            other => other,
                        })?
                    };
                    model.accumulate(&grads)?;
                }
                match counts_per_step {
                    None => counts_per_step = Some(counts),
                    Some(c) if c != counts => {
                        return Err(GateError::Training(format!("term count changed between steps: {c:?} vs {counts:?}")));
                    }
                    _ => {}
                }
                let mut params = trainable_params(&mut model);
                if cfg.clip_norm > 0.0 {
                    clip_grad_norm(&mut params, cfg.clip_norm);
                }
                opt.step(&mut params)?;
                acc.add_scaled(&step, 1.0 / steps as f64);
            }
            let seconds = start.elapsed().as_secs_f64().max(1e-9);
            let val_rmse = self.validation_rmse(&model, val_tasks)?;
            let record = EpochRecord {
                epoch,
                steps,
                loss: acc,
                val_rmse,
                seconds,
            };
            log::debug!("epoch {epoch}: total {:.5} val {:?} ({seconds:.3}s)", acc.total, val_rmse);
            if let Some(f) = log.as_mut() {
                let line = serde_json::to_string(&record)?;
                writeln!(f, "{line}").map_err(|e| GateError::io(self.epoch_log.as_deref().unwrap_or(Path::new("")), e))?;
            }
            if cfg.checkpoint_policy == CheckpointPolicy::BestValidationRmse {
                if let Some(v) = val_rmse {
                    if best.as_ref().is_none_or(|(_, b, _)| v <= *b) {
                        best = Some((epoch, v, model.clone()));
                    }
                }
            }
            epochs.push(record);
        }

        let last = epochs.len() - 1;
        let (selected_epoch, model) = match best {
            Some((e, _, m)) => (e, m),
            None => (last, model),
        };
        let frozen_fingerprint = match fingerprint_before {
            Some(before) => {
                let after = model.param_fingerprint(&frozen);
                if after != before {
                    return Err(GateError::Training("frozen parameters changed during task addition".into()));
                }
                log::info!("frozen parameter hash unchanged: {after}");
                Some((before, after))
            }
            None => None,
        };
        let (sources, targets) = match regime {
            Regime::Addition => (Vec::new(), batch_tasks.to_vec()),
            _ => (batch_tasks.to_vec(), Vec::new()),
        };
        let record = RunRecord {
            model_kind: model.kind(),
            regime,
            sources: if regime == Regime::Addition {
                model.tasks().into_iter().filter(|t| !targets.contains(t)).collect()
            } else {
                sources
            },
            targets,
            seed: cfg.seed,
            validation_fold: cfg.validation_fold,
            terms_per_step: counts_per_step.unwrap_or_default(),
            trainable_params: model.trainable_param_count(),
            total_params: model.param_count(),
            trainable_networks: model.trainable_networks(),
            selected_val_rmse: epochs[selected_epoch].val_rmse,
            selected_epoch,
            epochs,
            frozen_fingerprint,
            checkpoint: None,
        };
        Ok(TrainOutcome { model, record })
    }
}

fn open_log(path: &Path) -> Result<File> {
    OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| GateError::io(path, e))
}

fn trainable_params<M: Model + ?Sized>(model: &mut M) -> Vec<&mut Tensor> {
    model
        .networks_mut()
        .into_iter()
        .filter(|(_, m)| !m.is_frozen())
        .flat_map(|(_, m)| m.named_params_mut().into_iter().map(|(_, t)| t))
        .collect()
}

/// Standardized labels and eval-mode predictions of `task` on `rows`,
/// predicted in chunks.
pub fn predict_rows<M: Model + ?Sized>(model: &M, data: &TaskDataset, task: &str, rows: &[usize]) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut y = Vec::with_capacity(rows.len());
    let mut y_hat = Vec::with_capacity(rows.len());
    for chunk in rows.chunks(1024) {
        let x = data.feature_batch(chunk)?;
        y.extend_from_slice(data.label_batch(task, chunk)?.values());
        y_hat.extend_from_slice(model.predict(task, &x)?.values());
    }
    Ok((y, y_hat))
}
