//! Perturbation points around each sample and their LF-frame displacements.
//!
//! Perturbations are drawn once per batch and shared by every task, so the
//! displacement sets of different tasks describe the same neighbourhood.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{GateRng, Mode, Tape, Tensor, Var};
use crate::error::{GateError, Result};
use crate::losses::lf_displacement;
use crate::model::{GateModel, RegressionUnit};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbDistribution {
    Gaussian,
    UniformBall,
}

/// Where perturbations are applied: the shared embedding (default) or the
/// raw input features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbSite {
    Embedding,
    Input,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PerturbationConfig {
    pub count_m: usize,
    /// Scale relative to the per-feature standard deviation.
    pub sigma: f64,
    pub distribution: PerturbDistribution,
    pub site: PerturbSite,
    pub seed: u64,
}

impl Default for PerturbationConfig {
    fn default() -> Self {
        PerturbationConfig {
            count_m: 5,
            sigma: 0.01,
            distribution: PerturbDistribution::Gaussian,
            site: PerturbSite::Embedding,
            seed: 0,
        }
    }
}

impl PerturbationConfig {
    /// `sigma == 0` is accepted and yields exact copies.
    pub fn validate(&self) -> Result<()> {
        if self.count_m == 0 {
            return Err(GateError::Config("perturbation count_m must be >= 1".into()));
        }
        if !(self.sigma.is_finite() && self.sigma >= 0.0) {
            return Err(GateError::Config(format!("perturbation sigma {} must be >= 0", self.sigma)));
        }
        Ok(())
    }
}

/// Population standard deviation of each column; zero columns map to 1 so
/// they still receive a perturbation.
pub fn column_std(values: &[f64], cols: usize) -> Vec<f64> {
    let rows = values.len() / cols;
    let mut mean = vec![0.0; cols];
    for row in values.chunks_exact(cols) {
        mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= rows as f64);
    let mut var = vec![0.0; cols];
    for row in values.chunks_exact(cols) {
        for j in 0..cols {
            let d = row[j] - mean[j];
            var[j] += d * d;
        }
    }
    var.into_iter()
        .map(|v| {
            let s = (v / rows as f64).sqrt();
            if s > 0.0 && s.is_finite() {
                s
            } else {
                1.0
            }
        })
        .collect()
}

/// `M` additive noise matrices of shape `[rows, scale.len()]`.
pub fn sample_noise(rows: usize, scale: &[f64], cfg: &PerturbationConfig, rng: &mut GateRng) -> Vec<Vec<f64>> {
    let cols = scale.len();
    (0..cfg.count_m)
        .map(|_| {
            if cfg.sigma == 0.0 {
                return vec![0.0; rows * cols];
            }
            let mut eps = Vec::with_capacity(rows * cols);
            for _ in 0..rows {
                let mut row: Vec<f64> = (0..cols).map(|_| rng.sample(StandardNormal)).collect();
                if cfg.distribution == PerturbDistribution::UniformBall {
                    let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
                    let radius = rng.random::<f64>().powf(1.0 / cols as f64);
                    row.iter_mut().for_each(|v| *v *= radius / norm);
                }
                eps.extend(row.iter().zip(scale).map(|(e, s)| cfg.sigma * s * e));
            }
            eps
        })
        .collect()
}

/// `xⁱ = x + εⁱ` for `i = 1..M`, with `ε` scaled by `sigma · scale[j]`.
pub fn sample_perturbations(x: &Tensor, scale: &[f64], cfg: &PerturbationConfig, rng: &mut GateRng) -> Result<Vec<Tensor>> {
    cfg.validate()?;
    x.check_finite("perturbation input")?;
    let (rows, cols) = x.dims2();
    if scale.len() != cols {
        return Err(GateError::shape("sample_perturbations scale", cols, scale.len()));
    }
    sample_noise(rows, scale, cfg, rng)
        .into_iter()
        .map(|eps| {
            let v = x.values().iter().zip(&eps).map(|(a, b)| a + b).collect();
            Tensor::matrix(rows, cols, v)
        })
        .collect()
}

/// Routes the center batch and its perturbations through a unit's encoder
/// and transfer in eval mode and returns the `M` displacement columns
/// `[n, 1]`. All `M + 1` batches share one stacked forward pass.
pub fn probe_displacements<'a>(
    tape: &mut Tape<'a>,
    unit: &'a RegressionUnit,
    stacked: Var,
    rows: usize,
    count_m: usize,
    rng: &mut GateRng,
) -> Result<Vec<Var>> {
    let (_, lf) = unit.lf_point(tape, stacked, Mode::Eval, rng)?;
    let center = tape.slice_rows(lf, 0, rows)?;
    (1..=count_m)
        .map(|i| {
            let p = tape.slice_rows(lf, i * rows, rows)?;
            lf_displacement(tape, center, p)
        })
        .collect()
}

/// Stacks `[center; center + ε¹; …; center + εᴹ]` on the tape.
pub fn stack_perturbed(tape: &mut Tape<'_>, center: Var, noise: &[Vec<f64>]) -> Result<Var> {
    let mut parts = vec![center];
    for eps in noise {
        parts.push(tape.add_const(center, eps)?);
    }
    tape.concat_rows(&parts)
}

/// Displacements `sⁱ[n] = |z'(x[n]) − z'(xⁱ[n])|` for `task`, computed in
/// eval mode from raw feature batches. Returns `M` tensors of shape `[n, 1]`.
pub fn lf_displacements(model: &GateModel, task: &str, x: &Tensor, x_perturbed: &[Tensor]) -> Result<Vec<Tensor>> {
    let unit = model.unit(task)?;
    if x_perturbed.is_empty() {
        return Err(GateError::Empty("lf_displacements", 1));
    }
    for p in x_perturbed {
        if p.shape() != x.shape() {
            return Err(GateError::shape("lf_displacements", x.shape(), p.shape()));
        }
    }
    let (rows, _) = x.dims2();
    let mut rng = rand::SeedableRng::seed_from_u64(0);
    let mut tape = Tape::new();
    let inputs: Vec<Var> = std::iter::once(x).chain(x_perturbed).map(|t| tape.input(t)).collect();
    let stacked = tape.concat_rows(&inputs)?;
    let e = model.embed(&mut tape, stacked, Mode::Eval, &mut rng)?;
    let s = probe_displacements(&mut tape, unit, e, rows, x_perturbed.len(), &mut rng)?;
    Ok(s.into_iter().map(|v| tape.to_tensor(v)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Mlp;
    use crate::model::ModelConfig;
    use rand::SeedableRng;

    fn cfg(m: usize, sigma: f64) -> PerturbationConfig {
        PerturbationConfig {
            count_m: m,
            sigma,
            ..PerturbationConfig::default()
        }
    }

    fn identity_model() -> GateModel {
        let config = ModelConfig {
            input_dim: 2,
            backbone_hidden: vec![],
            embedding_dim: 2,
            encoder_hidden: vec![],
            latent_dim: 2,
            transfer_hidden: vec![],
            ..ModelConfig::default()
        };
        let mut m = GateModel::new(config, &["a".to_string()], 0).unwrap();
        *m.backbone_mut() = Mlp::identity(2).unwrap();
        let u = m.unit_mut("a").unwrap();
        u.encoder = Mlp::identity(2).unwrap();
        u.transfer = Mlp::identity(2).unwrap();
        m
    }

    #[test]
    fn zero_sigma_is_exact() {
        let x = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut rng = GateRng::seed_from_u64(1);
        let p = sample_perturbations(&x, &[1.0, 1.0], &cfg(5, 0.0), &mut rng).unwrap();
        assert_eq!(p.len(), 5);
        assert!(p.iter().all(|t| *t == x));
    }

    #[test]
    fn default_count_is_five() {
        let x = Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap();
        let mut rng = GateRng::seed_from_u64(1);
        let p = sample_perturbations(&x, &[1.0, 1.0], &PerturbationConfig::default(), &mut rng).unwrap();
        assert_eq!(p.len(), 5);
    }

    #[test]
    fn gaussian_scale_matches_sigma_times_std() {
        let n = 20_000;
        let x = Tensor::matrix(n, 2, vec![0.0; 2 * n]).unwrap();
        let mut rng = GateRng::seed_from_u64(5);
        let p = sample_perturbations(&x, &[2.0, 0.5], &cfg(1, 0.1), &mut rng).unwrap();
        let std = column_std(p[0].values(), 2);
        assert!((std[0] / 0.2 - 1.0).abs() < 0.05, "{std:?}");
        assert!((std[1] / 0.05 - 1.0).abs() < 0.05, "{std:?}");
    }

    #[test]
    fn uniform_ball_stays_inside_radius() {
        let x = Tensor::matrix(500, 3, vec![0.0; 1500]).unwrap();
        let c = PerturbationConfig {
            distribution: PerturbDistribution::UniformBall,
            ..cfg(2, 0.5)
        };
        let mut rng = GateRng::seed_from_u64(5);
        for t in sample_perturbations(&x, &[1.0; 3], &c, &mut rng).unwrap() {
            for row in t.values().chunks(3) {
                assert!(row.iter().map(|v| v * v).sum::<f64>().sqrt() <= 0.5 + 1e-12);
            }
        }
    }

    #[test]
    fn same_seed_same_perturbations() {
        let x = Tensor::matrix(3, 2, vec![0.5; 6]).unwrap();
        let a = sample_perturbations(&x, &[1.0, 1.0], &cfg(3, 0.1), &mut GateRng::seed_from_u64(8)).unwrap();
        let b = sample_perturbations(&x, &[1.0, 1.0], &cfg(3, 0.1), &mut GateRng::seed_from_u64(8)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn non_finite_input_rejected() {
        let x = Tensor::matrix(1, 1, vec![f64::NAN]).unwrap();
        assert!(sample_perturbations(&x, &[1.0], &cfg(1, 0.1), &mut GateRng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn identity_pipeline_gives_euclidean_displacement() {
        let m = identity_model();
        let x = Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap();
        let xp = Tensor::matrix(1, 2, vec![3.0, 4.0]).unwrap();
        let s = lf_displacements(&m, "a", &x, &[xp]).unwrap();
        assert_eq!(s[0].values(), &[5.0]);
        let s = lf_displacements(&m, "a", &x, &[x.clone(), x.clone()]).unwrap();
        assert!(s.iter().all(|t| t.values() == [0.0]));
        assert!(lf_displacements(&m, "zz", &x, &[x.clone()]).is_err());
    }

    #[test]
    fn displacements_follow_batch_order() {
        let config = ModelConfig {
            input_dim: 3,
            backbone_hidden: vec![4],
            embedding_dim: 4,
            encoder_hidden: vec![4],
            latent_dim: 3,
            transfer_hidden: vec![3],
            ..ModelConfig::default()
        };
        let m = GateModel::new(config, &["a".to_string()], 3).unwrap();
        let x = Tensor::matrix(3, 3, vec![0.1, 0.2, 0.3, -1.0, 0.5, 0.0, 2.0, -0.3, 0.7]).unwrap();
        let mut rng = GateRng::seed_from_u64(2);
        let xp = sample_perturbations(&x, &[1.0; 3], &cfg(2, 0.1), &mut rng).unwrap();
        let s = lf_displacements(&m, "a", &x, &xp).unwrap();
        let order = [2, 0, 1];
        let xr = x.select_rows(&order).unwrap();
        let xpr: Vec<Tensor> = xp.iter().map(|t| t.select_rows(&order).unwrap()).collect();
        let sr = lf_displacements(&m, "a", &xr, &xpr).unwrap();
        for (a, b) in s.iter().zip(&sr) {
            for (k, &o) in order.iter().enumerate() {
                assert!((a.values()[o] - b.values()[k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn smaller_sigma_smaller_displacement() {
        let config = ModelConfig {
            input_dim: 4,
            backbone_hidden: vec![6],
            embedding_dim: 6,
            encoder_hidden: vec![5],
            latent_dim: 4,
            transfer_hidden: vec![4],
            ..ModelConfig::default()
        };
        let m = GateModel::new(config, &["a".to_string()], 3).unwrap();
        let mut rng = GateRng::seed_from_u64(4);
        let x = Tensor::matrix(64, 4, (0..256).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let mut last = f64::INFINITY;
        for sigma in [0.1, 0.05, 0.025] {
            let xp = sample_perturbations(&x, &[1.0; 4], &cfg(5, sigma), &mut GateRng::seed_from_u64(7)).unwrap();
            let s = lf_displacements(&m, "a", &x, &xp).unwrap();
            let mean = s.iter().flat_map(|t| t.values()).sum::<f64>() / (5.0 * 64.0);
            assert!(mean <= last);
            last = mean;
        }
    }
}
