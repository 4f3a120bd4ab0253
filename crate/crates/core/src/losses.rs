//! The five loss terms and their weighted total, built on a tape.
//!
//! All functions take tape nodes and return `1 × 1` nodes, so the same code
//! serves training, evaluation and gradient checks.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{GateError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub delta: f64,
    /// Per-source distance weight; absent entries count as 1.
    pub c_alpha: BTreeMap<String, f64>,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 1.0,
            beta: 1.0,
            gamma: 1.0,
            delta: 1.0,
            c_alpha: BTreeMap::new(),
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.alpha, self.beta, self.gamma, self.delta];
        if all.iter().chain(self.c_alpha.values()).any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(GateError::Config("loss weights must be finite and >= 0".into()));
        }
        Ok(())
    }

    pub fn c(&self, task: &str) -> f64 {
        match self.c_alpha.get(task) {
            Some(&c) => c,
            None => {
                log::trace!("no C_alpha entry for `{task}`, using 1");
                1.0
            }
        }
    }
}

/// Scalar values of each term for one step.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub reg: f64,
    pub auto: f64,
    pub cons: f64,
    pub map: f64,
    pub dis: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn add_scaled(&mut self, other: &LossBreakdown, k: f64) {
        self.reg += k * other.reg;
        self.auto += k * other.auto;
        self.cons += k * other.cons;
        self.map += k * other.map;
        self.dis += k * other.dis;
        self.total += k * other.total;
    }
}

/// Tape nodes for the five terms. Terms that do not apply to a regime are
/// `None` and contribute zero.
#[derive(Debug, Clone, Copy, Default)]
pub struct LossTerms {
    pub reg: Option<Var>,
    pub auto: Option<Var>,
    pub cons: Option<Var>,
    pub map: Option<Var>,
    pub dis: Option<Var>,
}

pub fn mse(tape: &mut Tape<'_>, a: Var, b: Var) -> Result<Var> {
    tape.mse(a, b)
}

fn sum_terms(tape: &mut Tape<'_>, terms: &[Var], weight: impl Fn(usize) -> f64) -> Result<Var> {
    let weighted: Vec<(Var, f64)> = terms.iter().enumerate().map(|(i, &v)| (v, weight(i))).collect();
    tape.weighted_sum(&weighted)
}

/// Mean over tasks of per-task MSE between predictions and labels.
pub fn regression_loss(tape: &mut Tape<'_>, pairs: &[(Var, Var)]) -> Result<Var> {
    if pairs.is_empty() {
        return Err(GateError::Empty("regression_loss", 1));
    }
    let k = pairs.len() as f64;
    let terms = pairs.iter().map(|&(p, y)| tape.mse(p, y)).collect::<Result<Vec<_>>>()?;
    sum_terms(tape, &terms, |_| 1.0 / k)
}

/// Sum over tasks of `MSE(z, ẑ)`.
pub fn autoencoder_loss(tape: &mut Tape<'_>, pairs: &[(Var, Var)]) -> Result<Var> {
    if pairs.is_empty() {
        return Err(GateError::Empty("autoencoder_loss", 1));
    }
    let terms = pairs.iter().map(|&(z, zh)| tape.mse(z, zh)).collect::<Result<Vec<_>>>()?;
    sum_terms(tape, &terms, |_| 1.0)
}

/// `Σ_α MSE(z'_α, z'_t)`.
pub fn consistency_loss(tape: &mut Tape<'_>, lf_sources: &[Var], lf_target: Var) -> Result<Var> {
    if lf_sources.is_empty() {
        return Err(GateError::Empty("consistency_loss", 1));
    }
    let terms = lf_sources
        .iter()
        .map(|&z| tape.mse(z, lf_target))
        .collect::<Result<Vec<_>>>()?;
    sum_terms(tape, &terms, |_| 1.0)
}

/// `Σ_α MSE(y_t, ŷ_{α→t})`.
pub fn mapping_loss(tape: &mut Tape<'_>, y_t: Var, detours: &[Var]) -> Result<Var> {
    if detours.is_empty() {
        return Err(GateError::Empty("mapping_loss", 1));
    }
    let terms = detours.iter().map(|&d| tape.mse(y_t, d)).collect::<Result<Vec<_>>>()?;
    sum_terms(tape, &terms, |_| 1.0)
}

/// Per-sample Euclidean distance `|b − a|` between LF-frame points,
/// `[n, d] × [n, d] → [n, 1]`.
pub fn lf_displacement(tape: &mut Tape<'_>, center: Var, perturbed: Var) -> Result<Var> {
    let diff = tape.sub(perturbed, center)?;
    Ok(tape.row_norm(diff))
}

/// `(1/M) Σ_α C_α Σ_i MSE(sⁱ_α, sⁱ_t)`. `sources` pairs each source task id
/// with its `M` displacement nodes; `target` holds the target's `M` nodes.
pub fn distance_loss(
    tape: &mut Tape<'_>,
    sources: &[(&str, Vec<Var>)],
    target: &[Var],
    weights: &LossWeights,
) -> Result<Var> {
    if sources.is_empty() || target.is_empty() {
        return Err(GateError::Empty("distance_loss", 1));
    }
    let m = target.len();
    let mut terms = Vec::with_capacity(sources.len() * m);
    for (task, s) in sources {
        if s.len() != m {
            return Err(GateError::shape("distance_loss perturbation count", m, s.len()));
        }
        let c = weights.c(task);
        for (&si, &ti) in s.iter().zip(target) {
            terms.push((tape.mse(si, ti)?, c / m as f64));
        }
    }
    tape.weighted_sum(&terms)
}

/// `reg + α·auto + β·cons + γ·map + δ·dis`, with the per-term values.
pub fn total_loss(tape: &mut Tape<'_>, terms: LossTerms, w: &LossWeights) -> Result<(Var, LossBreakdown)> {
    let parts = [
        (terms.reg, 1.0),
        (terms.auto, w.alpha),
        (terms.cons, w.beta),
        (terms.map, w.gamma),
        (terms.dis, w.delta),
    ];
    let present: Vec<(Var, f64)> = parts.iter().filter_map(|&(v, k)| v.map(|v| (v, k))).collect();
    if present.is_empty() {
        return Err(GateError::Empty("total_loss", 1));
    }
    let total = tape.weighted_sum(&present)?;
    let val = |v: Option<Var>| v.map(|v| tape.scalar(v)).unwrap_or(0.0);
    let breakdown = LossBreakdown {
        reg: val(terms.reg),
        auto: val(terms.auto),
        cons: val(terms.cons),
        map: val(terms.map),
        dis: val(terms.dis),
        total: tape.scalar(total),
    };
    Ok((total, breakdown))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::check_gradients;
    use crate::autodiff::{GateRng, Tensor};
    use rand::{Rng, SeedableRng};

    fn row(tape: &mut Tape<'_>, v: &[f64]) -> Var {
        tape.input_owned(1, v.len(), v.to_vec()).unwrap()
    }

    #[test]
    fn mse_examples() {
        let mut t = Tape::new();
        let a = row(&mut t, &[1.0, 2.0]);
        let b = row(&mut t, &[1.0, 3.0]);
        let l = mse(&mut t, a, b).unwrap();
        assert_eq!(t.scalar(l), 0.5);
        let same = mse(&mut t, a, a).unwrap();
        assert_eq!(t.scalar(same), 0.0);
        let z = row(&mut t, &[0.0]);
        let two = row(&mut t, &[2.0]);
        let l = mse(&mut t, z, two).unwrap();
        assert_eq!(t.scalar(l), 4.0);
        assert!(mse(&mut t, a, z).is_err());
    }

    /// Pair of 1-element rows whose MSE is exactly `m` (for `m` a square).
    fn pair_with_mse(t: &mut Tape<'_>, root: f64) -> (Var, Var) {
        (row(t, &[0.0]), row(t, &[root]))
    }

    #[test]
    fn regression_is_a_mean_over_tasks() {
        let mut t = Tape::new();
        let a = row(&mut t, &[0.0, 0.0]);
        let b = row(&mut t, &[0.2f64.sqrt(), 0.2f64.sqrt()]);
        let c = row(&mut t, &[0.6f64.sqrt(), 0.6f64.sqrt()]);
        let l = regression_loss(&mut t, &[(b, a), (c, a)]).unwrap();
        assert!((t.scalar(l) - 0.4).abs() < 1e-15);
        let one = regression_loss(&mut t, &[(c, a)]).unwrap();
        let plain = t.mse(c, a).unwrap();
        assert_eq!(t.scalar(one), t.scalar(plain));
        assert!(regression_loss(&mut t, &[]).is_err());
    }

    #[test]
    fn sums_over_tasks() {
        let mut t = Tape::new();
        let (z, zh) = pair_with_mse(&mut t, 0.3f64.sqrt());
        let l = autoencoder_loss(&mut t, &[(z, zh), (z, zh)]).unwrap();
        assert!((t.scalar(l) - 0.6).abs() < 1e-15);

        let src = row(&mut t, &[1.0, 1.0]);
        let tgt = row(&mut t, &[0.0, 0.0]);
        let l = consistency_loss(&mut t, &[src], tgt).unwrap();
        assert_eq!(t.scalar(l), 1.0);
        let l3 = consistency_loss(&mut t, &[src, src, src], tgt).unwrap();
        assert_eq!(t.scalar(l3), 3.0);
        let l0 = consistency_loss(&mut t, &[tgt], tgt).unwrap();
        assert_eq!(t.scalar(l0), 0.0);

        let y = row(&mut t, &[1.0]);
        let d = row(&mut t, &[3.0]);
        let l = mapping_loss(&mut t, y, &[d]).unwrap();
        assert_eq!(t.scalar(l), 4.0);
        let l2 = mapping_loss(&mut t, y, &[d, d]).unwrap();
        assert_eq!(t.scalar(l2), 8.0);
        assert!(mapping_loss(&mut t, y, &[]).is_err());
        assert!(consistency_loss(&mut t, &[], y).is_err());
        assert!(autoencoder_loss(&mut t, &[]).is_err());
    }

    #[test]
    fn displacement_is_euclidean() {
        let mut t = Tape::new();
        let c = row(&mut t, &[0.0, 0.0]);
        let p = row(&mut t, &[3.0, 4.0]);
        let s = lf_displacement(&mut t, c, p).unwrap();
        assert_eq!(t.value(s), &[5.0]);
        let back = lf_displacement(&mut t, p, c).unwrap();
        assert_eq!(t.value(back), &[5.0]);
        let zero = lf_displacement(&mut t, p, p).unwrap();
        assert_eq!(t.value(zero), &[0.0]);
    }

    #[test]
    fn distance_loss_examples() {
        let mut t = Tape::new();
        let zero = row(&mut t, &[0.0]);
        let (_, a) = pair_with_mse(&mut t, 0.4f64.sqrt());
        let (_, b) = pair_with_mse(&mut t, 0.8f64.sqrt());
        let w = LossWeights::default();
        let l = distance_loss(&mut t, &[("s", vec![a, b])], &[zero, zero], &w).unwrap();
        assert!((t.scalar(l) - 0.6).abs() < 1e-15);

        let mut w2 = w.clone();
        w2.c_alpha.insert("s".into(), 2.0);
        let l2 = distance_loss(&mut t, &[("s", vec![a, b])], &[zero, zero], &w2).unwrap();
        assert!((t.scalar(l2) - 1.2).abs() < 1e-15);

        let same = distance_loss(&mut t, &[("s", vec![zero, zero])], &[zero, zero], &w).unwrap();
        assert_eq!(t.scalar(same), 0.0);
        assert!(distance_loss(&mut t, &[("s", vec![a])], &[zero, zero], &w).is_err());
    }

    #[test]
    fn total_examples() {
        let mut t = Tape::new();
        let v: Vec<Var> = (1..=5).map(|k| row(&mut t, &[k as f64])).collect();
        let terms = LossTerms {
            reg: Some(v[0]),
            auto: Some(v[1]),
            cons: Some(v[2]),
            map: Some(v[3]),
            dis: Some(v[4]),
        };
        let (_, b) = total_loss(&mut t, terms, &LossWeights::default()).unwrap();
        assert_eq!(b.total, 15.0);
        let only_reg = LossWeights {
            alpha: 0.0,
            beta: 0.0,
            gamma: 0.0,
            delta: 0.0,
            ..LossWeights::default()
        };
        let (_, b) = total_loss(&mut t, terms, &only_reg).unwrap();
        assert_eq!(b.total, b.reg);
        let d2 = LossWeights {
            delta: 2.0,
            ..LossWeights::default()
        };
        let (_, b2) = total_loss(&mut t, terms, &d2).unwrap();
        assert_eq!(b2.total, 20.0);
    }

    fn random_rows(rng: &mut GateRng, n: usize, d: usize) -> Tensor {
        let mut t = Tensor::matrix(n, d, (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        t.set_tracked(true);
        t
    }

    #[test]
    fn every_loss_passes_finite_differences() {
        let mut rng = GateRng::seed_from_u64(11);
        for _ in 0..5 {
            let n = rng.random_range(1..=4);
            let d = rng.random_range(1..=8);
            let mut p: Vec<Tensor> = (0..6).map(|_| random_rows(&mut rng, n, d)).collect();
            let mut w = LossWeights::default();
            w.c_alpha.insert("b".into(), 0.7);
            let r = check_gradients(&mut p, 1e-5, |p, tape| {
                let v: Vec<Var> = p.iter().map(|t| tape.param(t)).collect();
                let reg = regression_loss(tape, &[(v[0], v[1]), (v[2], v[3])])?;
                let auto = autoencoder_loss(tape, &[(v[0], v[2]), (v[4], v[5])])?;
                let cons = consistency_loss(tape, &[v[1], v[3]], v[5])?;
                let map = mapping_loss(tape, v[4], &[v[0], v[2]])?;
                let s: Vec<Var> = (0..3)
                    .map(|i| lf_displacement(tape, v[i], v[i + 3]))
                    .collect::<Result<_>>()?;
                let dis = distance_loss(tape, &[("a", vec![s[0], s[1]]), ("b", vec![s[1], s[2]])], &[s[2], s[0]], &w)?;
                let terms = LossTerms {
                    reg: Some(reg),
                    auto: Some(auto),
                    cons: Some(cons),
                    map: Some(map),
                    dis: Some(dis),
                };
                Ok(total_loss(tape, terms, &w)?.0)
            })
            .unwrap();
            assert!(r.max_rel_error < 1e-4, "{r:?}");
        }
    }
}
