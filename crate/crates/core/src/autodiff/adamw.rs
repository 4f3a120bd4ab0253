//! AdamW with decoupled weight decay.
//!
//! For each tracked parameter `p` with gradient `g` at step `t`:
//!
//! ```text
//! p ← p − lr·wd·p
//! m ← β₁·m + (1 − β₁)·g
//! v ← β₂·v + (1 − β₂)·g²
//! p ← p − lr · (m / (1 − β₁ᵗ)) / (√(v / (1 − β₂ᵗ)) + ε)
//! ```

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::tensor::{Tensor, TensorId};
use crate::error::{GateError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            learning_rate: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    step_count: u64,
    moments: HashMap<TensorId, Moments>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Result<Self> {
        let ok_beta = |b: f64| b > 0.0 && b < 1.0;
        if !ok_beta(config.beta1) || !ok_beta(config.beta2) {
            return Err(GateError::Config("AdamW betas must lie in (0, 1)".into()));
        }
        if !(config.learning_rate > 0.0) || config.epsilon <= 0.0 || config.weight_decay < 0.0 {
            return Err(GateError::Config("AdamW needs lr > 0, epsilon > 0, weight_decay >= 0".into()));
        }
        Ok(AdamW {
            config,
            step_count: 0,
            moments: HashMap::new(),
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn moments(&self, t: &Tensor) -> Option<&Moments> {
        self.moments.get(&t.id())
    }

    /// Restores persisted state for `t`.
    pub fn set_moments(&mut self, t: &Tensor, moments: Moments) -> Result<()> {
        if moments.m.len() != t.len() || moments.v.len() != t.len() {
            return Err(GateError::shape("AdamW moments", t.len(), moments.m.len()));
        }
        self.moments.insert(t.id(), moments);
        Ok(())
    }

    pub fn set_step_count(&mut self, n: u64) {
        self.step_count = n;
    }

    /// Applies one update to every parameter in `params`. Every parameter
    /// must be tracked with finite gradients; gradients are left in place.
    pub fn step(&mut self, params: &mut [&mut Tensor]) -> Result<()> {
        for (i, p) in params.iter().enumerate() {
            let g = p.grad().ok_or_else(|| GateError::MissingGradient(format!("#{i}")))?;
            if g.iter().any(|v| !v.is_finite()) {
                return Err(GateError::NonFinite(format!("gradient of parameter #{i}")));
            }
        }
        self.step_count += 1;
        let AdamWConfig {
            learning_rate: lr,
            beta1: b1,
            beta2: b2,
            epsilon: eps,
            weight_decay: wd,
        } = self.config;
        let t = self.step_count as i32;
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        for p in params.iter_mut() {
            let n = p.len();
            let mom = self.moments.entry(p.id()).or_insert_with(|| Moments {
                m: vec![0.0; n],
                v: vec![0.0; n],
            });
            let g = p.grad().expect("checked above").to_vec();
            let values = p.values_mut();
            for j in 0..n {
                values[j] -= lr * wd * values[j];
                mom.m[j] = b1 * mom.m[j] + (1.0 - b1) * g[j];
                mom.v[j] = b2 * mom.v[j] + (1.0 - b2) * g[j] * g[j];
                let mh = mom.m[j] / c1;
                let vh = mom.v[j] / c2;
                values[j] -= lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Scales gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(params: &mut [&mut Tensor], max_norm: f64) -> f64 {
    let norm = params
        .iter()
        .filter_map(|p| p.grad())
        .flat_map(|g| g.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let k = max_norm / norm;
        for p in params.iter_mut() {
            if let Some(g) = p.grad_mut() {
                g.iter_mut().for_each(|v| *v *= k);
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(value: f64, grad: f64) -> Tensor {
        let mut t = Tensor::from_vec(vec![value]).unwrap();
        t.set_tracked(true);
        t.accumulate_grad(&[grad]).unwrap();
        t
    }

    #[test]
    fn zero_gradient_without_decay_is_a_fixed_point() {
        let mut p = param(1.5, 0.0);
        let mut opt = AdamW::new(AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        })
        .unwrap();
        for _ in 0..10 {
            opt.step(&mut [&mut p]).unwrap();
        }
        assert_eq!(p.values(), &[1.5]);
        assert_eq!(opt.step_count(), 10);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // m̂ = g, v̂ = g², so the step is lr · g/(|g| + ε)
        let mut p = param(1.0, 1.0);
        let mut opt = AdamW::new(AdamWConfig {
            learning_rate: 0.1,
            weight_decay: 0.0,
            ..AdamWConfig::default()
        })
        .unwrap();
        opt.step(&mut [&mut p]).unwrap();
        let expect = 1.0 - 0.1 * 1.0 / (1.0 + 1e-8);
        assert!((p.values()[0] - expect).abs() < 1e-15);
        assert!((p.values()[0] - 0.9).abs() < 1e-8);
        assert_eq!(p.grad().unwrap(), &[1.0]);
    }

    #[test]
    fn decoupled_decay_shrinks_weights() {
        let mut p = param(2.0, 0.0);
        let mut opt = AdamW::new(AdamWConfig {
            learning_rate: 0.1,
            weight_decay: 0.5,
            ..AdamWConfig::default()
        })
        .unwrap();
        opt.step(&mut [&mut p]).unwrap();
        assert!((p.values()[0] - 2.0 * (1.0 - 0.05)).abs() < 1e-15);
    }

    #[test]
    fn missing_and_non_finite_gradients_are_errors() {
        let mut opt = AdamW::new(AdamWConfig::default()).unwrap();
        let mut untracked = Tensor::from_vec(vec![1.0]).unwrap();
        assert!(matches!(opt.step(&mut [&mut untracked]), Err(GateError::MissingGradient(_))));
        let mut bad = param(1.0, f64::INFINITY);
        assert!(matches!(opt.step(&mut [&mut bad]), Err(GateError::NonFinite(_))));
        assert_eq!(opt.step_count(), 0);
    }

    #[test]
    fn moments_track_parameter_shapes() {
        let mut p = Tensor::from_vec(vec![1.0, 2.0, 3.0]).unwrap();
        p.set_tracked(true);
        p.accumulate_grad(&[0.1, -0.2, 0.3]).unwrap();
        let mut opt = AdamW::new(AdamWConfig::default()).unwrap();
        opt.step(&mut [&mut p]).unwrap();
        let m = opt.moments(&p).unwrap();
        assert_eq!(m.m.len(), 3);
        assert_eq!(m.v.len(), 3);
    }

    #[test]
    fn clipping_bounds_global_norm() {
        let mut a = param(0.0, 3.0);
        let mut b = param(0.0, 4.0);
        let n = clip_grad_norm(&mut [&mut a, &mut b], 1.0);
        assert!((n - 5.0).abs() < 1e-12);
        assert!((a.grad().unwrap()[0] - 0.6).abs() < 1e-12);
        assert!((b.grad().unwrap()[0] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn invalid_config_rejected() {
        assert!(AdamW::new(AdamWConfig {
            beta1: 1.0,
            ..AdamWConfig::default()
        })
        .is_err());
    }
}
