//! Central finite-difference check of tape gradients.

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::Result;

/// Anything that owns a set of parameter tensors.
pub trait ParamSet {
    fn param_refs(&self) -> Vec<&Tensor>;
    fn param_refs_mut(&mut self) -> Vec<&mut Tensor>;
}

impl ParamSet for Vec<Tensor> {
    fn param_refs(&self) -> Vec<&Tensor> {
        self.iter().collect()
    }

    fn param_refs_mut(&mut self) -> Vec<&mut Tensor> {
        self.iter_mut().collect()
    }
}

impl ParamSet for super::Mlp {
    fn param_refs(&self) -> Vec<&Tensor> {
        self.named_params().into_iter().map(|(_, t)| t).collect()
    }

    fn param_refs_mut(&mut self) -> Vec<&mut Tensor> {
        self.named_params_mut().into_iter().map(|(_, t)| t).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    /// Largest per-tensor relative error `‖a − n‖ / max(‖a‖, ‖n‖)`.
    pub max_rel_error: f64,
    /// Number of scalar entries probed.
    pub entries: usize,
}

/// Compares the tape gradient of `loss` with central differences of step `h`
/// for every tracked tensor in `params`. Tensors whose analytic and numeric
/// gradients both have norm below `1e-10` count as exact.
pub fn check_gradients<P, F>(params: &mut P, h: f64, loss: F) -> Result<GradCheck>
where
    P: ParamSet + ?Sized,
    F: for<'a> Fn(&'a P, &mut Tape<'a>) -> Result<Var>,
{
    let analytic: Vec<Option<Vec<f64>>> = {
        let mut tape = Tape::new();
        let l = loss(params, &mut tape)?;
        let grads = tape.backward(l)?;
        params
            .param_refs()
            .into_iter()
            .map(|t| t.is_tracked().then(|| grads.get_or_zeros(t)))
            .collect()
    };
    let eval = |p: &P| -> Result<f64> {
        let mut tape = Tape::new();
        let l = loss(p, &mut tape)?;
        Ok(tape.scalar(l))
    };

    let mut worst = 0.0f64;
    let mut entries = 0;
    for (k, a) in analytic.iter().enumerate() {
        let Some(a) = a else { continue };
        let mut numeric = vec![0.0; a.len()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let orig = params.param_refs()[k].values()[j];
            params.param_refs_mut()[k].values_mut()[j] = orig + h;
            let up = eval(params)?;
            params.param_refs_mut()[k].values_mut()[j] = orig - h;
            let down = eval(params)?;
            params.param_refs_mut()[k].values_mut()[j] = orig;
            *slot = (up - down) / (2.0 * h);
        }
        entries += a.len();
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let diff: Vec<f64> = a.iter().zip(&numeric).map(|(x, y)| x - y).collect();
        let scale = norm(a).max(norm(&numeric));
        if scale > 1e-10 {
            worst = worst.max(norm(&diff) / scale);
        }
    }
    Ok(GradCheck {
        max_rel_error: worst,
        entries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_passes() {
        let mut p = vec![Tensor::from_vec(vec![0.3, -1.2, 2.0]).unwrap()];
        p[0].set_tracked(true);
        let r = check_gradients(&mut p, 1e-5, |p, tape| {
            let x = tape.param(&p[0]);
            let sq = tape.mul(x, x)?;
            Ok(tape.sum(sq))
        })
        .unwrap();
        assert_eq!(r.entries, 3);
        assert!(r.max_rel_error < 1e-8);
    }

    #[test]
    fn wrong_gradient_is_detected() {
        // the value depends on p only through an untracked input
        let mut p = vec![Tensor::from_vec(vec![1.5]).unwrap()];
        p[0].set_tracked(true);
        let r = check_gradients(&mut p, 1e-5, |p, tape| {
            let _ = tape.param(&p[0]);
            let v = p[0].values()[0];
            Ok(tape.input_owned(1, 1, vec![v * v])?)
        })
        .unwrap();
        assert!(r.max_rel_error > 0.5);
    }
}
