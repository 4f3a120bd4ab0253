use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{GateError, Result};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

/// Identity of a tensor, used to route gradients from a tape back to the
/// parameter that was read into it. Clones share the id.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TensorId(u64);

impl TensorId {
    fn fresh() -> Self {
        TensorId(NEXT_ID.fetch_add(1, Ordering::Relaxed))
    }
}

/// Dense row-major array of `f64` values with an optional gradient buffer.
///
/// The gradient buffer is present exactly when the tensor is tracked; a
/// tape only computes gradients for tracked tensors.
#[derive(Debug, Clone)]
pub struct Tensor {
    id: TensorId,
    shape: Vec<usize>,
    values: Vec<f64>,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(GateError::shape("Tensor::new", "positive dims", &shape));
        }
        let n: usize = shape.iter().product();
        if n != values.len() {
            return Err(GateError::shape("Tensor::new", n, values.len()));
        }
        Ok(Tensor {
            id: TensorId::fresh(),
            shape,
            values,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let n = shape.iter().product();
        Tensor::new(shape, vec![0.0; n])
    }

    pub fn from_vec(values: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![values.len()], values)
    }

    pub fn matrix(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], values)
    }

    /// Builds a `[rows.len(), cols]` matrix from row slices.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map(Vec::len).unwrap_or(0);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(GateError::shape("Tensor::from_rows", "ragged rows", rows.len()));
        }
        Tensor::matrix(rows.len(), cols, rows.concat())
    }

    pub fn id(&self) -> TensorId {
        self.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// Rows and columns when viewed as a matrix: the last dimension is the
    /// column count, everything before it is folded into rows.
    pub fn dims2(&self) -> (usize, usize) {
        let cols = *self.shape.last().expect("shape is non-empty");
        (self.values.len() / cols, cols)
    }

    pub fn is_tracked(&self) -> bool {
        self.grad.is_some()
    }

    /// Enables or disables gradient tracking. Disabling drops the buffer.
    pub fn set_tracked(&mut self, tracked: bool) {
        match (tracked, self.grad.is_some()) {
            (true, false) => self.grad = Some(vec![0.0; self.values.len()]),
            (false, true) => self.grad = None,
            _ => {}
        }
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn grad_mut(&mut self) -> Option<&mut [f64]> {
        self.grad.as_deref_mut()
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Adds `delta` into the gradient buffer. No-op for untracked tensors.
    pub fn accumulate_grad(&mut self, delta: &[f64]) -> Result<()> {
        if let Some(g) = self.grad.as_mut() {
            if g.len() != delta.len() {
                return Err(GateError::shape("accumulate_grad", g.len(), delta.len()));
            }
            g.iter_mut().zip(delta).for_each(|(a, b)| *a += b);
        }
        Ok(())
    }

    pub fn check_finite(&self, what: &str) -> Result<()> {
        if self.values.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(GateError::NonFinite(what.to_string()))
        }
    }

    /// Copies the selected rows of a matrix view into a new tensor.
    pub fn select_rows(&self, rows: &[usize]) -> Result<Tensor> {
        let (n, cols) = self.dims2();
        let mut out = Vec::with_capacity(rows.len() * cols);
        for &r in rows {
            if r >= n {
                return Err(GateError::shape("select_rows", n, r));
            }
            out.extend_from_slice(&self.values[r * cols..(r + 1) * cols]);
        }
        Tensor::matrix(rows.len(), cols, out)
    }
}

impl PartialEq for Tensor {
    /// Value equality: ids and gradient buffers are ignored.
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.values == other.values
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_values() {
        assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::new(vec![0], vec![]).is_err());
        let t = Tensor::new(vec![2, 3], vec![0.0; 6]).unwrap();
        assert_eq!(t.dims2(), (2, 3));
    }

    #[test]
    fn tracking_toggles_grad_buffer() {
        let mut t = Tensor::from_vec(vec![1.0, 2.0]).unwrap();
        assert!(t.grad().is_none());
        t.accumulate_grad(&[1.0, 1.0]).unwrap();
        t.set_tracked(true);
        t.accumulate_grad(&[1.0, 2.0]).unwrap();
        t.accumulate_grad(&[1.0, 2.0]).unwrap();
        assert_eq!(t.grad().unwrap(), &[2.0, 4.0]);
        t.zero_grad();
        assert_eq!(t.grad().unwrap(), &[0.0, 0.0]);
        t.set_tracked(false);
        assert!(!t.is_tracked());
    }

    #[test]
    fn non_finite_is_reported() {
        let t = Tensor::from_vec(vec![1.0, f64::NAN]).unwrap();
        assert!(matches!(t.check_finite("x"), Err(GateError::NonFinite(_))));
    }

    #[test]
    fn clones_share_identity() {
        let t = Tensor::from_vec(vec![1.0]).unwrap();
        let u = Tensor::from_vec(vec![1.0]).unwrap();
        assert_eq!(t.clone().id(), t.id());
        assert_ne!(t.id(), u.id());
        assert_eq!(t, u);
    }
}
