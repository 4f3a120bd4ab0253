//! Define-by-run tape for reverse-mode differentiation over row-major
//! matrices.
//!
//! Every value on the tape is a `rows × cols` matrix; scalars are `1 × 1`.
//! Parameters are borrowed from their owning [`Tensor`] rather than copied,
//! so a tape lives no longer than the model it reads. [`Tape::backward`]
//! consumes the tape: one backward pass per recorded graph.

use std::borrow::Cow;
use std::collections::HashMap;

use super::tensor::{Tensor, TensorId};
use crate::error::{GateError, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(TensorId),
    /// `x · wᵀ + b` with `w` stored `[out, in]` and `b` as `[1, out]`.
    Linear { x: Var, w: Var, b: Var },
    Relu(Var),
    Tanh(Var),
    /// Elementwise product with a constant of the same shape.
    MulConst(Var, Vec<f64>),
    /// Addition of a constant; the gradient passes through unchanged.
    AddConst(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Mean(Var),
    Mse(Var, Var),
    RowNorm(Var),
    ConcatRows(Vec<Var>),
    SliceRows { x: Var, start: usize },
    WeightedSum(Vec<(Var, f64)>),
}

#[derive(Debug)]
struct Node<'a> {
    value: Cow<'a, [f64]>,
    rows: usize,
    cols: usize,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
    params: HashMap<TensorId, Var>,
}

/// Gradients of a scalar with respect to every tracked parameter that
/// took part in its computation.
#[derive(Debug, Default)]
pub struct Gradients {
    by_param: HashMap<TensorId, Vec<f64>>,
}

impl Gradients {
    pub fn get(&self, tensor: &Tensor) -> Option<&[f64]> {
        self.by_param.get(&tensor.id()).map(Vec::as_slice)
    }

    /// Gradient for `tensor`, or zeros when it did not influence the loss.
    pub fn get_or_zeros(&self, tensor: &Tensor) -> Vec<f64> {
        self.get(tensor)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; tensor.len()])
    }

    pub fn len(&self) -> usize {
        self.by_param.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_param.is_empty()
    }
}

/// Safe wrapper over `dgemm`: `c = alpha · a · b + beta · c` where `a` is
/// `m × k` and `b` is `k × n`, each given with explicit (row, col) strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (usize, usize),
    b: &[f64],
    b_strides: (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    let last = |rows: usize, cols: usize, (rs, cs): (usize, usize)| {
        if rows == 0 || cols == 0 {
            0
        } else {
            (rows - 1) * rs + (cols - 1) * cs + 1
        }
    };
    assert!(a.len() >= last(m, k, a_strides));
    assert!(b.len() >= last(k, n, b_strides));
    assert!(c.len() >= m * n);
    // SAFETY: the asserts above bound every index dgemm touches given the
    // strides, and `c` does not alias `a` or `b` (distinct borrows).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'a, [f64]>, rows: usize, cols: usize, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(value.len(), rows * cols);
        self.nodes.push(Node {
            value,
            rows,
            cols,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node<'a> {
        &self.nodes[v.0]
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    pub fn dims(&self, v: Var) -> (usize, usize) {
        let n = self.node(v);
        (n.rows, n.cols)
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Value of a `1 × 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        let n = self.node(v);
        debug_assert_eq!(n.value.len(), 1);
        n.value[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::matrix(n.rows, n.cols, n.value.to_vec()).expect("tape nodes are non-empty")
    }

    /// Records an untracked input. Vectors become single-row matrices.
    pub fn input(&mut self, t: &Tensor) -> Var {
        let (r, c) = t.dims2();
        self.push(Cow::Owned(t.values().to_vec()), r, c, Op::Leaf, false)
    }

    pub fn input_owned(&mut self, rows: usize, cols: usize, values: Vec<f64>) -> Result<Var> {
        if rows * cols != values.len() || rows == 0 || cols == 0 {
            return Err(GateError::shape("Tape::input", rows * cols, values.len()));
        }
        Ok(self.push(Cow::Owned(values), rows, cols, Op::Leaf, false))
    }

    /// Records a parameter by reference. Gradients are produced for it when
    /// the tensor is tracked. Reading the same tensor twice yields the same
    /// node, so repeated uses accumulate into one gradient.
    pub fn param(&mut self, t: &'a Tensor) -> Var {
        if let Some(&v) = self.params.get(&t.id()) {
            return v;
        }
        let (r, c) = t.dims2();
        let v = self.push(Cow::Borrowed(t.values()), r, c, Op::Param(t.id()), t.is_tracked());
        self.params.insert(t.id(), v);
        v
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (bs, inp) = self.dims(x);
        let (out, w_in) = self.dims(w);
        if inp != w_in {
            return Err(GateError::shape("linear", w_in, inp));
        }
        if self.node(b).value.len() != out {
            return Err(GateError::shape("linear bias", out, self.node(b).value.len()));
        }
        let mut y = vec![0.0; bs * out];
        {
            let bias = &self.node(b).value;
            for row in y.chunks_exact_mut(out) {
                row.copy_from_slice(bias);
            }
        }
        gemm(bs, inp, out, &self.node(x).value, (inp, 1), &self.node(w).value, (1, inp), 1.0, &mut y);
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(Cow::Owned(y), bs, out, Op::Linear { x, w, b }, rg))
    }

    fn map_unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let (r, c) = self.dims(x);
        let y = self.node(x).value.iter().map(|&v| f(v)).collect();
        let rg = self.rg(x);
        self.push(Cow::Owned(y), r, c, op, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map_unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.map_unary(x, f64::tanh, Op::Tanh(x))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.map_unary(x, |v| v * s, Op::Scale(x, s))
    }

    pub fn mul_const(&mut self, x: Var, c: Vec<f64>) -> Result<Var> {
        let (r, cols) = self.dims(x);
        if c.len() != r * cols {
            return Err(GateError::shape("mul_const", r * cols, c.len()));
        }
        let y = self.node(x).value.iter().zip(&c).map(|(a, b)| a * b).collect();
        let rg = self.rg(x);
        Ok(self.push(Cow::Owned(y), r, cols, Op::MulConst(x, c), rg))
    }

    pub fn add_const(&mut self, x: Var, c: &[f64]) -> Result<Var> {
        let (r, cols) = self.dims(x);
        if c.len() != r * cols {
            return Err(GateError::shape("add_const", r * cols, c.len()));
        }
        let y = self.node(x).value.iter().zip(c).map(|(a, b)| a + b).collect();
        let rg = self.rg(x);
        Ok(self.push(Cow::Owned(y), r, cols, Op::AddConst(x), rg))
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        if self.dims(a) != self.dims(b) {
            return Err(GateError::shape(name, self.dims(a), self.dims(b)));
        }
        let (r, c) = self.dims(a);
        let y = self
            .node(a)
            .value
            .iter()
            .zip(self.node(b).value.iter())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Cow::Owned(y), r, c, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.node(x).value.iter().sum::<f64>();
        let rg = self.rg(x);
        self.push(Cow::Owned(vec![s]), 1, 1, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.node(x).value.len() as f64;
        let s = self.node(x).value.iter().sum::<f64>() / n;
        let rg = self.rg(x);
        self.push(Cow::Owned(vec![s]), 1, 1, Op::Mean(x), rg)
    }

    /// Mean of squared elementwise differences, as a `1 × 1` node.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.dims(a) != self.dims(b) {
            return Err(GateError::shape("mse", self.dims(a), self.dims(b)));
        }
        let va = &self.node(a).value;
        let vb = &self.node(b).value;
        let s = va.iter().zip(vb.iter()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / va.len() as f64;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Cow::Owned(vec![s]), 1, 1, Op::Mse(a, b), rg))
    }

    /// Euclidean norm of each row: `[rows, cols] → [rows, 1]`.
    pub fn row_norm(&mut self, x: Var) -> Var {
        let (r, c) = self.dims(x);
        let y = self
            .node(x)
            .value
            .chunks_exact(c)
            .map(|row| row.iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        let rg = self.rg(x);
        self.push(Cow::Owned(y), r, 1, Op::RowNorm(x), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(GateError::Empty("concat_rows", 1))?;
        let cols = self.dims(first).1;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, c) = self.dims(p);
            if c != cols {
                return Err(GateError::shape("concat_rows", cols, c));
            }
            rows += r;
            out.extend_from_slice(&self.node(p).value);
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Cow::Owned(out), rows, cols, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims(x);
        if len == 0 || start + len > r {
            return Err(GateError::shape("slice_rows", r, start + len));
        }
        let y = self.node(x).value[start * c..(start + len) * c].to_vec();
        let rg = self.rg(x);
        Ok(self.push(Cow::Owned(y), len, c, Op::SliceRows { x, start }, rg))
    }

    /// `Σ wᵢ · xᵢ` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let mut s = 0.0;
        for &(v, w) in terms {
            if self.node(v).value.len() != 1 {
                return Err(GateError::NotScalar(vec![self.node(v).rows, self.node(v).cols]));
            }
            s += w * self.node(v).value[0];
        }
        let rg = terms.iter().any(|&(v, _)| self.rg(v));
        Ok(self.push(Cow::Owned(vec![s]), 1, 1, Op::WeightedSum(terms.to_vec()), rg))
    }

    /// Reverse sweep from a scalar `loss`, returning gradients for every
    /// tracked parameter reachable from it.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        let ln = self.node(loss);
        if ln.value.len() != 1 {
            return Err(GateError::NotScalar(vec![ln.rows, ln.cols]));
        }
        if !ln.value[0].is_finite() {
            return Err(GateError::NonFinite("loss".into()));
        }
        let nodes = self.nodes;
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(nodes.len());
        grads.resize_with(nodes.len(), || None);
        if !nodes[loss.0].requires_grad {
            return Ok(Gradients::default());
        }
        grads[loss.0] = Some(vec![1.0]);

        fn slot<'g>(grads: &'g mut [Option<Vec<f64>>], nodes: &[Node<'_>], v: Var) -> &'g mut Vec<f64> {
            grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()])
        }

        let mut by_param = HashMap::new();
        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => {
                    by_param.insert(*id, g);
                }
                Op::Linear { x, w, b } => {
                    let (bs, out) = (node.rows, node.cols);
                    let inp = nodes[x.0].cols;
                    if nodes[x.0].requires_grad {
                        let wv = &nodes[w.0].value;
                        gemm(bs, out, inp, &g, (out, 1), wv, (inp, 1), 1.0, slot(&mut grads, &nodes, *x));
                    }
                    if nodes[w.0].requires_grad {
                        let xv = &nodes[x.0].value;
                        gemm(out, bs, inp, &g, (1, out), xv, (inp, 1), 1.0, slot(&mut grads, &nodes, *w));
                    }
                    if nodes[b.0].requires_grad {
                        let gb = slot(&mut grads, &nodes, *b);
                        for row in g.chunks_exact(out) {
                            gb.iter_mut().zip(row).for_each(|(a, r)| *a += r);
                        }
                    }
                }
                Op::Relu(x) => {
                    if nodes[x.0].requires_grad {
                        let y = &node.value;
                        let gx = slot(&mut grads, &nodes, *x);
                        for ((a, &gy), &yv) in gx.iter_mut().zip(&g).zip(y.iter()) {
                            if yv > 0.0 {
                                *a += gy;
                            }
                        }
                    }
                }
                Op::Tanh(x) => {
                    if nodes[x.0].requires_grad {
                        let y = &node.value;
                        let gx = slot(&mut grads, &nodes, *x);
                        for ((a, &gy), &yv) in gx.iter_mut().zip(&g).zip(y.iter()) {
                            *a += gy * (1.0 - yv * yv);
                        }
                    }
                }
                Op::MulConst(x, c) => {
                    if nodes[x.0].requires_grad {
                        let gx = slot(&mut grads, &nodes, *x);
                        for ((a, &gy), &cv) in gx.iter_mut().zip(&g).zip(c) {
                            *a += gy * cv;
                        }
                    }
                }
                Op::AddConst(x) => {
                    if nodes[x.0].requires_grad {
                        let gx = slot(&mut grads, &nodes, *x);
                        gx.iter_mut().zip(&g).for_each(|(a, gy)| *a += gy);
                    }
                }
                Op::Add(a, b) | Op::Sub(a, b) => {
                    let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                    if nodes[a.0].requires_grad {
                        let ga = slot(&mut grads, &nodes, *a);
                        ga.iter_mut().zip(&g).for_each(|(x, gy)| *x += gy);
                    }
                    if nodes[b.0].requires_grad {
                        let gb = slot(&mut grads, &nodes, *b);
                        gb.iter_mut().zip(&g).for_each(|(x, gy)| *x += sign * gy);
                    }
                }
                Op::Mul(a, b) => {
                    if nodes[a.0].requires_grad {
                        let bv = &nodes[b.0].value;
                        let ga = slot(&mut grads, &nodes, *a);
                        for ((x, &gy), &o) in ga.iter_mut().zip(&g).zip(bv.iter()) {
                            *x += gy * o;
                        }
                    }
                    if nodes[b.0].requires_grad {
                        let av = &nodes[a.0].value;
                        let gb = slot(&mut grads, &nodes, *b);
                        for ((x, &gy), &o) in gb.iter_mut().zip(&g).zip(av.iter()) {
                            *x += gy * o;
                        }
                    }
                }
                Op::Scale(x, s) => {
                    if nodes[x.0].requires_grad {
                        let gx = slot(&mut grads, &nodes, *x);
                        gx.iter_mut().zip(&g).for_each(|(a, gy)| *a += s * gy);
                    }
                }
                Op::Sum(x) | Op::Mean(x) => {
                    if nodes[x.0].requires_grad {
                        let n = nodes[x.0].value.len() as f64;
                        let d = if matches!(node.op, Op::Mean(_)) { g[0] / n } else { g[0] };
                        slot(&mut grads, &nodes, *x).iter_mut().for_each(|a| *a += d);
                    }
                }
                Op::Mse(a, b) => {
                    let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                    let k = 2.0 * g[0] / av.len() as f64;
                    if nodes[a.0].requires_grad {
                        let ga = slot(&mut grads, &nodes, *a);
                        for ((x, &p), &q) in ga.iter_mut().zip(av.iter()).zip(bv.iter()) {
                            *x += k * (p - q);
                        }
                    }
                    if nodes[b.0].requires_grad {
                        let gb = slot(&mut grads, &nodes, *b);
                        for ((x, &p), &q) in gb.iter_mut().zip(av.iter()).zip(bv.iter()) {
                            *x -= k * (p - q);
                        }
                    }
                }
                Op::RowNorm(x) => {
                    if nodes[x.0].requires_grad {
                        let c = nodes[x.0].cols;
                        let xv = &nodes[x.0].value;
                        let norms = &node.value;
                        let gx = slot(&mut grads, &nodes, *x);
                        // subgradient 0 at the origin
                        for (r, (grow, xrow)) in gx.chunks_exact_mut(c).zip(xv.chunks_exact(c)).enumerate() {
                            if norms[r] > 0.0 {
                                let k = g[r] / norms[r];
                                grow.iter_mut().zip(xrow).for_each(|(a, xv)| *a += k * xv);
                            }
                        }
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let len = nodes[p.0].value.len();
                        if nodes[p.0].requires_grad {
                            let gp = slot(&mut grads, &nodes, *p);
                            gp.iter_mut().zip(&g[offset..offset + len]).for_each(|(a, gy)| *a += gy);
                        }
                        offset += len;
                    }
                }
                Op::SliceRows { x, start } => {
                    if nodes[x.0].requires_grad {
                        let off = start * node.cols;
                        let gx = slot(&mut grads, &nodes, *x);
                        gx[off..off + g.len()].iter_mut().zip(&g).for_each(|(a, gy)| *a += gy);
                    }
                }
                Op::WeightedSum(terms) => {
                    for (v, w) in terms {
                        if nodes[v.0].requires_grad {
                            slot(&mut grads, &nodes, *v)[0] += w * g[0];
                        }
                    }
                }
            }
        }
        Ok(Gradients { by_param })
    }
}
