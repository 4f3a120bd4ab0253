use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{GateError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

/// Train mode samples dropout masks; eval mode is deterministic.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// `y = activation(dropout(x) · Wᵀ + b)`, with inverted dropout on the input.
#[derive(Debug, Clone)]
pub struct DenseLayer {
    pub weight: Tensor,
    pub bias: Tensor,
    pub activation: Activation,
    pub dropout_rate: f64,
}

impl DenseLayer {
    /// Kaiming-uniform weights for ReLU layers, Xavier-uniform otherwise;
    /// zero bias.
    pub fn init<R: Rng + ?Sized>(
        input: usize,
        output: usize,
        activation: Activation,
        dropout_rate: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if input == 0 || output == 0 {
            return Err(GateError::Config("layer dimensions must be positive".into()));
        }
        let limit = match activation {
            Activation::Relu => (6.0 / input as f64).sqrt(),
            Activation::Tanh | Activation::Identity => (6.0 / (input + output) as f64).sqrt(),
        };
        let dist = Uniform::new_inclusive(-limit, limit).expect("finite limits");
        let w = (0..input * output).map(|_| dist.sample(rng)).collect();
        DenseLayer::from_parts(
            Tensor::matrix(output, input, w)?,
            Tensor::from_vec(vec![0.0; output])?,
            activation,
            dropout_rate,
        )
    }

    pub fn from_parts(weight: Tensor, bias: Tensor, activation: Activation, dropout_rate: f64) -> Result<Self> {
        if weight.shape().len() != 2 {
            return Err(GateError::shape("DenseLayer weight", "[out, in]", weight.shape()));
        }
        if bias.shape() != [weight.shape()[0]] {
            return Err(GateError::shape("DenseLayer bias", [weight.shape()[0]], bias.shape()));
        }
        if !(0.0..1.0).contains(&dropout_rate) {
            return Err(GateError::Config(format!("dropout rate {dropout_rate} outside [0, 1)")));
        }
        Ok(DenseLayer {
            weight,
            bias,
            activation,
            dropout_rate,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn output_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn forward<'a, R: Rng + ?Sized>(&'a self, tape: &mut Tape<'a>, x: Var, mode: Mode, rng: &mut R) -> Result<Var> {
        let mut h = x;
        if mode == Mode::Train && self.dropout_rate > 0.0 {
            let keep = 1.0 - self.dropout_rate;
            let n = {
                let (r, c) = tape.dims(x);
                r * c
            };
            let mask = (0..n)
                .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
                .collect();
            h = tape.mul_const(h, mask)?;
        }
        let w = tape.param(&self.weight);
        let b = tape.param(&self.bias);
        let z = tape.linear(h, w, b)?;
        Ok(match self.activation {
            Activation::Relu => tape.relu(z),
            Activation::Tanh => tape.tanh(z),
            Activation::Identity => z,
        })
    }
}

/// Stack of dense layers sharing one freeze flag.
#[derive(Debug, Clone)]
pub struct Mlp {
    layers: Vec<DenseLayer>,
    frozen: bool,
}

/// Shape of an [`Mlp`]: layer widths plus activation and dropout choices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input: usize,
    pub hidden: Vec<usize>,
    pub output: usize,
    pub hidden_activation: Activation,
    pub output_activation: Activation,
    pub dropout: f64,
}

impl MlpSpec {
    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.input];
        w.extend(&self.hidden);
        w.push(self.output);
        w
    }
}

impl Mlp {
    pub fn new(layers: Vec<DenseLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(GateError::Empty("Mlp", 1));
        }
        for pair in layers.windows(2) {
            if pair[0].output_dim() != pair[1].input_dim() {
                return Err(GateError::shape("Mlp layer chain", pair[0].output_dim(), pair[1].input_dim()));
            }
        }
        let mut mlp = Mlp { layers, frozen: false };
        mlp.set_frozen(false);
        Ok(mlp)
    }

    pub fn from_spec<R: Rng + ?Sized>(spec: &MlpSpec, rng: &mut R) -> Result<Self> {
        let widths = spec.widths();
        let last = widths.len() - 2;
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let act = if i == last { spec.output_activation } else { spec.hidden_activation };
                DenseLayer::init(w[0], w[1], act, spec.dropout, rng)
            })
            .collect::<Result<Vec<_>>>()?;
        Mlp::new(layers)
    }

    /// Square identity map of width `dim`: one Identity layer, `W = I`, `b = 0`.
    pub fn identity(dim: usize) -> Result<Self> {
        let mut w = vec![0.0; dim * dim];
        (0..dim).for_each(|i| w[i * dim + i] = 1.0);
        Mlp::new(vec![DenseLayer::from_parts(
            Tensor::matrix(dim, dim, w)?,
            Tensor::from_vec(vec![0.0; dim])?,
            Activation::Identity,
            0.0,
        )?])
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].output_dim()
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Frozen networks carry no gradient buffers, so no tape computes
    /// gradients for them and no optimizer step sees them.
    pub fn set_frozen(&mut self, frozen: bool) {
        self.frozen = frozen;
        for l in &mut self.layers {
            l.weight.set_tracked(!frozen);
            l.bias.set_tracked(!frozen);
        }
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// Parameters in a stable order with names relative to this network.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| [(format!("l{i}.weight"), &l.weight), (format!("l{i}.bias"), &l.bias)])
            .collect()
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        self.layers
            .iter_mut()
            .enumerate()
            .flat_map(|(i, l)| [(format!("l{i}.weight"), &mut l.weight), (format!("l{i}.bias"), &mut l.bias)])
            .collect()
    }

    pub fn layers_mut(&mut self) -> &mut [DenseLayer] {
        &mut self.layers
    }

    pub fn forward<'a, R: Rng + ?Sized>(&'a self, tape: &mut Tape<'a>, x: Var, mode: Mode, rng: &mut R) -> Result<Var> {
        let (_, cols) = tape.dims(x);
        if cols != self.input_dim() {
            return Err(GateError::shape("Mlp input", self.input_dim(), cols));
        }
        let mut h = x;
        for layer in &self.layers {
            h = layer.forward(tape, h, mode, rng)?;
        }
        Ok(h)
    }

    /// Tensor-in, tensor-out forward pass without gradient bookkeeping.
    pub fn forward_tensor<R: Rng + ?Sized>(&self, x: &Tensor, mode: Mode, rng: &mut R) -> Result<Tensor> {
        x.check_finite("Mlp input")?;
        let mut tape = Tape::new();
        let xv = tape.input(x);
        let y = self.forward(&mut tape, xv, mode, rng)?;
        Ok(tape.to_tensor(y))
    }
}
