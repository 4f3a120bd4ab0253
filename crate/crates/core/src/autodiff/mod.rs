//! Reverse-mode differentiation substrate: tensors, the tape, dense layers
//! and the AdamW optimizer.

pub mod adamw;
pub mod gradcheck;
pub mod layers;
pub mod tape;
pub mod tensor;

pub use adamw::{clip_grad_norm, AdamW, AdamWConfig, Moments};
pub use gradcheck::{check_gradients, GradCheck, ParamSet};
pub use layers::{Activation, DenseLayer, Mlp, MlpSpec, Mode};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{Tensor, TensorId};

/// Seeded generator used for initialization, dropout, batching and
/// perturbations.
pub type GateRng = rand_chacha::ChaCha8Rng;
