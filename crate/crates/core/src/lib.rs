pub mod autodiff;
pub mod bench;
pub mod cli;
pub mod data;
pub mod error;
pub mod losses;
pub mod model;
pub mod perturb;
pub mod persist;
pub mod trainer;

pub use error::{GateError, Result};
