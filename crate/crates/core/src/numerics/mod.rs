//! Dense tensors, reverse-mode differentiation, and optimization.

mod checkpoint;
mod gradcheck;
mod lstm;
mod params;
mod sgd;
mod tape;
mod tensor;

pub use checkpoint::Checkpoint;
pub use gradcheck::{finite_difference_check, relative_error, GradCheckConfig, GradCheckEntry, GradCheckReport};
pub use lstm::{lstm_batch, lstm_forward, LstmSpec, LstmVars};
pub use params::{init_uniform, BoundParams, GradientMap, ModelParams};
pub use sgd::{sgd_step, Sgd, SgdConfig};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

/// Default negative slope of every LeakyReLU in the model.
pub const DEFAULT_LEAKY_SLOPE: f64 = 0.01;
