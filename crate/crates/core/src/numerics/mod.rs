//! Dense tensors, reverse-mode differentiation, losses and optimization.

pub mod loss;
pub mod optim;
pub mod params;
pub mod rng;
pub mod tape;
pub mod tensor;


pub use loss::{l2_pair_loss, total_loss, LossWeights, LABEL_SMOOTHING};
pub use optim::{adam_step, LrSchedule, OptimizerState};
pub use params::{Param, ParamGroup, ParamId, ParamStore};
pub use tape::{conv_out_len, DropoutKey, Gradients, Mode, Tape, Var};
pub use tensor::Tensor;

/// Norms below this are treated as degenerate by `l2_normalize`.
pub const NORM_TOLERANCE: f64 = 1e-12;

/// Layer normalization epsilon.
pub const LN_EPS: f64 = 1e-5;
