//! Dense tensors, reverse-mode differentiation, AdamW and gradient checks.

pub mod gradcheck;
pub mod kernels;
pub mod optim;
mod tape;
mod tensor;

pub use gradcheck::{check_gradients, GradCheckReport};
pub use optim::{adamw_step, clip_global_norm, global_norm, AdamWConfig, OptimState};
pub use tape::{Gradients, Lanes, Tape, Var};
pub use tensor::Tensor;
