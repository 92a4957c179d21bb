//! Dense `f64` tensors, tape-based reverse-mode autodiff, initializers and
//! the AdamW optimizer.

mod array;
mod graph;
pub mod init;
mod kernels;
pub mod optim;
mod params;
pub mod rng;
mod tape;

pub use array::Tensor;
pub use graph::Graph;
pub use init::xavier_uniform;
pub use optim::{adamw_step, AdamWConfig, CosineSchedule, Moments, OptimizerState};
pub use params::{ParamId, ParamStore};
pub use rng::{Rng, RngState};
pub(crate) use rng::fnv1a64;
pub use tape::{with_corrupted_sigmoid_backward, Gradients, Tape, Var, DIFFERENTIABLE_OPS};
