//! Dense tensors, reverse-mode differentiation, neural primitives, SGD and
//! the finite-difference verifier.

mod gradcheck;
mod nn;
mod optim;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{finite_diff_at, finite_diff_grad, relative_error};
pub use nn::{mlp_forward, Activation, Linear, Mlp, MlpSpec};
pub use optim::{sgd_step, OptimizerState};
pub use params::{ParamBuilder, ParamId, ParamStore};
pub use tape::{Gradients, OpKind, Segments, Tape, Var, PAD};
pub use tensor::{Real, Tensor};
