//! Minimal differentiable numeric core.
//!
//! Dense row-major [`Tensor`]s, a recording [`Tape`] with the primitive ops
//! needed by a small attention UNet, reverse-mode [`Tape::backward`], a
//! central-difference oracle and an Adam optimizer.

mod adam;
mod element;
mod error;
mod finite_diff;
mod tape;
mod tensor;

pub use adam::{adam_step, Adam, AdamConfig, AdamMoments};
pub use element::Real;
pub use error::{Result, TensorError};
pub use finite_diff::{finite_diff_grad, relative_linf, DEFAULT_STEP};
pub use tape::{l1_mean, Gradients, Tape, Var};
pub use tensor::Tensor;
