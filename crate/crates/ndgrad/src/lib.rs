//! Dense row-major tensors with a tape-based reverse-mode autodiff engine.
//!
//! Values are stored as 32-bit reals for training; every kernel is generic over
//! [`Real`] so the same graph can be replayed in 64-bit precision for finite
//! difference checks. Dot products and reductions always accumulate in `f64`.
//!
//! A [`Tape`] lives for one forward pass. Leaves are registered from
//! [`Tensor`]s, ops append nodes, and [`Tape::backward`] consumes the tape and
//! returns the gradients of every leaf that requires them.

mod error;
pub mod gradcheck;
mod kernels;
mod real;
mod tape;
mod tensor;

pub use error::{NdError, Result};
pub use gradcheck::{finite_diff_check, max_relative_error};
pub use real::Real;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
