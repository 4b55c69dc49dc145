//! Tiny-transformer unlearning lab: a synthetic biography corpus, a small
//! causal language model, fine-tuning, unlearning objectives and the
//! forget-quality / model-utility evaluation.

pub mod corpus;
mod error;
pub mod eval;
pub mod lm;
pub mod train;
pub mod unlearn;

pub use error::{Error, Result};
pub use ndgrad;
