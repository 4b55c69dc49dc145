//! Word-level tokenizer and a small pre-norm decoder-only transformer.

mod model;
mod tokenizer;

pub use model::{Bound, DecodeMode, Example, LanguageModel, LmConfig, Packed};
pub use tokenizer::{Tokenizer, BOS, EOS, PAD, UNK};
