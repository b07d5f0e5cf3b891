//! Question-focus and question-type aware summarization of consumer health
//! questions with a small prefix-LM transformer trained from scratch.
//!
//! The pieces, bottom-up:
//! - [`tensor`]: `f64` tensors, reverse-mode tape, Adam, checkpoints
//! - [`tokenizer`]: subword vocabulary training and greedy longest-match encoding
//! - [`corpus`]: input packing, attention mask, Cloze masking, entity tags, question types
//! - [`model`]: the transformer with explicit and implicit question-type infusion
//! - [`trainer`]: multi-Cloze and question-type training loops
//! - [`decoder`]: beam search
//! - [`metrics`]: ROUGE and answer-quality metrics
//! - [`retrieval`]: TF-IDF question retrieval
//! - [`cli`]: the `qsum` command line

pub mod cli;
pub mod corpus;
pub mod decoder;
pub mod error;
pub mod gradcheck;
pub mod io;
pub mod metrics;
pub mod model;
pub mod retrieval;
pub mod selftest;
pub mod tensor;
pub mod tokenizer;
pub mod trainer;

pub use error::{Error, Result};
