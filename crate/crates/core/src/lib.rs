//! Self-supervised user representations from behavior logs.
//!
//! Raw action logs are discretized into behavioral words (04:00-to-04:00 days
//! for long-term purchases, inactivity-split sessions for short-term
//! browsing), embedded by averaging concatenated attribute embeddings, and
//! fed to a bidirectional transformer pretrained by reconstructing the
//! attribute sets of masked words. The pretrained encoder is then
//! fine-tuned end to end through a classification head on its first token.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod datagen;
pub mod encoder;
pub mod error;
pub mod experiment;
pub mod float;
pub mod gradcheck;
pub mod gradients;
pub mod input;
pub mod loss;
pub mod metrics;
pub mod optim;
pub mod params;
pub mod tensor;
pub mod tokenizer;
pub mod training;
pub mod vocab;

#[cfg(test)]
mod testutil;

pub use error::{Error, Result};
pub use float::Scalar;
pub use tensor::Matrix;
