//! Causal/non-causal disentanglement of frozen embeddings.
//!
//! A stochastic mask splits each embedding into a causal part, fed to a
//! classifier, and a complement, attacked by an adversary that tries to
//! recover the label from it. See the README for the objective and the CLI.

pub mod ablation;
pub mod adam;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod emb;
pub mod error;
pub mod gradcheck;
pub mod independence;
pub mod mask;
pub mod matrix;
pub mod metrics;
pub mod mlp;
pub mod noise;
pub mod objective;
pub mod report;
pub mod synthgen;
pub mod trainer;
mod par;

pub use error::{Error, FormatErrorKind, Result};
pub use matrix::DenseMatrix;
pub use noise::NoiseSource;
