//! Desk-scale continual-learning engine built around optimally-weighted
//! multi-level feature matching.
//!
//! A frozen teacher (the model as it stood at the previous task boundary) is
//! compared against the live student at every feature layer; the per-layer
//! discrepancies — unbiased MMD by default, plain L2 or cosine for ablations
//! — are combined under trainable softmax-normalized layer weights and added
//! to a replay objective over a reservoir-sampled memory buffer. The
//! [`experiment`] module runs seeded multi-variant comparisons on synthetic
//! class-incremental streams and writes deterministic CSV metrics.

pub mod autodiff;
pub mod error;
pub mod experiment;
pub mod kernel;
pub mod metrics;
pub mod network;
pub mod regularizer;
pub mod replay;
pub mod taskstream;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;
