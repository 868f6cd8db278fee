// Indexed loops over matrix dimensions read better than iterator chains in
// the numeric kernels, so the lint stays off crate-wide.
#![allow(clippy::needless_range_loop)]

//! Factual-association editing for a minimal causal transformer text encoder.
//!
//! The library treats the second MLP matrix of a transformer block as a
//! linear associative memory and rewrites one key-value pair in it with a
//! closed-form rank-one update. The value vector is found by contrastive
//! gradient descent on the encoder's EOS embedding. A benchmark harness
//! measures efficacy, generalization, and specificity of the resulting edits
//! and drives everything from a small CLI.

pub mod container;
pub mod datasets;
pub mod editor;
pub mod encoder;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod metrics;
pub mod oracles;
pub mod rng;
pub mod value_opt;
pub mod vocab;

pub use error::{Error, Result};
