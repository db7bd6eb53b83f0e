//! One-shot voice cloning with a statistics-skip U-net.
//!
//! The crate is organised bottom-up:
//!
//! - [`dsp`]: mel analysis, cepstra, MCD, energy, mel-domain F0 and duration statistics.
//! - [`nn`]: the handful of differentiable kernels the model needs, each with a
//!   hand-written backward pass and a finite-difference harness.
//! - [`model`]: content encoder, duration predictor, style encoder, mel decoder and
//!   the conditional-normalization pre-training decoder.
//! - [`corpus`]: a deterministic multi-speaker, multi-style mel corpus with exact
//!   durations and F0 ground truth.
//! - [`training`]: the two optimisation stages and the checkpoint format.
//! - [`eval`]: reconstruction curves, per-level embedding PCA and transfer analysis.
//!
//! Matrices are stored frame-major (`frames x channels`) throughout.

pub mod container;
pub mod corpus;
pub mod dsp;
pub mod error;
pub mod eval;
pub mod model;
pub mod nn;
pub mod training;

pub use error::{Error, Result};
