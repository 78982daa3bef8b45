//! Robust training against noisy labels by early stopping and learning
//! from a maximal safe set.
//!
//! The pieces, bottom-up:
//!
//! - [`nn`]: a small ReLU MLP with softmax cross-entropy, exact gradients
//!   and momentum SGD.
//! - [`data`]: datasets, synthetic blobs, CSV I/O, clean splits and
//!   symmetric / pair label noise.
//! - [`memorization`]: per-sample prediction histories and memorization
//!   precision / recall.
//! - [`engine`]: Phase I with a validation or noise-rate stop heuristic,
//!   then Phase II on the maximal safe set.
//! - [`refurbish`]: the Prestopping+ second run with refurbished labels.
//! - [`instrumentation`]: per-epoch metrics, loss histograms, summaries.
//! - [`runner`]: config files, seeded repetitions and output layout.

pub mod data;
pub mod engine;
pub mod error;
pub mod instrumentation;
pub mod matrix;
pub mod memorization;
pub mod nn;
pub mod refurbish;
pub mod rng;
pub mod runner;

pub use error::{Error, Result};
pub use matrix::Matrix;
