//! fMRI-to-text decoding with a brain-prediction side network.
//!
//! The crate is organized around the pipeline stages:
//!
//! - [`numkit`] — dense f64 tensors, reverse-mode autodiff, and the
//!   linear-algebra primitives (SPD solve, PCA, Pearson) everything else
//!   builds on.
//! - [`data`] — dataset model, voxel normalization, ROI extraction,
//!   leak-free splits, tokenization, and a synthetic naturalistic-listening
//!   generator with a planted predictive signal.
//! - [`align`] — the verification pipeline: cross-validated ridge maps,
//!   brain scores, prediction scores, and (d, l) sweep surfaces.
//! - [`model`] — the main+side decoding network with predictive-coding
//!   attention, joint training, and autoregressive generation.
//! - [`metrics`] — BLEU/ROUGE scoring and decoding-error position analysis.
//! - [`cli`] — the `predft` command-line surface tying it together.
//!
//! See the `examples/` directory for one runnable walkthrough per major
//! capability.

pub mod align;
pub mod cli;
pub mod data;
pub mod metrics;
pub mod model;
pub mod numkit;
pub mod plot;

pub use align::PredictionWindow;
pub use numkit::{BoolMask, Tensor};
