//! Dense f64 tensor kernel with reverse-mode automatic differentiation.
//!
//! Everything is 64-bit, deterministic, and single-threaded: identical
//! inputs produce bit-identical outputs across runs. Public operations
//! surface NaN/Inf as errors instead of propagating them.

mod container;
mod gradcheck;
mod linalg;
mod tape;
mod tensor;

pub use container::{read_tensors, write_tensors};
pub use gradcheck::{grad_check, GradCheckReport};
pub use linalg::{pca_reduce, pearson_columns, solve_spd, PcaResult};
pub use tape::{Gradients, NodeId, Tape};
pub use tensor::{BoolMask, Tensor};

/// Errors surfaced by tensor and tape operations.
#[derive(Debug, thiserror::Error)]
pub enum NumError {
    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("{op}: non-finite value at flat index {index}")]
    NonFinite { op: &'static str, index: usize },
    #[error("matrix is not positive definite (pivot {pivot})")]
    NotPositiveDefinite { pivot: usize },
    #[error("{op}: fully masked row {row}")]
    FullyMaskedRow { op: &'static str, row: usize },
    #[error("{0}")]
    Invalid(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, NumError>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(NumError::Invalid(msg.into()))
}
