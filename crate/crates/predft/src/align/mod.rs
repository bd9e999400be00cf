//! The predictive-coding verification pipeline: activation/response matrix
//! construction, cross-validated ridge maps, brain scores, prediction
//! scores, and (d, l) sweep surfaces.

mod ridge;
mod sweep;
mod table;

use serde::{Deserialize, Serialize};

use crate::numkit::NumError;

pub use ridge::{
    brain_score, prediction_score, roi_score, BrainScore, PredictionScore, ResponseMatrix,
    RidgeSpec,
};
pub use sweep::{score_sweep, surface_svg, write_sweep_csv, RoiSet, ScoreSurface, SurfaceCell};
pub use table::{
    build_future_features, reduce_activations, select_frame_activations, ActivationProvider,
    ActivationTable, EmbeddingProvider, WordInfo,
};

#[derive(Debug, thiserror::Error)]
pub enum AlignError {
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Num(#[from] NumError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, AlignError>;

fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(AlignError::Invalid(msg.into()))
}

/// The (d, l) pair: `distance` words from a frame's anchor word to the first
/// predicted future word, `length` consecutive future words.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionWindow {
    pub distance: usize,
    pub length: usize,
}

impl PredictionWindow {
    pub fn new(distance: usize, length: usize) -> Self {
        PredictionWindow { distance, length }
    }

    pub fn validate(&self) -> Result<()> {
        if self.length == 0 {
            return invalid("prediction window: length must be >= 1");
        }
        Ok(())
    }
}
