//! The decoding network: fMRI encoders with FIR latency compensation, a
//! Transformer encoder-decoder main network, a side network supplying
//! brain-prediction representations through predictive-coding attention,
//! joint training, and autoregressive generation.

mod checkpoint;
mod forward;
#[cfg(test)]
mod tests;
mod generate;
mod mask;
mod params;
mod train;

use serde::{Deserialize, Serialize};

use crate::align::PredictionWindow;
use crate::data::DataError;
use crate::numkit::NumError;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use forward::{cnn_plan, ConvBlock, Forward};
pub use generate::{encode_sample, generate, generate_beam, EncodedSample};
pub use mask::{build_pc_mask, PcMask};
pub use params::{ParamSet, PredFt};
pub use train::{
    build_samples, build_samples_strided, configure_for_dataset, lr_at, FmriInput, Sample,
    StepRecord, Trainer, ValidationStats,
};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Num(#[from] NumError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, ModelError>;

fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(ModelError::Invalid(msg.into()))
}

/// Input geometry of one fMRI frame.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InputLayout {
    /// brain-surface vectors of the given width
    Surface { dim: usize },
    /// whole-brain volumes of the given spatial shape
    Volume { shape: [usize; 3] },
}

/// Every architecture and training hyperparameter.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub heads: usize,
    pub ff_hidden: usize,
    /// 3D-CNN blocks in the volumetric encoder
    pub cnn_layers: usize,
    /// main Transformer encoder layers
    pub enc_layers: usize,
    /// main Transformer decoder layers
    pub dec_layers: usize,
    pub side_enc_layers: usize,
    pub side_dec_layers: usize,
    pub fir_window: usize,
    pub lambda: f64,
    pub window: PredictionWindow,
    pub vocab_size: usize,
    pub max_gen_len: usize,
    pub lr_init: f64,
    pub lr_final: f64,
    pub epochs: usize,
    pub seed: u64,
    pub side_network_enabled: bool,
    /// frames per training sample (k+1)
    pub frames_per_sample: usize,
    /// training-window stride in frames; strides below k+1 overlap windows
    pub window_stride: usize,
    /// ROI concatenation width d_r (0 when the side network is off)
    pub roi_dim: usize,
    /// atlas group feeding the side network; recorded so decoding can
    /// re-extract the same voxels
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub roi_group: Option<String>,
    pub input: InputLayout,
    /// training-time probability of replacing a decoder input token with
    /// unk; regularizes the teacher-forced language-model path so the
    /// fMRI pathway carries the prediction
    pub word_dropout: f64,
    /// training-time dropout on sublayer outputs and token embeddings
    pub dropout: f64,
    /// training-time Gaussian noise added to fMRI (and ROI) inputs
    pub input_noise: f64,
    /// fragment-advance budget during generation (mean words per frame)
    pub tokens_per_frame: f64,
    /// token position table size
    pub max_tokens: usize,
}

impl ModelConfig {
    /// Desk-scale defaults; vocab size, roi width, and input layout are
    /// filled in from the dataset.
    pub fn desk_default() -> Self {
        ModelConfig {
            d_model: 64,
            heads: 4,
            ff_hidden: 128,
            cnn_layers: 4,
            enc_layers: 4,
            dec_layers: 4,
            side_enc_layers: 2,
            side_dec_layers: 2,
            fir_window: 4,
            lambda: 1.0,
            window: PredictionWindow::new(4, 2),
            vocab_size: 0,
            max_gen_len: 48,
            lr_init: 5e-4,
            lr_final: 1e-5,
            epochs: 40,
            seed: 0,
            side_network_enabled: true,
            frames_per_sample: 10,
            window_stride: 3,
            roi_dim: 0,
            roi_group: None,
            word_dropout: 0.25,
            dropout: 0.15,
            input_noise: 0.2,
            input: InputLayout::Surface { dim: 0 },
            tokens_per_frame: 3.0,
            max_tokens: 96,
        }
    }

    /// Retained frames after the FIR transform: (k+1) - w + 1.
    pub fn k_star(&self) -> usize {
        self.frames_per_sample - self.fir_window + 1
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("d_model", self.d_model),
            ("heads", self.heads),
            ("ff_hidden", self.ff_hidden),
            ("enc_layers", self.enc_layers),
            ("dec_layers", self.dec_layers),
            ("fir_window", self.fir_window),
            ("vocab_size", self.vocab_size),
            ("epochs", self.epochs),
            ("frames_per_sample", self.frames_per_sample),
            ("max_tokens", self.max_tokens),
        ] {
            if v == 0 {
                return invalid(format!("config: {name} must be positive"));
            }
        }
        if self.d_model % self.heads != 0 {
            return invalid(format!(
                "config: d_model {} not divisible by {} heads",
                self.d_model, self.heads
            ));
        }
        if self.lambda < 0.0 {
            return invalid("config: lambda must be non-negative");
        }
        if self.fir_window > self.frames_per_sample {
            return invalid(format!(
                "config: fir_window {} exceeds frames_per_sample {}",
                self.fir_window, self.frames_per_sample
            ));
        }
        self.window.validate().map_err(|e| ModelError::Invalid(e.to_string()))?;
        if self.lr_init <= 0.0 || self.lr_final <= 0.0 {
            return invalid("config: learning rates must be positive");
        }
        if self.tokens_per_frame <= 0.0 {
            return invalid("config: tokens_per_frame must be positive");
        }
        if !(0.0..1.0).contains(&self.word_dropout) {
            return invalid("config: word_dropout must be in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return invalid("config: dropout must be in [0, 1)");
        }
        if self.input_noise < 0.0 {
            return invalid("config: input_noise must be non-negative");
        }
        if self.window_stride == 0 {
            return invalid("config: window_stride must be >= 1");
        }
        if self.side_network_enabled {
            if self.roi_dim == 0 {
                return invalid("config: side network enabled but roi_dim is 0");
            }
            if self.side_enc_layers == 0 || self.side_dec_layers == 0 {
                return invalid("config: side network enabled with zero layers");
            }
        }
        match &self.input {
            InputLayout::Surface { dim } => {
                if *dim == 0 {
                    return invalid("config: surface input dim must be positive");
                }
                if *dim < self.d_model {
                    return invalid(format!(
                        "config: surface dim {dim} smaller than d_model {}",
                        self.d_model
                    ));
                }
            }
            InputLayout::Volume { shape } => {
                if self.cnn_layers == 0 {
                    return invalid("config: volume input needs cnn_layers >= 1");
                }
                // fails early when the extents cannot survive the conv stack
                forward::cnn_plan(*shape, self.cnn_layers)?;
            }
        }
        Ok(())
    }
}
