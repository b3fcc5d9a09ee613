//! Acoustic and label encoders.

pub mod acoustic;
pub mod label;
pub mod layers;


use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use acoustic::{AcousticEncoder, ConformerBlock, Downsampler, LayerCache, StreamState};
pub use label::{LabelEncoder, LabelState};
pub use layers::{FeedForward, LayerNorm, Linear, MultiHeadAttention, RelPosBias};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    /// Feed-forward hidden width as a multiple of `d_model`.
    pub ff_mult: usize,
    /// Depthwise convolution width (acoustic encoder only).
    pub conv_kernel: usize,
    /// Input frames per encoder frame (acoustic encoder only).
    pub downsample_factor: usize,
    /// Offsets beyond this distance share one relative-position bias.
    pub rel_pos_window: usize,
}

impl EncoderConfig {
    pub fn acoustic_default() -> Self {
        Self { n_layers: 2, d_model: 64, n_heads: 4, ff_mult: 2, conv_kernel: 3, downsample_factor: 6, rel_pos_window: 16 }
    }

    pub fn label_default() -> Self {
        Self { n_layers: 2, d_model: 64, n_heads: 4, ff_mult: 2, conv_kernel: 1, downsample_factor: 1, rel_pos_window: 8 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!("d_model {} not divisible by {} heads", self.d_model, self.n_heads)));
        }
        if self.d_model < 2 {
            return Err(Error::Config("d_model must be at least 2".into()));
        }
        if self.conv_kernel == 0 || self.downsample_factor == 0 || self.ff_mult == 0 {
            return Err(Error::Config("conv_kernel, downsample_factor and ff_mult must be positive".into()));
        }
        Ok(())
    }
}
