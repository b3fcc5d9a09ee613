//! Frame-synchronous greedy and beam decoding with per-token emission times.

pub mod beam;
pub mod greedy;


use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::masking::{MaskConfig, INPUT_FRAME_MS};
use crate::numerics::Tensor;
use crate::transducer::TransducerModel;

pub use beam::{beam_search, beam_search_with, BeamConfig, BeamHypothesis, Scorer};
pub use greedy::{greedy_decode, greedy_decode_streaming};

pub const DEFAULT_MAX_SYMBOLS_PER_FRAME: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimedHypothesis {
    pub tokens: Vec<usize>,
    /// Total log-probability.
    pub score: f64,
    /// Audio consumed when each token was first emitted.
    pub emit_audio_ms: Vec<u64>,
}

impl TimedHypothesis {
    pub fn empty() -> Self {
        Self { tokens: Vec::new(), score: 0.0, emit_audio_ms: Vec::new() }
    }
}

/// Hypotheses in descending score order with unique token sequences.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NBestList {
    pub hypotheses: Vec<TimedHypothesis>,
    /// Label-encoder rows of each hypothesis, kept for second-pass scoring.
    #[serde(skip)]
    pub label_caches: Vec<Tensor>,
}

impl NBestList {
    pub fn n(&self) -> usize {
        self.hypotheses.len()
    }

    pub fn best(&self) -> Option<&TimedHypothesis> {
        self.hypotheses.first()
    }

    pub fn is_sorted(&self) -> bool {
        self.hypotheses.windows(2).all(|w| w[0].score >= w[1].score)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Snapshot {
    pub audio_ms: u64,
    pub tokens: Vec<usize>,
}

/// Best hypothesis after every processed chunk of audio.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PartialTrace {
    pub snapshots: Vec<Snapshot>,
}

/// Audio that must be consumed before encoder frame `t` can be computed:
/// the input span of the last frame it can attend to, capped at the
/// utterance length.
pub fn frame_ready_ms(model: &TransducerModel, cfg: &MaskConfig, t: usize, frames: usize, input_frames: usize) -> u64 {
    let (_, hi) = model.acoustic.receptive_field(cfg, t, frames);
    let (_, last_input) = model.acoustic.input_span(hi, hi);
    ((last_input + 1).min(input_frames) as u64) * INPUT_FRAME_MS
}

pub(crate) fn ready_times(model: &TransducerModel, cfg: &MaskConfig, frames: usize, input_frames: usize) -> Vec<u64> {
    (0..frames).map(|t| frame_ready_ms(model, cfg, t, frames, input_frames)).collect()
}

/// Decoding settings shared by the greedy and beam paths.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub mask: MaskConfig,
    pub label_mask: crate::masking::LabelMaskConfig,
    pub max_symbols_per_frame: usize,
}

impl DecodeConfig {
    pub fn new(mask: MaskConfig) -> Self {
        Self { mask, label_mask: Default::default(), max_symbols_per_frame: DEFAULT_MAX_SYMBOLS_PER_FRAME }
    }

    pub fn validate(&self) -> Result<()> {
        self.mask.validate()
    }
}
