//! Experiment files. Every context length carries an explicit unit: `ms`
//! (a multiple of the 60 ms encoder frame) or `frames` (encoder frames).
//! Input-side durations in the task section are in 10 ms input frames and
//! say so in their field names.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::corpus::SyntheticTaskSpec;
use crate::encoders::EncoderConfig;
use crate::error::{Error, Result};
use crate::masking::{
    ms_to_frames, FuturePolicy, LabelMaskConfig, MaskConfig, PastPolicy, VariableMaskSet, ENCODER_FRAME_MS,
    FULL_CONTEXT_FRAMES,
};
use crate::transducer::{LossConfig, MaskSchedule, ModelConfig, Sgd, SgdConfig, TrainConfig};

/// The default experiment, with comments on which values are our choices.
pub const DEFAULT_EXPERIMENT_TOML: &str = include_str!("default_experiment.toml");

/// Parses `<n>ms` or `<n>frames` into encoder frames.
pub fn parse_duration(s: &str) -> Result<usize> {
    let s = s.trim();
    let num = |d: &str| d.trim().parse::<u64>().map_err(|_| Error::Config(format!("bad duration '{s}'")));
    if let Some(d) = s.strip_suffix("ms") {
        ms_to_frames(num(d)?)
    } else if let Some(d) = s.strip_suffix("frames").or_else(|| s.strip_suffix("frame")) {
        Ok(num(d)? as usize)
    } else {
        Err(Error::Config(format!("duration '{s}' needs a unit (ms or frames)")))
    }
}

fn fmt_duration(frames: usize) -> String {
    format!("{}ms", frames as u64 * ENCODER_FRAME_MS)
}

/// Look-back setting: `unlimited`, `fixed:<duration>` or `chunks:<count>`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Past(pub PastPolicy);

impl FromStr for Past {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().split_once(':') {
            None if s.trim() == "unlimited" => Ok(Past(PastPolicy::Unlimited)),
            Some(("fixed", d)) => Ok(Past(PastPolicy::Fixed(parse_duration(d)?))),
            Some(("chunks", n)) => {
                Ok(Past(PastPolicy::Chunked(n.trim().parse().map_err(|_| Error::Config(format!("bad chunk count in '{s}'")))?)))
            }
            _ => Err(Error::Config(format!("bad look-back '{s}' (unlimited | fixed:<duration> | chunks:<n>)"))),
        }
    }
}

impl fmt::Display for Past {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.0 {
            PastPolicy::Unlimited => write!(f, "unlimited"),
            PastPolicy::Fixed(n) => write!(f, "fixed:{}", fmt_duration(n)),
            PastPolicy::Chunked(n) => write!(f, "chunks:{n}"),
        }
    }
}

impl TryFrom<String> for Past {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Past> for String {
    fn from(p: Past) -> String {
        p.to_string()
    }
}

/// Look-ahead setting: `none`, `full`, `chunk:<duration>` or
/// `lookahead:<duration>` (per-layer fixed window).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Future(pub FuturePolicy, pub Option<usize>);

impl Future {
    pub fn chunk(frames: usize) -> Self {
        Future(FuturePolicy::Chunked, Some(frames))
    }
}

impl FromStr for Future {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().split_once(':') {
            None if s.trim() == "none" => Ok(Future(FuturePolicy::None, None)),
            None if s.trim() == "full" => Ok(Future::chunk(FULL_CONTEXT_FRAMES)),
            Some(("chunk", d)) => {
                let n = parse_duration(d)?;
                if n == 0 {
                    return Err(Error::Config(format!("empty chunk in '{s}'")));
                }
                Ok(Future::chunk(n))
            }
            Some(("lookahead", d)) => Ok(Future(FuturePolicy::Fixed(parse_duration(d)?), None)),
            _ => Err(Error::Config(format!("bad look-ahead '{s}' (none | full | chunk:<duration> | lookahead:<duration>)"))),
        }
    }
}

impl fmt::Display for Future {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (self.0, self.1) {
            (FuturePolicy::None, _) => write!(f, "none"),
            (FuturePolicy::Chunked, Some(c)) if c >= FULL_CONTEXT_FRAMES => write!(f, "full"),
            (FuturePolicy::Chunked, c) => write!(f, "chunk:{}", fmt_duration(c.unwrap_or(1))),
            (FuturePolicy::Fixed(n), _) => write!(f, "lookahead:{}", fmt_duration(n)),
        }
    }
}

impl TryFrom<String> for Future {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Future> for String {
    fn from(p: Future) -> String {
        p.to_string()
    }
}

/// One decode setting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ContextPoint {
    pub past: Past,
    pub future: Future,
}

impl ContextPoint {
    pub fn new(past: Past, future: Future) -> Self {
        Self { past, future }
    }

    /// A past policy counted in chunks needs a chunk size even when the
    /// future side does not use one; it then falls back to one frame.
    pub fn mask(&self) -> MaskConfig {
        let chunk = self.future.1.or(matches!(self.past.0, PastPolicy::Chunked(_)).then_some(1));
        MaskConfig { past: self.past.0, future: self.future.0, chunk_frames: chunk }
    }
}

impl fmt::Display for ContextPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "past={} future={}", self.past, self.future)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSection {
    pub vocab_size: usize,
    pub train_utterances: usize,
    pub test_utterances: usize,
    pub min_tokens: usize,
    pub max_tokens: usize,
    pub min_token_input_frames: usize,
    pub max_token_input_frames: usize,
    pub max_edge_silence_input_frames: usize,
    pub feature_dim: usize,
    pub noise: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub d_model: usize,
    pub heads: usize,
    pub ff_mult: usize,
    pub acoustic_layers: usize,
    pub label_layers: usize,
    pub conv_kernel: usize,
    pub downsample_factor: usize,
    /// Relative-position bias window, in encoder frames.
    pub rel_pos_window_frames: usize,
    pub label_rel_pos_window_tokens: usize,
    pub d_joint: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingSection {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lr_decay_per_step: f64,
    #[serde(default)]
    pub momentum: f64,
    #[serde(default)]
    pub clip_norm: Option<f64>,
    #[serde(default)]
    pub fastemit_lambda: f64,
    #[serde(default)]
    pub label_lookback_tokens: Option<usize>,
    /// Sampled independently per batch.
    pub past: Vec<Past>,
    pub future: Vec<Future>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    /// WER grid rows.
    pub past: Vec<Past>,
    /// WER grid columns.
    pub future: Vec<Future>,
    /// Settings decoded in streaming mode for the latency table.
    #[serde(default)]
    pub latency: Vec<ContextPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RescoreSection {
    pub past: Past,
    pub first_pass: Vec<Future>,
    pub second_pass: Vec<Future>,
    pub beam: usize,
    pub nbest: usize,
    #[serde(default = "yes")]
    pub reuse_label_cache: bool,
    /// Rescore only the first this many test utterances.
    #[serde(default)]
    pub max_utterances: Option<usize>,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub name: String,
    /// Seeds the corpus, the initialisation and training.
    pub seed: u64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    /// Trained model to load instead of training.
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    pub task: TaskSection,
    pub model: ModelSection,
    pub training: TrainingSection,
    pub sweep: SweepSection,
    #[serde(default)]
    pub rescore: Option<RescoreSection>,
}

/// How a decode setting relates to the training set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Coverage {
    Trained,
    /// Chunk size between two trained chunk sizes with a trained look-back.
    Interpolated,
    Extrapolated,
}

impl ExperimentSpec {
    pub fn default_spec() -> Self {
        Self::from_toml(DEFAULT_EXPERIMENT_TOML).expect("built-in experiment parses")
    }

    pub fn from_toml(s: &str) -> Result<Self> {
        let spec: Self = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.task_spec().validate()?;
        self.model_config().validate()?;
        Sgd::new(self.train_config().sgd)?;
        self.train_config().loss.validate()?;
        self.mask_set().validate()?;
        if self.training.batch_size == 0 || self.task.train_utterances == 0 || self.task.test_utterances == 0 {
            return Err(Error::Config("batch size and both corpus splits must be non-empty".into()));
        }
        if self.sweep.past.is_empty() || self.sweep.future.is_empty() {
            return Err(Error::Config("sweep needs at least one look-back and one look-ahead".into()));
        }
        for p in self.decode_points() {
            p.mask().validate()?;
        }
        if let Some(r) = &self.rescore {
            if r.nbest == 0 || r.beam < r.nbest {
                return Err(Error::Config(format!("rescore needs beam ({}) >= nbest ({}) >= 1", r.beam, r.nbest)));
            }
        }
        Ok(())
    }

    pub fn task_spec(&self) -> SyntheticTaskSpec {
        let t = &self.task;
        SyntheticTaskSpec {
            vocab_size: t.vocab_size,
            num_utterances: t.train_utterances + t.test_utterances,
            min_tokens: t.min_tokens,
            max_tokens: t.max_tokens,
            min_token_frames: t.min_token_input_frames,
            max_token_frames: t.max_token_input_frames,
            max_edge_silence_frames: t.max_edge_silence_input_frames,
            feature_dim: t.feature_dim,
            noise: t.noise,
            seed: self.seed,
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        let m = &self.model;
        let acoustic = EncoderConfig {
            n_layers: m.acoustic_layers,
            d_model: m.d_model,
            n_heads: m.heads,
            ff_mult: m.ff_mult,
            conv_kernel: m.conv_kernel,
            downsample_factor: m.downsample_factor,
            rel_pos_window: m.rel_pos_window_frames,
        };
        let label = EncoderConfig {
            n_layers: m.label_layers,
            conv_kernel: 1,
            downsample_factor: 1,
            rel_pos_window: m.label_rel_pos_window_tokens,
            ..acoustic.clone()
        };
        ModelConfig { feature_dim: self.task.feature_dim, vocab_size: self.task.vocab_size, acoustic, label, d_joint: m.d_joint, seed: self.seed }
    }

    pub fn mask_set(&self) -> VariableMaskSet {
        VariableMaskSet::uniform(
            self.training.past.iter().map(|p| p.0).collect(),
            self.training.future.iter().map(|f| (f.0, f.1)).collect(),
        )
    }

    pub fn label_mask(&self) -> LabelMaskConfig {
        LabelMaskConfig { lookback_tokens: self.training.label_lookback_tokens }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.training;
        TrainConfig {
            steps: t.steps,
            batch_size: t.batch_size,
            sgd: SgdConfig { learning_rate: t.learning_rate, decay: t.lr_decay_per_step, momentum: t.momentum, clip_norm: t.clip_norm },
            schedule: MaskSchedule::Variable(self.mask_set()),
            label_mask: self.label_mask(),
            loss: LossConfig { fastemit_lambda: t.fastemit_lambda },
            seed: self.seed,
        }
    }

    /// WER grid points, past-major.
    pub fn grid_points(&self) -> Vec<ContextPoint> {
        self.sweep.past.iter().flat_map(|&p| self.sweep.future.iter().map(move |&f| ContextPoint::new(p, f))).collect()
    }

    /// Every setting the sweep will decode with.
    pub fn decode_points(&self) -> Vec<ContextPoint> {
        let mut v = self.grid_points();
        v.extend(self.sweep.latency.iter().copied());
        if let Some(r) = &self.rescore {
            v.extend(r.first_pass.iter().chain(&r.second_pass).map(|&f| ContextPoint::new(r.past, f)));
        }
        v
    }

    pub fn coverage(&self, p: &ContextPoint) -> Coverage {
        let set = self.mask_set();
        if set.contains(&p.mask()) {
            return Coverage::Trained;
        }
        let trained_chunks: Vec<usize> =
            set.future_options.iter().filter(|f| f.0 == FuturePolicy::Chunked).filter_map(|f| f.1).collect();
        let inside = match (p.future.0, p.future.1) {
            (FuturePolicy::Chunked, Some(c)) => {
                trained_chunks.iter().any(|&lo| lo <= c) && trained_chunks.iter().any(|&hi| hi >= c)
            }
            _ => false,
        };
        if inside && set.past_options.contains(&p.past.0) {
            Coverage::Interpolated
        } else {
            Coverage::Extrapolated
        }
    }

    /// One warning per distinct decode setting outside the trained set.
    pub fn extrapolation_warnings(&self) -> Vec<String> {
        let mut seen = Vec::new();
        let mut out = Vec::new();
        for p in self.decode_points() {
            if seen.contains(&p) {
                continue;
            }
            seen.push(p);
            if self.coverage(&p) == Coverage::Extrapolated {
                out.push(format!("decode setting {p} lies outside the training mask set (extrapolation)"));
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn durations_need_units_and_whole_frames() {
        assert_eq!(parse_duration("240ms").unwrap(), 4);
        assert_eq!(parse_duration("3frames").unwrap(), 3);
        assert_eq!(parse_duration("1 frame").unwrap(), 1);
        assert!(parse_duration("250ms").is_err());
        assert!(parse_duration("4").is_err());
        assert!(parse_duration("ms").is_err());
    }

    #[test]
    fn context_strings_round_trip() {
        for s in ["unlimited", "fixed:720ms", "chunks:2"] {
            assert_eq!(s.parse::<Past>().unwrap().to_string(), s);
        }
        for s in ["none", "full", "chunk:60ms", "lookahead:120ms"] {
            assert_eq!(s.parse::<Future>().unwrap().to_string(), s);
        }
        assert_eq!("fixed:12frames".parse::<Past>().unwrap(), Past(PastPolicy::Fixed(12)));
        assert!("chunk:0ms".parse::<Future>().is_err());
        assert!("later".parse::<Future>().is_err());
    }

    #[test]
    fn default_spec_parses_and_round_trips() {
        let spec = ExperimentSpec::default_spec();
        assert_eq!(spec.sweep.past.len(), 2);
        assert_eq!(spec.sweep.future.len(), 5);
        assert_eq!(spec.grid_points().len(), 10);
        let back = ExperimentSpec::from_toml(&spec.to_toml().unwrap()).unwrap();
        assert_eq!(back, spec);
        assert!(spec.extrapolation_warnings().is_empty());
    }

    #[test]
    fn unknown_fields_and_bad_units_are_rejected() {
        let good = ExperimentSpec::default_spec().to_toml().unwrap();
        assert!(ExperimentSpec::from_toml(&good.replace("name =", "nmae =")).is_err());
        assert!(ExperimentSpec::from_toml(&good.replace("\"chunk:240ms\"", "\"chunk:250ms\"")).is_err());
    }

    #[test]
    fn coverage_classifies_decode_settings() {
        let spec = ExperimentSpec::default_spec();
        let unl = Past(PastPolicy::Unlimited);
        assert_eq!(spec.coverage(&ContextPoint::new(unl, Future::chunk(4))), Coverage::Trained);
        assert_eq!(spec.coverage(&ContextPoint::new(unl, Future::chunk(3))), Coverage::Interpolated);
        assert_eq!(spec.coverage(&ContextPoint::new(Past(PastPolicy::Fixed(5)), Future::chunk(4))), Coverage::Extrapolated);
        assert_eq!(spec.coverage(&ContextPoint::new(unl, Future(FuturePolicy::Fixed(1), None))), Coverage::Extrapolated);
        let mut s = spec.clone();
        s.sweep.latency.push(ContextPoint::new(unl, Future(FuturePolicy::Fixed(1), None)));
        s.sweep.latency.push(ContextPoint::new(unl, Future(FuturePolicy::Fixed(1), None)));
        assert_eq!(s.extrapolation_warnings().len(), 1);
    }

    #[test]
    fn chunk_counted_past_gets_a_chunk_size() {
        let p = ContextPoint::new(Past(PastPolicy::Chunked(1)), Future(FuturePolicy::None, None));
        assert!(p.mask().validate().is_ok());
    }
}
