//! Attention-mask policies: fixed windows, causal chunks, their hybrid, and
//! sets of policies sampled during training.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Tensor, MASK_SENTINEL};

/// Duration of one encoder frame after 6x decimation of 10 ms features.
pub const ENCODER_FRAME_MS: u64 = 60;
/// Duration of one input feature frame.
pub const INPUT_FRAME_MS: u64 = 10;
/// Chunk size used to express "full context": larger than any utterance.
pub const FULL_CONTEXT_FRAMES: usize = 1_000_000;

/// Converts a millisecond duration to encoder frames; it must be a whole
/// number of frames.
pub fn ms_to_frames(ms: u64) -> Result<usize> {
    if ms % ENCODER_FRAME_MS != 0 {
        return Err(Error::Config(format!("{ms} ms is not a multiple of {ENCODER_FRAME_MS} ms")));
    }
    Ok((ms / ENCODER_FRAME_MS) as usize)
}

pub fn seconds_to_frames(seconds: f64) -> Result<usize> {
    let frames = seconds * 1000.0 / ENCODER_FRAME_MS as f64;
    let rounded = frames.round();
    if (frames - rounded).abs() > 1e-6 || rounded < 1.0 {
        return Err(Error::Config(format!("{seconds} s is not a positive multiple of 60 ms")));
    }
    Ok(rounded as usize)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PastPolicy {
    /// The previous `n` frames.
    Fixed(usize),
    /// Frames of the own chunk up to the query and of the previous `n` chunks.
    Chunked(usize),
    Unlimited,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FuturePolicy {
    /// The next `n` frames.
    Fixed(usize),
    /// Later frames of the query's own chunk.
    Chunked,
    None,
}

/// One acoustic-encoder mask setting, applied identically at every layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MaskConfig {
    pub past: PastPolicy,
    pub future: FuturePolicy,
    pub chunk_frames: Option<usize>,
}

impl MaskConfig {
    pub fn fixed(lookback: usize, lookahead: usize) -> Self {
        Self { past: PastPolicy::Fixed(lookback), future: FuturePolicy::Fixed(lookahead), chunk_frames: None }
    }

    /// Causal chunking: own chunk plus one previous chunk.
    pub fn chunked(chunk_frames: usize) -> Self {
        Self { past: PastPolicy::Chunked(1), future: FuturePolicy::Chunked, chunk_frames: Some(chunk_frames) }
    }

    /// Chunked future with an arbitrary past policy.
    pub fn hybrid(past: PastPolicy, chunk_frames: usize) -> Self {
        Self { past, future: FuturePolicy::Chunked, chunk_frames: Some(chunk_frames) }
    }

    pub fn full_context() -> Self {
        Self::hybrid(PastPolicy::Unlimited, FULL_CONTEXT_FRAMES)
    }

    pub fn causal(past: PastPolicy) -> Self {
        Self { past, future: FuturePolicy::None, chunk_frames: None }
    }

    pub fn validate(&self) -> Result<()> {
        if self.chunk_frames == Some(0) {
            return Err(Error::Mask("chunk_frames must be at least 1".into()));
        }
        let chunked = matches!(self.past, PastPolicy::Chunked(_)) || self.future == FuturePolicy::Chunked;
        if chunked && self.chunk_frames.is_none() {
            return Err(Error::Mask("chunked policy requires chunk_frames".into()));
        }
        Ok(())
    }

    fn chunk(&self) -> usize {
        self.chunk_frames.unwrap_or(1)
    }

    pub fn chunk_index(&self, t: usize) -> usize {
        t / self.chunk()
    }

    /// Whether query frame `t` may attend to key frame `s`.
    pub fn allows(&self, t: usize, s: usize) -> bool {
        if s <= t {
            match self.past {
                PastPolicy::Fixed(n) => t - s <= n,
                PastPolicy::Chunked(n) => self.chunk_index(t) - self.chunk_index(s) <= n,
                PastPolicy::Unlimited => true,
            }
        } else {
            match self.future {
                FuturePolicy::Fixed(n) => s - t <= n,
                FuturePolicy::Chunked => self.chunk_index(s) == self.chunk_index(t),
                FuturePolicy::None => false,
            }
        }
    }

    /// Earliest key frame reachable from query `t` in one layer.
    pub fn earliest_key(&self, t: usize) -> usize {
        match self.past {
            PastPolicy::Fixed(n) => t.saturating_sub(n),
            PastPolicy::Chunked(n) => self.chunk_index(t).saturating_sub(n) * self.chunk(),
            PastPolicy::Unlimited => 0,
        }
    }

    /// Latest key frame reachable from query `t` in one layer, before
    /// clamping to the sequence.
    pub fn latest_key(&self, t: usize) -> usize {
        match self.future {
            FuturePolicy::Fixed(n) => t.saturating_add(n),
            FuturePolicy::Chunked => (self.chunk_index(t) + 1).saturating_mul(self.chunk()) - 1,
            FuturePolicy::None => t,
        }
    }

    /// Number of past frames a streaming cache must retain, or `None` when
    /// the look-back is unbounded.
    pub fn cache_frames(&self) -> Option<usize> {
        match self.past {
            PastPolicy::Fixed(n) => Some(n),
            PastPolicy::Chunked(n) => Some(n.saturating_mul(self.chunk())),
            PastPolicy::Unlimited => None,
        }
    }

    /// True when no frame depends on frames beyond its own chunk.
    pub fn is_streamable(&self) -> bool {
        matches!(self.future, FuturePolicy::Chunked | FuturePolicy::None | FuturePolicy::Fixed(0))
    }

    /// Worst-case number of frames a single layer looks ahead.
    pub fn layer_future_reach(&self) -> usize {
        match self.future {
            FuturePolicy::Fixed(n) => n,
            FuturePolicy::Chunked => self.chunk() - 1,
            FuturePolicy::None => 0,
        }
    }

    /// Partial order used for rescoring: `self` sees at least as much future
    /// context as `other` at every frame.
    pub fn future_dominates(&self, other: &MaskConfig, n_layers: usize, seq_len: usize) -> bool {
        (0..seq_len).all(|t| {
            receptive_field(self, n_layers, t, seq_len).1 >= receptive_field(other, n_layers, t, seq_len).1
        })
    }
}

impl fmt::Display for PastPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PastPolicy::Fixed(n) => write!(f, "fixed:{n}"),
            PastPolicy::Chunked(n) => write!(f, "chunks:{n}"),
            PastPolicy::Unlimited => write!(f, "unlimited"),
        }
    }
}

impl fmt::Display for FuturePolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FuturePolicy::Fixed(n) => write!(f, "fixed:{n}"),
            FuturePolicy::Chunked => write!(f, "chunk"),
            FuturePolicy::None => write!(f, "none"),
        }
    }
}

fn fmt_chunk(c: usize) -> String {
    if c >= FULL_CONTEXT_FRAMES {
        "full".into()
    } else {
        c.to_string()
    }
}

impl fmt::Display for MaskConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "past={},future={}", self.past, self.future)?;
        if let Some(c) = self.chunk_frames {
            write!(f, ",chunk={}", fmt_chunk(c))?;
        }
        Ok(())
    }
}

impl FromStr for PastPolicy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("bad past policy '{s}' (fixed:N | chunks:N | unlimited)"));
        match s.split_once(':') {
            Some(("fixed", n)) => Ok(PastPolicy::Fixed(n.parse().map_err(|_| bad())?)),
            Some(("chunks", n)) => Ok(PastPolicy::Chunked(n.parse().map_err(|_| bad())?)),
            None if s == "unlimited" => Ok(PastPolicy::Unlimited),
            _ => Err(bad()),
        }
    }
}

impl FromStr for FuturePolicy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("bad future policy '{s}' (fixed:N | chunk | none)"));
        match s.split_once(':') {
            Some(("fixed", n)) => Ok(FuturePolicy::Fixed(n.parse().map_err(|_| bad())?)),
            None if s == "chunk" => Ok(FuturePolicy::Chunked),
            None if s == "none" => Ok(FuturePolicy::None),
            _ => Err(bad()),
        }
    }
}

/// Parses a chunk size in frames, accepting `full`.
pub fn parse_chunk(s: &str) -> Result<usize> {
    if s == "full" {
        return Ok(FULL_CONTEXT_FRAMES);
    }
    s.parse().map_err(|_| Error::Config(format!("bad chunk size '{s}'")))
}

impl FromStr for MaskConfig {
    type Err = Error;
    /// Parses the `Display` form, e.g. `past=fixed:12,future=chunk,chunk=4`.
    fn from_str(s: &str) -> Result<Self> {
        let (mut past, mut future, mut chunk) = (None, None, None);
        for part in s.split(',') {
            match part.split_once('=') {
                Some(("past", v)) => past = Some(v.parse()?),
                Some(("future", v)) => future = Some(v.parse()?),
                Some(("chunk", v)) => chunk = Some(parse_chunk(v)?),
                _ => return Err(Error::Config(format!("bad mask config field '{part}'"))),
            }
        }
        let cfg = MaskConfig {
            past: past.ok_or_else(|| Error::Config("mask config needs past=".into()))?,
            future: future.ok_or_else(|| Error::Config("mask config needs future=".into()))?,
            chunk_frames: chunk,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Label-encoder mask: always causal, optionally limited look-back.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct LabelMaskConfig {
    pub lookback_tokens: Option<usize>,
}

impl LabelMaskConfig {
    pub fn allows(&self, u: usize, s: usize) -> bool {
        s <= u && self.lookback_tokens.is_none_or(|k| u - s <= k)
    }

    pub fn cache_tokens(&self) -> Option<usize> {
        self.lookback_tokens
    }
}

/// Boolean attendability matrix, queries × keys.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    rows: usize,
    cols: usize,
    allow: Vec<bool>,
}

impl AttentionMask {
    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut allow = Vec::with_capacity(rows * cols);
        for t in 0..rows {
            for s in 0..cols {
                allow.push(f(t, s));
            }
        }
        Self { rows, cols, allow }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, t: usize, s: usize) -> bool {
        self.allow[t * self.cols + s]
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.allow
    }

    pub fn row(&self, t: usize) -> &[bool] {
        &self.allow[t * self.cols..(t + 1) * self.cols]
    }

    /// `'#'` for allowed, `'.'` for masked, one line per query.
    pub fn to_ascii(&self) -> String {
        let mut out = String::with_capacity(self.rows * (self.cols + 1));
        for t in 0..self.rows {
            out.extend(self.row(t).iter().map(|&a| if a { '#' } else { '.' }));
            out.push('\n');
        }
        out
    }

    /// Binary portable graymap (P5), allowed cells white, each cell drawn as
    /// a `scale × scale` block.
    pub fn to_pgm(&self, scale: usize) -> Vec<u8> {
        let scale = scale.max(1);
        let (w, h) = (self.cols * scale, self.rows * scale);
        let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
        for y in 0..h {
            for x in 0..w {
                out.push(if self.get(y / scale, x / scale) { 255 } else { 0 });
            }
        }
        out
    }
}

pub fn build_mask(seq_len: usize, cfg: &MaskConfig) -> Result<AttentionMask> {
    if seq_len == 0 {
        return Err(Error::Mask("sequence length must be at least 1".into()));
    }
    cfg.validate()?;
    Ok(AttentionMask::from_fn(seq_len, seq_len, |t, s| cfg.allows(t, s)))
}

/// Mask block for absolute query frames `q0..q0+nq` against key frames
/// `k0..k0+nk`; used by the streaming encoder.
pub(crate) fn build_mask_block(cfg: &MaskConfig, q0: usize, nq: usize, k0: usize, nk: usize) -> AttentionMask {
    AttentionMask::from_fn(nq, nk, |i, j| cfg.allows(q0 + i, k0 + j))
}

pub fn build_label_mask(len: usize, cfg: &LabelMaskConfig) -> AttentionMask {
    AttentionMask::from_fn(len, len, |u, s| cfg.allows(u, s))
}

/// Sets disallowed scores to the masking sentinel.
pub fn apply_mask(scores: &Tensor, mask: &AttentionMask) -> Result<Tensor> {
    let shape = scores.shape();
    if shape.len() != 2 || shape[0] != mask.rows || shape[1] != mask.cols {
        return Err(Error::shape(
            "apply_mask",
            format!("scores {shape:?} vs mask {}x{}", mask.rows, mask.cols),
        ));
    }
    let data = scores
        .data()
        .iter()
        .zip(&mask.allow)
        .map(|(&v, &ok)| if ok { v } else { MASK_SENTINEL })
        .collect();
    Tensor::new(shape.to_vec(), data)
}

/// Frames reachable from output frame `t` after `n_layers` attention layers
/// under `cfg`, as an inclusive `(earliest, latest)` range.
pub fn receptive_field(cfg: &MaskConfig, n_layers: usize, t: usize, seq_len: usize) -> (usize, usize) {
    let last = seq_len.saturating_sub(1);
    let (mut lo, mut hi) = (t, t);
    for _ in 0..n_layers {
        lo = cfg.earliest_key(lo);
        hi = cfg.latest_key(hi).min(last);
    }
    (lo, hi)
}

/// The set of mask configurations a model is trained on; past and future
/// options are drawn independently.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariableMaskSet {
    pub past_options: Vec<PastPolicy>,
    /// Future policy with its chunk size, when the policy needs one.
    pub future_options: Vec<(FuturePolicy, Option<usize>)>,
    /// Optional sampling weights; uniform when absent.
    #[serde(default)]
    pub past_weights: Option<Vec<f64>>,
    #[serde(default)]
    pub future_weights: Option<Vec<f64>>,
}

impl VariableMaskSet {
    pub fn uniform(past_options: Vec<PastPolicy>, future_options: Vec<(FuturePolicy, Option<usize>)>) -> Self {
        Self { past_options, future_options, past_weights: None, future_weights: None }
    }

    pub fn singleton(cfg: MaskConfig) -> Self {
        Self::uniform(vec![cfg.past], vec![(cfg.future, cfg.chunk_frames)])
    }

    /// Chunked-future set over `chunks` with the given look-backs.
    pub fn chunked(past_options: Vec<PastPolicy>, chunks: &[usize]) -> Self {
        Self::uniform(past_options, chunks.iter().map(|&c| (FuturePolicy::Chunked, Some(c))).collect())
    }

    pub fn combine(past: PastPolicy, future: (FuturePolicy, Option<usize>)) -> MaskConfig {
        MaskConfig { past, future: future.0, chunk_frames: future.1 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.past_options.is_empty() || self.future_options.is_empty() {
            return Err(Error::Mask("variable mask set needs at least one past and one future option".into()));
        }
        for (w, n) in [(&self.past_weights, self.past_options.len()), (&self.future_weights, self.future_options.len())] {
            if let Some(w) = w {
                if w.len() != n || w.iter().any(|x| !(x.is_finite() && *x >= 0.0)) || w.iter().sum::<f64>() <= 0.0 {
                    return Err(Error::Mask("sampling weights must be non-negative, finite and match the options".into()));
                }
            }
        }
        self.configs().iter().try_for_each(MaskConfig::validate)
    }

    /// Every past × future combination, past-major.
    pub fn configs(&self) -> Vec<MaskConfig> {
        self.past_options
            .iter()
            .flat_map(|&p| self.future_options.iter().map(move |&f| Self::combine(p, f)))
            .collect()
    }

    pub fn contains(&self, cfg: &MaskConfig) -> bool {
        self.configs().contains(cfg)
    }
}

fn pick<R: Rng + ?Sized>(n: usize, weights: Option<&[f64]>, rng: &mut R) -> usize {
    match weights {
        None => rng.random_range(0..n),
        Some(w) => {
            let total: f64 = w.iter().sum();
            let mut x = rng.random::<f64>() * total;
            for (i, wi) in w.iter().enumerate() {
                if x < *wi {
                    return i;
                }
                x -= wi;
            }
            n - 1
        }
    }
}

/// Draws one configuration: a past option and a future option, independently.
pub fn sample_config<R: Rng + ?Sized>(set: &VariableMaskSet, rng: &mut R) -> Result<MaskConfig> {
    set.validate()?;
    let p = pick(set.past_options.len(), set.past_weights.as_deref(), rng);
    let f = pick(set.future_options.len(), set.future_weights.as_deref(), rng);
    Ok(VariableMaskSet::combine(set.past_options[p], set.future_options[f]))
}
