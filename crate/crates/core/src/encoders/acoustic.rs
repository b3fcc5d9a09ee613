//! Convolutional down-sampling front end and layer-normalised Conformer
//! blocks under an attention mask, evaluated either over a whole utterance
//! or chunk by chunk with cached keys and values.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::layers::{FeedForward, LayerNorm, Linear, MultiHeadAttention};
use super::EncoderConfig;
use crate::error::{Error, Result};
use crate::masking::{build_mask, build_mask_block, MaskConfig};
use crate::numerics::{ParamId, ParamStore, Tape, Tensor, Var};

const DOWNSAMPLE_KERNEL: usize = 3;

/// Strided convolution followed by concatenation of consecutive frames and a
/// linear projection. Decimation factor = stride × concat.
#[derive(Debug, Clone)]
pub struct Downsampler {
    pub conv: Linear,
    pub proj: Linear,
    pub stride: usize,
    pub concat: usize,
    pub feature_dim: usize,
}

impl Downsampler {
    fn new(store: &mut ParamStore, feature_dim: usize, d_model: usize, factor: usize, rng: &mut ChaCha8Rng) -> Self {
        let stride = if factor % 2 == 0 { 2 } else { 1 };
        let concat = factor / stride;
        Self {
            conv: Linear::new(store, "acoustic.downsample.conv", DOWNSAMPLE_KERNEL * feature_dim, d_model, rng),
            proj: Linear::new(store, "acoustic.downsample.proj", concat * d_model, d_model, rng),
            stride,
            concat,
            feature_dim,
        }
    }

    pub fn factor(&self) -> usize {
        self.stride * self.concat
    }

    /// Zero rows prepended so that the first convolution window ends on the
    /// first stride boundary.
    pub fn left_context(&self) -> usize {
        DOWNSAMPLE_KERNEL - self.stride
    }

    pub fn output_len(&self, input_frames: usize) -> usize {
        input_frames.div_ceil(self.factor())
    }

    /// `x` holds `left_context()` history rows followed by a whole number of
    /// decimation windows.
    fn forward_padded(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let u = tape.unfold_rows(x, DOWNSAMPLE_KERNEL, self.stride)?;
        let c = self.conv.forward(tape, u)?;
        let c = tape.silu(c)?;
        let e = tape.unfold_rows(c, self.concat, self.concat)?;
        self.proj.forward(tape, e)
    }

    /// Whole-utterance down-sampling: causal left padding, trailing partial
    /// window padded with zeros on the right.
    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let (t_in, f) = (tape.value(x).rows(), tape.value(x).cols());
        if t_in == 0 {
            return Err(Error::Invalid("downsample needs at least one input frame".into()));
        }
        if f != self.feature_dim {
            return Err(Error::shape("downsample", format!("feature dim {f} vs {}", self.feature_dim)));
        }
        let total = self.output_len(t_in) * self.factor();
        let mut parts = Vec::with_capacity(3);
        if self.left_context() > 0 {
            parts.push(tape.constant(Tensor::zeros(&[self.left_context(), f])));
        }
        parts.push(x);
        if total > t_in {
            parts.push(tape.constant(Tensor::zeros(&[total - t_in, f])));
        }
        let padded = if parts.len() == 1 { x } else { tape.concat_rows(&parts)? };
        self.forward_padded(tape, padded)
    }
}

#[derive(Debug, Clone)]
pub struct ConvModule {
    pub norm: LayerNorm,
    pub pointwise_in: Linear,
    pub depthwise_kernel: ParamId,
    pub depthwise_bias: ParamId,
    pub depthwise_norm: LayerNorm,
    pub pointwise_out: Linear,
    pub kernel: usize,
    pub d_model: usize,
}

impl ConvModule {
    fn new(store: &mut ParamStore, name: &str, d: usize, kernel: usize, rng: &mut ChaCha8Rng) -> Self {
        let a = 1.0 / (kernel as f64).sqrt();
        let dw = Tensor::new(vec![kernel, d], (0..kernel * d).map(|_| rng.random_range(-a..a)).collect())
            .expect("shape");
        Self {
            norm: LayerNorm::new(store, &format!("{name}.norm"), d),
            pointwise_in: Linear::new(store, &format!("{name}.pointwise_in"), d, 2 * d, rng),
            depthwise_kernel: store.add(format!("{name}.depthwise.kernel"), dw),
            depthwise_bias: store.add(format!("{name}.depthwise.bias"), Tensor::zeros(&[d])),
            depthwise_norm: LayerNorm::new(store, &format!("{name}.depthwise_norm"), d),
            pointwise_out: Linear::new(store, &format!("{name}.pointwise_out"), d, d, rng),
            kernel,
            d_model: d,
        }
    }

    /// Returns the module output and the gated rows fed to the depthwise
    /// convolution (the streaming cache keeps the tail of these).
    fn forward(&self, tape: &mut Tape<'_>, x: Var, history: Option<Var>) -> Result<(Var, Var)> {
        let d = self.d_model;
        let h = self.norm.forward(tape, x)?;
        let h = self.pointwise_in.forward(tape, h)?;
        let a = tape.slice_cols(h, 0, d)?;
        let b = tape.slice_cols(h, d, d)?;
        let gate = tape.sigmoid(b)?;
        let glu = tape.mul(a, gate)?;
        let k = tape.param(self.depthwise_kernel);
        let bias = tape.param(self.depthwise_bias);
        let conv = match history {
            Some(hist) => {
                let joined = tape.concat_rows(&[hist, glu])?;
                tape.depthwise_conv(joined, k, bias)?
            }
            None => tape.causal_depthwise_conv(glu, k, bias)?,
        };
        let conv = self.depthwise_norm.forward(tape, conv)?;
        let conv = tape.silu(conv)?;
        Ok((self.pointwise_out.forward(tape, conv)?, glu))
    }
}

/// Conformer block with layer normalisation throughout and a causal
/// convolution module.
#[derive(Debug, Clone)]
pub struct ConformerBlock {
    pub ff_in: FeedForward,
    pub attn_norm: LayerNorm,
    pub attn: MultiHeadAttention,
    pub conv: ConvModule,
    pub ff_out: FeedForward,
    pub out_norm: LayerNorm,
}

/// Key/value rows and depthwise-convolution history of one block.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerCache {
    pub keys: Tensor,
    pub values: Tensor,
    pub conv_history: Tensor,
}

struct BlockOutput {
    out: Var,
    keys: Var,
    values: Var,
    glu: Var,
}

impl ConformerBlock {
    fn new(store: &mut ParamStore, name: &str, cfg: &EncoderConfig, rng: &mut ChaCha8Rng) -> Self {
        let d = cfg.d_model;
        let hidden = d * cfg.ff_mult;
        Self {
            ff_in: FeedForward::new(store, &format!("{name}.ff_in"), d, hidden, rng),
            attn_norm: LayerNorm::new(store, &format!("{name}.attn_norm"), d),
            attn: MultiHeadAttention::new(
                store,
                &format!("{name}.attn"),
                d,
                cfg.n_heads,
                cfg.rel_pos_window,
                cfg.rel_pos_window,
                rng,
            ),
            conv: ConvModule::new(store, &format!("{name}.conv"), d, cfg.conv_kernel, rng),
            ff_out: FeedForward::new(store, &format!("{name}.ff_out"), d, hidden, rng),
            out_norm: LayerNorm::new(store, &format!("{name}.out_norm"), d),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn forward(
        &self,
        tape: &mut Tape<'_>,
        x: Var,
        cache: Option<&LayerCache>,
        mask: &crate::masking::AttentionMask,
        q0: usize,
        k0: usize,
    ) -> Result<BlockOutput> {
        let f = self.ff_in.forward(tape, x)?;
        let f = tape.scale(f, 0.5)?;
        let x = tape.add(x, f)?;

        let a = self.attn_norm.forward(tape, x)?;
        let kv = cache.map(|c| (tape.constant(c.keys.clone()), tape.constant(c.values.clone())));
        let att = self.attn.forward(tape, a, kv, mask, q0, k0)?;
        let x = tape.add(x, att.out)?;

        let hist = cache.map(|c| tape.constant(c.conv_history.clone()));
        let (c, glu) = self.conv.forward(tape, x, hist)?;
        let x = tape.add(x, c)?;

        let f = self.ff_out.forward(tape, x)?;
        let f = tape.scale(f, 0.5)?;
        let x = tape.add(x, f)?;
        let out = self.out_norm.forward(tape, x)?;
        Ok(BlockOutput { out, keys: att.keys, values: att.values, glu })
    }
}

#[derive(Debug, Clone)]
pub struct AcousticEncoder {
    pub downsampler: Downsampler,
    pub blocks: Vec<ConformerBlock>,
    pub config: EncoderConfig,
}

/// Per-utterance streaming state: block caches, down-sampler residue and
/// progress counters.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamState {
    pub layers: Vec<LayerCache>,
    /// Input rows preceding `residue`, needed as convolution left context.
    pub history: Tensor,
    /// Input rows not yet forming a whole decimation window.
    pub residue: Tensor,
    pub input_frames_consumed: usize,
    pub frames_emitted: usize,
    pub finished: bool,
}

impl AcousticEncoder {
    pub fn new(store: &mut ParamStore, feature_dim: usize, cfg: &EncoderConfig, rng: &mut ChaCha8Rng) -> Self {
        let downsampler = Downsampler::new(store, feature_dim, cfg.d_model, cfg.downsample_factor, rng);
        let blocks = (0..cfg.n_layers)
            .map(|i| ConformerBlock::new(store, &format!("acoustic.block{i}"), cfg, rng))
            .collect();
        Self { downsampler, blocks, config: cfg.clone() }
    }

    /// Whole-utterance encoding on an existing tape.
    pub fn forward(&self, tape: &mut Tape<'_>, features: Var, cfg: &MaskConfig) -> Result<Var> {
        let mut h = self.downsampler.forward(tape, features)?;
        let t = tape.value(h).rows();
        let mask = build_mask(t, cfg)?;
        for block in &self.blocks {
            h = block.forward(tape, h, None, &mask, 0, 0)?.out;
        }
        Ok(h)
    }

    /// Whole-utterance encoding: `T_in × F` features to `⌈T_in/f⌉ × d_model`.
    pub fn encode(&self, store: &ParamStore, features: &Tensor, cfg: &MaskConfig) -> Result<Tensor> {
        let mut tape = Tape::inference(store);
        let x = tape.constant(features.clone());
        let h = self.forward(&mut tape, x, cfg)?;
        Ok(tape.value(h).clone())
    }

    pub fn downsample(&self, store: &ParamStore, features: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::inference(store);
        let x = tape.constant(features.clone());
        let h = self.downsampler.forward(&mut tape, x)?;
        Ok(tape.value(h).clone())
    }

    pub fn start_stream(&self) -> StreamState {
        let d = self.config.d_model;
        let k = self.config.conv_kernel;
        let f = self.downsampler.feature_dim;
        StreamState {
            layers: (0..self.blocks.len())
                .map(|_| LayerCache {
                    keys: Tensor::zeros(&[0, d]),
                    values: Tensor::zeros(&[0, d]),
                    conv_history: Tensor::zeros(&[k - 1, d]),
                })
                .collect(),
            history: Tensor::zeros(&[self.downsampler.left_context(), f]),
            residue: Tensor::zeros(&[0, f]),
            input_frames_consumed: 0,
            frames_emitted: 0,
            finished: false,
        }
    }

    /// Input rows per streaming step under `cfg`.
    pub fn chunk_input_frames(&self, cfg: &MaskConfig) -> usize {
        cfg.chunk_frames.unwrap_or(1).saturating_mul(self.downsampler.factor())
    }

    /// Encodes the next chunk of input features. A chunk shorter than
    /// [`Self::chunk_input_frames`] ends the utterance.
    pub fn encode_streaming(
        &self,
        store: &ParamStore,
        chunk: &Tensor,
        mut state: StreamState,
        cfg: &MaskConfig,
    ) -> Result<(Tensor, StreamState)> {
        cfg.validate()?;
        if !cfg.is_streamable() {
            return Err(Error::Streaming(format!("mask {cfg} looks ahead across chunk boundaries")));
        }
        if state.finished {
            return Err(Error::Streaming("utterance already finished".into()));
        }
        let expected = self.chunk_input_frames(cfg);
        let n = chunk.rows();
        if n > expected {
            return Err(Error::Streaming(format!("chunk of {n} input frames exceeds {expected}")));
        }
        let f = self.downsampler.feature_dim;
        if n > 0 && chunk.cols() != f {
            return Err(Error::shape("encode_streaming", format!("feature dim {} vs {f}", chunk.cols())));
        }
        let is_final = n < expected;
        let chunk = if n == 0 { Tensor::zeros(&[0, f]) } else { chunk.clone() };
        let rows = Tensor::concat_rows(&[&state.residue, &chunk])?;
        let factor = self.downsampler.factor();
        let (usable, padded) = if is_final {
            let total = rows.rows().div_ceil(factor) * factor;
            let pad = Tensor::zeros(&[total - rows.rows(), f]);
            (rows.rows(), Tensor::concat_rows(&[&rows, &pad])?)
        } else {
            let whole = rows.rows() / factor * factor;
            (whole, rows.slice_rows(0, whole))
        };
        state.input_frames_consumed += n;
        state.finished = is_final;
        let d = self.config.d_model;
        if padded.rows() == 0 {
            state.residue = rows.slice_rows(usable, rows.rows() - usable);
            return Ok((Tensor::zeros(&[0, d]), state));
        }

        let mut tape = Tape::inference(store);
        let with_history = Tensor::concat_rows(&[&state.history, &padded])?;
        let ctx = self.downsampler.left_context();
        state.history = with_history.slice_rows(with_history.rows() - ctx, ctx);
        state.residue = rows.slice_rows(usable, rows.rows() - usable);
        let x = tape.constant(with_history);
        let mut h = self.downsampler.forward_padded(&mut tape, x)?;
        let n_new = tape.value(h).rows();
        let q0 = state.frames_emitted;
        let keep = cfg.cache_frames();
        let k = self.config.conv_kernel;

        for (block, cache) in self.blocks.iter().zip(state.layers.iter_mut()) {
            let cached = cache.keys.rows();
            let k0 = q0 - cached;
            let mask = build_mask_block(cfg, q0, n_new, k0, cached + n_new);
            let out = block.forward(&mut tape, h, Some(cache), &mask, q0, k0)?;
            h = out.out;
            let keys = tape.value(out.keys);
            let values = tape.value(out.values);
            let total = keys.rows();
            let retain = keep.map_or(total, |m| m.min(total));
            cache.keys = keys.slice_rows(total - retain, retain);
            cache.values = values.slice_rows(total - retain, retain);
            let conv_in = Tensor::concat_rows(&[&cache.conv_history, tape.value(out.glu)])?;
            cache.conv_history = conv_in.slice_rows(conv_in.rows() - (k - 1), k - 1);
        }
        state.frames_emitted += n_new;
        Ok((tape.value(h).clone(), state))
    }

    /// Encoder frames that can influence output frame `t`, accounting for
    /// both the attention mask and the causal convolution of every block.
    pub fn receptive_field(&self, cfg: &MaskConfig, t: usize, seq_len: usize) -> (usize, usize) {
        let last = seq_len.saturating_sub(1);
        let (mut lo, mut hi) = (t, t);
        for _ in 0..self.blocks.len() {
            lo = cfg.earliest_key(lo).saturating_sub(self.config.conv_kernel - 1);
            hi = cfg.latest_key(hi).min(last);
        }
        (lo, hi)
    }

    /// Input feature rows feeding encoder frames `lo..=hi`.
    pub fn input_span(&self, lo: usize, hi: usize) -> (usize, usize) {
        let f = self.downsampler.factor();
        ((lo * f).saturating_sub(self.downsampler.left_context()), hi * f + f - 1)
    }
}
