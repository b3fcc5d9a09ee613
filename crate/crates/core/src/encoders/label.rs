//! Causal transformer over the label history. Row 0 encodes the
//! start-of-sequence position; row `u` encodes the history `y_1..y_u`.

use rand_chacha::ChaCha8Rng;

use super::layers::{xavier, FeedForward, LayerNorm, MultiHeadAttention};
use super::EncoderConfig;
use crate::error::{Error, Result};
use crate::masking::{build_label_mask, AttentionMask, LabelMaskConfig};
use crate::numerics::{ParamId, ParamStore, Tape, Tensor, Var};

#[derive(Debug, Clone)]
pub struct TransformerLayer {
    pub attn_norm: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ff: FeedForward,
}

#[derive(Debug, Clone)]
pub struct LabelEncoder {
    /// `(V + 1) × d`; row 0 is the start-of-sequence embedding.
    pub embedding: ParamId,
    pub layers: Vec<TransformerLayer>,
    pub final_norm: LayerNorm,
    pub vocab_size: usize,
    pub config: EncoderConfig,
}

/// Incremental label-encoder state after consuming a token prefix.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelState {
    pub keys: Vec<Tensor>,
    pub values: Vec<Tensor>,
    /// Number of rows encoded so far, including the start position.
    pub position: usize,
    /// Encoding of the most recent position, length `d_model`.
    pub output: Vec<f64>,
}

impl LabelEncoder {
    pub fn new(store: &mut ParamStore, vocab_size: usize, cfg: &EncoderConfig, rng: &mut ChaCha8Rng) -> Self {
        let d = cfg.d_model;
        let embedding = store.add("label.embedding", xavier(vocab_size + 1, d, rng));
        let layers = (0..cfg.n_layers)
            .map(|i| {
                let name = format!("label.layer{i}");
                TransformerLayer {
                    attn_norm: LayerNorm::new(store, &format!("{name}.attn_norm"), d),
                    attn: MultiHeadAttention::new(store, &format!("{name}.attn"), d, cfg.n_heads, cfg.rel_pos_window, 0, rng),
                    ff: FeedForward::new(store, &format!("{name}.ff"), d, d * cfg.ff_mult, rng),
                }
            })
            .collect();
        let final_norm = LayerNorm::new(store, "label.final_norm", d);
        Self { embedding, layers, final_norm, vocab_size, config: cfg.clone() }
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        match tokens.iter().find(|&&y| y == 0 || y > self.vocab_size) {
            Some(&id) => Err(Error::OutOfVocabulary { id, vocab: self.vocab_size }),
            None => Ok(()),
        }
    }

    fn layer_forward(
        &self,
        tape: &mut Tape<'_>,
        layer: &TransformerLayer,
        x: Var,
        cache: Option<(Var, Var)>,
        mask: &AttentionMask,
        q0: usize,
        k0: usize,
    ) -> Result<(Var, Var, Var)> {
        let a = layer.attn_norm.forward(tape, x)?;
        let att = layer.attn.forward(tape, a, cache, mask, q0, k0)?;
        let x = tape.add(x, att.out)?;
        let f = layer.ff.forward(tape, x)?;
        Ok((tape.add(x, f)?, att.keys, att.values))
    }

    /// `(U + 1) × d` encodings of all prefixes of `tokens` on a tape.
    pub fn forward(&self, tape: &mut Tape<'_>, tokens: &[usize], cfg: &LabelMaskConfig) -> Result<Var> {
        self.check_tokens(tokens)?;
        let mut ids = Vec::with_capacity(tokens.len() + 1);
        ids.push(0);
        ids.extend_from_slice(tokens);
        let table = tape.param(self.embedding);
        let mut h = tape.embedding(table, &ids)?;
        let mask = build_label_mask(ids.len(), cfg);
        for layer in &self.layers {
            h = self.layer_forward(tape, layer, h, None, &mask, 0, 0)?.0;
        }
        self.final_norm.forward(tape, h)
    }

    pub fn encode(&self, store: &ParamStore, tokens: &[usize], cfg: &LabelMaskConfig) -> Result<Tensor> {
        let mut tape = Tape::inference(store);
        let h = self.forward(&mut tape, tokens, cfg)?;
        Ok(tape.value(h).clone())
    }

    /// State after the start-of-sequence position only.
    pub fn start(&self, store: &ParamStore, cfg: &LabelMaskConfig) -> Result<LabelState> {
        let d = self.config.d_model;
        let empty = LabelState {
            keys: vec![Tensor::zeros(&[0, d]); self.layers.len()],
            values: vec![Tensor::zeros(&[0, d]); self.layers.len()],
            position: 0,
            output: Vec::new(),
        };
        self.advance(store, &empty, 0, cfg)
    }

    /// Extends `state` by one token without re-encoding the prefix.
    pub fn step(&self, store: &ParamStore, state: &LabelState, token: usize, cfg: &LabelMaskConfig) -> Result<LabelState> {
        self.check_tokens(&[token])?;
        self.advance(store, state, token, cfg)
    }

    fn advance(&self, store: &ParamStore, state: &LabelState, id: usize, cfg: &LabelMaskConfig) -> Result<LabelState> {
        let mut tape = Tape::inference(store);
        let table = tape.param(self.embedding);
        let mut h = tape.embedding(table, &[id])?;
        let q0 = state.position;
        let keep = cfg.cache_tokens();
        let mut next = LabelState { keys: Vec::new(), values: Vec::new(), position: q0 + 1, output: Vec::new() };
        for (l, layer) in self.layers.iter().enumerate() {
            let cached = state.keys[l].rows();
            let k0 = q0 - cached;
            let mask = AttentionMask::from_fn(1, cached + 1, |_, j| cfg.allows(q0, k0 + j));
            let kv = (tape.constant(state.keys[l].clone()), tape.constant(state.values[l].clone()));
            let (out, keys, values) = self.layer_forward(&mut tape, layer, h, Some(kv), &mask, q0, k0)?;
            h = out;
            let keys = tape.value(keys);
            let total = keys.rows();
            let retain = keep.map_or(total, |m| m.min(total));
            next.keys.push(keys.slice_rows(total - retain, retain));
            next.values.push(tape.value(values).slice_rows(total - retain, retain));
        }
        let h = self.final_norm.forward(&mut tape, h)?;
        next.output = tape.value(h).data().to_vec();
        Ok(next)
    }
}
