//! Parameterised building blocks shared by the acoustic and label encoders.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::masking::AttentionMask;
use crate::numerics::{ParamId, ParamStore, Tape, Tensor, Var};

pub(crate) const LN_EPS: f64 = 1e-5;

pub(crate) fn xavier(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.random_range(-a..a)).collect();
    Tensor::new(vec![rows, cols], data).expect("shape")
}

/// Affine map `x·W + b` with `W` stored as `in × out`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let weight = store.add(format!("{name}.weight"), xavier(d_in, d_out, rng));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[d_out]));
        Self { weight, bias, d_in, d_out }
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let w = tape.param(self.weight);
        let b = tape.param(self.bias);
        let y = tape.matmul(x, w)?;
        tape.add_row(y, b)
    }

    /// Single-row evaluation without a tape.
    pub fn apply_row(&self, store: &ParamStore, x: &[f64]) -> Vec<f64> {
        let w = store.get(self.weight).data();
        let mut out = store.get(self.bias).data().to_vec();
        for (i, xi) in x.iter().enumerate() {
            if *xi == 0.0 {
                continue;
            }
            for (o, wv) in out.iter_mut().zip(&w[i * self.d_out..(i + 1) * self.d_out]) {
                *o += xi * wv;
            }
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        let gain = store.add(format!("{name}.gain"), Tensor::full(&[d], 1.0));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[d]));
        Self { gain, bias }
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let g = tape.param(self.gain);
        let b = tape.param(self.bias);
        tape.layer_norm(x, g, b, LN_EPS)
    }
}

/// Pre-normalised two-layer feed-forward block with swish activation.
#[derive(Debug, Clone)]
pub struct FeedForward {
    pub norm: LayerNorm,
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            norm: LayerNorm::new(store, &format!("{name}.norm"), d),
            up: Linear::new(store, &format!("{name}.up"), d, hidden, rng),
            down: Linear::new(store, &format!("{name}.down"), hidden, d, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let h = self.norm.forward(tape, x)?;
        let h = self.up.forward(tape, h)?;
        let h = tape.silu(h)?;
        self.down.forward(tape, h)
    }
}

/// Learned per-head additive attention bias indexed by the clipped signed
/// offset `key − query`, with separate entries for past and future offsets.
#[derive(Debug, Clone)]
pub struct RelPosBias {
    pub table: ParamId,
    pub n_heads: usize,
    pub past_window: usize,
    pub future_window: usize,
}

impl RelPosBias {
    pub fn new(store: &mut ParamStore, name: &str, n_heads: usize, past_window: usize, future_window: usize) -> Self {
        let width = past_window + future_window + 1;
        let table = store.add(format!("{name}.table"), Tensor::zeros(&[n_heads, width]));
        Self { table, n_heads, past_window, future_window }
    }

    fn width(&self) -> usize {
        self.past_window + self.future_window + 1
    }

    /// Column of the table used for a key at absolute position `s` seen from
    /// query `t`.
    pub fn offset_index(&self, t: usize, s: usize) -> usize {
        let off = s as i64 - t as i64;
        let clipped = off.clamp(-(self.past_window as i64), self.future_window as i64);
        (clipped + self.past_window as i64) as usize
    }

    /// Bias matrix of one head for queries `q0..q0+nq` and keys `k0..k0+nk`.
    pub fn bias(&self, tape: &mut Tape<'_>, head: usize, q0: usize, nq: usize, k0: usize, nk: usize) -> Result<Var> {
        let table = tape.param(self.table);
        let base = head * self.width();
        let mut idx = Vec::with_capacity(nq * nk);
        for i in 0..nq {
            for j in 0..nk {
                idx.push(base + self.offset_index(q0 + i, k0 + j));
            }
        }
        tape.gather(table, idx, vec![nq, nk])
    }
}

/// Multi-head self-attention with relative position bias and an explicit
/// mask.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub rel: RelPosBias,
    pub n_heads: usize,
    pub d_model: usize,
}

/// Output of one attention call together with the full key/value rows it
/// used, so that a streaming caller can update its cache.
pub struct AttentionOutput {
    pub out: Var,
    pub keys: Var,
    pub values: Var,
}

impl MultiHeadAttention {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_model: usize,
        n_heads: usize,
        past_window: usize,
        future_window: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            query: Linear::new(store, &format!("{name}.query"), d_model, d_model, rng),
            key: Linear::new(store, &format!("{name}.key"), d_model, d_model, rng),
            value: Linear::new(store, &format!("{name}.value"), d_model, d_model, rng),
            out: Linear::new(store, &format!("{name}.out"), d_model, d_model, rng),
            rel: RelPosBias::new(store, &format!("{name}.rel"), n_heads, past_window, future_window),
            n_heads,
            d_model,
        }
    }

    /// Attends the rows of `x` (absolute positions `q0..`) to the cached
    /// key/value rows followed by the rows of `x` itself. `mask` covers
    /// queries × (cached + new) keys; the first key sits at position `k0`.
    pub fn forward(
        &self,
        tape: &mut Tape<'_>,
        x: Var,
        cache: Option<(Var, Var)>,
        mask: &AttentionMask,
        q0: usize,
        k0: usize,
    ) -> Result<AttentionOutput> {
        let nq = tape.value(x).rows();
        let q = self.query.forward(tape, x)?;
        let k_new = self.key.forward(tape, x)?;
        let v_new = self.value.forward(tape, x)?;
        let (keys, values) = match cache {
            Some((kc, vc)) if tape.value(kc).rows() > 0 => (tape.concat_rows(&[kc, k_new])?, tape.concat_rows(&[vc, v_new])?),
            _ => (k_new, v_new),
        };
        let nk = tape.value(keys).rows();
        let dh = self.d_model / self.n_heads;
        let alpha = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(self.n_heads);
        for h in 0..self.n_heads {
            let qh = tape.slice_cols(q, h * dh, dh)?;
            let kh = tape.slice_cols(keys, h * dh, dh)?;
            let vh = tape.slice_cols(values, h * dh, dh)?;
            let s = tape.matmul_nt(qh, kh)?;
            let b = self.rel.bias(tape, h, q0, nq, k0, nk)?;
            let s = tape.add(s, b)?;
            let s = tape.scale(s, alpha)?;
            let s = tape.mask_fill(s, mask.as_slice())?;
            let p = tape.softmax(s)?;
            heads.push(tape.matmul(p, vh)?);
        }
        let cat = if heads.len() == 1 { heads[0] } else { tape.concat_cols(&heads)? };
        let out = self.out.forward(tape, cat)?;
        Ok(AttentionOutput { out, keys, values })
    }
}
