//! Transducer loss over the `T × (U+1)` alignment lattice.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{log_add_exp, Tensor};

/// Normalised output log-probabilities at every lattice node.
#[derive(Debug, Clone, PartialEq)]
pub struct Lattice {
    frames: usize,
    labels: Vec<usize>,
    n_outputs: usize,
    /// `T × (U+1) × (V+1)`, row-major.
    logp: Vec<f64>,
}

impl Lattice {
    /// Builds a lattice from raw logits laid out as `(T·(U+1)) × (V+1)`.
    pub fn from_logits(logits: &Tensor, frames: usize, labels: &[usize]) -> Result<Self> {
        let nodes = frames * (labels.len() + 1);
        if logits.rows() != nodes {
            return Err(Error::Lattice(format!("{} logit rows for {nodes} nodes", logits.rows())));
        }
        let v = logits.cols();
        let mut logp = vec![0.0; nodes * v];
        for i in 0..nodes {
            let row = logits.row(i);
            let lse = crate::numerics::log_sum_exp(row);
            for (o, x) in logp[i * v..(i + 1) * v].iter_mut().zip(row) {
                *o = x - lse;
            }
        }
        Self::build(frames, labels, v, logp)
    }

    /// Builds a lattice from log-probabilities that must already be
    /// normalised at every node.
    pub fn from_log_probs(logp: Vec<f64>, frames: usize, labels: &[usize], n_outputs: usize) -> Result<Self> {
        if logp.len() != frames * (labels.len() + 1) * n_outputs {
            return Err(Error::Lattice(format!("{} log-probs for the lattice shape", logp.len())));
        }
        for (i, node) in logp.chunks(n_outputs.max(1)).enumerate() {
            let z = crate::numerics::log_sum_exp(node);
            if z.abs() > 1e-9 {
                return Err(Error::Lattice(format!("node {i} is not normalised (logsumexp {z})")));
            }
        }
        Self::build(frames, labels, n_outputs, logp)
    }

    fn build(frames: usize, labels: &[usize], n_outputs: usize, logp: Vec<f64>) -> Result<Self> {
        if frames == 0 {
            return Err(Error::Lattice("lattice needs at least one frame".into()));
        }
        if n_outputs < 2 {
            return Err(Error::Lattice("need blank plus at least one label".into()));
        }
        if let Some(&id) = labels.iter().find(|&&y| y == 0 || y >= n_outputs) {
            return Err(Error::OutOfVocabulary { id, vocab: n_outputs - 1 });
        }
        if logp.iter().any(|x| x.is_nan() || *x == f64::INFINITY) {
            return Err(Error::NonFinite { op: "lattice" });
        }
        Ok(Self { frames, labels: labels.to_vec(), n_outputs, logp })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn n_outputs(&self) -> usize {
        self.n_outputs
    }

    pub fn node(&self, t: usize, u: usize) -> &[f64] {
        let i = t * (self.labels.len() + 1) + u;
        &self.logp[i * self.n_outputs..(i + 1) * self.n_outputs]
    }

    pub fn blank(&self, t: usize, u: usize) -> f64 {
        self.node(t, u)[0]
    }

    /// Log-probability of emitting `y_{u+1}` at node `(t, u)`.
    pub fn emit(&self, t: usize, u: usize) -> f64 {
        self.node(t, u)[self.labels[u]]
    }

    /// Forward variables, `T × (U+1)`.
    pub fn alpha(&self) -> Vec<f64> {
        let (t_n, u_n) = (self.frames, self.labels.len() + 1);
        let mut a = vec![f64::NEG_INFINITY; t_n * u_n];
        a[0] = 0.0;
        for t in 0..t_n {
            for u in 0..u_n {
                if t == 0 && u == 0 {
                    continue;
                }
                let from_blank = if t > 0 { a[(t - 1) * u_n + u] + self.blank(t - 1, u) } else { f64::NEG_INFINITY };
                let from_emit = if u > 0 { a[t * u_n + u - 1] + self.emit(t, u - 1) } else { f64::NEG_INFINITY };
                a[t * u_n + u] = log_add_exp(from_blank, from_emit);
            }
        }
        a
    }

    /// Backward variables, `T × (U+1)`: log-probability of completing the
    /// alignment from node `(t, u)`.
    pub fn beta(&self) -> Vec<f64> {
        let (t_n, u_n) = (self.frames, self.labels.len() + 1);
        let mut b = vec![f64::NEG_INFINITY; t_n * u_n];
        for t in (0..t_n).rev() {
            for u in (0..u_n).rev() {
                let via_blank = if t + 1 < t_n {
                    b[(t + 1) * u_n + u] + self.blank(t, u)
                } else if u + 1 == u_n {
                    self.blank(t, u)
                } else {
                    f64::NEG_INFINITY
                };
                let via_emit = if u + 1 < u_n { b[t * u_n + u + 1] + self.emit(t, u) } else { f64::NEG_INFINITY };
                b[t * u_n + u] = log_add_exp(via_blank, via_emit);
            }
        }
        b
    }

    /// Total log-probability of the label sequence.
    pub fn log_prob(&self) -> f64 {
        let u = self.labels.len();
        let a = self.alpha();
        a[(self.frames - 1) * (u + 1) + u] + self.blank(self.frames - 1, u)
    }
}

/// Loss gradient with respect to each transition log-probability.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionGrads {
    /// `T × (U+1)`, gradient of the loss w.r.t. `blank(t, u)`.
    pub blank: Vec<f64>,
    /// `T × U`, gradient of the loss w.r.t. `emit(t, u)`.
    pub emit: Vec<f64>,
}

impl TransitionGrads {
    /// Gradient w.r.t. the unnormalised logits of every node, assuming the
    /// lattice log-probabilities are a log-softmax of those logits.
    pub fn to_logit_grads(&self, lat: &Lattice) -> Tensor {
        let (t_n, u_len, v) = (lat.frames, lat.labels.len(), lat.n_outputs);
        let mut out = vec![0.0; t_n * (u_len + 1) * v];
        for t in 0..t_n {
            for u in 0..=u_len {
                let i = t * (u_len + 1) + u;
                let gb = self.blank[i];
                let ge = if u < u_len { self.emit[t * u_len + u] } else { 0.0 };
                let total = gb + ge;
                let row = &mut out[i * v..(i + 1) * v];
                for (k, (o, lp)) in row.iter_mut().zip(lat.node(t, u)).enumerate() {
                    *o = -lp.exp() * total;
                    if k == 0 {
                        *o += gb;
                    }
                }
                if u < u_len {
                    row[lat.labels[u]] += ge;
                }
            }
        }
        Tensor::new(vec![t_n * (u_len + 1), v], out).expect("shape")
    }
}

#[derive(Debug, Clone)]
pub struct RnntOutput {
    pub loss: f64,
    pub transitions: TransitionGrads,
    pub dlogits: Tensor,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Extra weight on label-transition gradients; 0 disables.
    pub fastemit_lambda: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { fastemit_lambda: 0.0 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.fastemit_lambda >= 0.0 && self.fastemit_lambda.is_finite()) {
            return Err(Error::Config(format!("fastemit lambda {} must be finite and non-negative", self.fastemit_lambda)));
        }
        Ok(())
    }
}

/// Negative log-likelihood of the label sequence with its gradient.
pub fn rnnt_loss(lat: &Lattice) -> Result<RnntOutput> {
    let (t_n, u_len) = (lat.frames, lat.labels.len());
    let u_n = u_len + 1;
    let alpha = lat.alpha();
    let beta = lat.beta();
    let log_p = alpha[(t_n - 1) * u_n + u_len] + lat.blank(t_n - 1, u_len);
    if !log_p.is_finite() {
        return Err(Error::NonFinite { op: "rnnt_loss" });
    }
    let mut blank = vec![0.0; t_n * u_n];
    let mut emit = vec![0.0; t_n * u_len];
    for t in 0..t_n {
        for u in 0..u_n {
            let a = alpha[t * u_n + u];
            let next = if t + 1 < t_n {
                beta[(t + 1) * u_n + u]
            } else if u == u_len {
                0.0
            } else {
                f64::NEG_INFINITY
            };
            blank[t * u_n + u] = -(a + lat.blank(t, u) + next - log_p).exp();
            if u < u_len {
                emit[t * u_len + u] = -(a + lat.emit(t, u) + beta[t * u_n + u + 1] - log_p).exp();
            }
        }
    }
    let transitions = TransitionGrads { blank, emit };
    let dlogits = transitions.to_logit_grads(lat);
    Ok(RnntOutput { loss: -log_p, transitions, dlogits })
}

/// Scales the gradient flowing through label transitions by `1 + λ`.
pub fn fastemit_adjust(lat: &Lattice, grads: &TransitionGrads, lambda: f64) -> Result<TransitionGrads> {
    LossConfig { fastemit_lambda: lambda }.validate()?;
    if grads.blank.len() != lat.frames * (lat.labels.len() + 1) || grads.emit.len() != lat.frames * lat.labels.len() {
        return Err(Error::Lattice("transition gradients do not match the lattice".into()));
    }
    if lambda == 0.0 {
        return Ok(grads.clone());
    }
    Ok(TransitionGrads { blank: grads.blank.clone(), emit: grads.emit.iter().map(|g| g * (1.0 + lambda)).collect() })
}

/// Loss and logit gradient with the configured regularisation applied.
pub fn transducer_loss(lat: &Lattice, cfg: &LossConfig) -> Result<RnntOutput> {
    cfg.validate()?;
    let mut out = rnnt_loss(lat)?;
    if cfg.fastemit_lambda > 0.0 {
        out.transitions = fastemit_adjust(lat, &out.transitions, cfg.fastemit_lambda)?;
        out.dlogits = out.transitions.to_logit_grads(lat);
    }
    Ok(out)
}
