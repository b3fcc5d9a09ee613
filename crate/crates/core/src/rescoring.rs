//! Second-pass acoustic rescoring of n-best lists under a wider mask.

use serde::{Deserialize, Serialize};

use crate::decoder::{NBestList, TimedHypothesis};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::masking::{LabelMaskConfig, MaskConfig};
use crate::numerics::Tensor;
use crate::transducer::TransducerModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScoreMode {
    /// Sum over all alignments.
    FullSum,
    /// Best single alignment.
    Viterbi,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RescoreConfig {
    pub wide: MaskConfig,
    pub reuse_label_cache: bool,
    pub mode: ScoreMode,
    pub label_mask: LabelMaskConfig,
}

impl RescoreConfig {
    pub fn new(wide: MaskConfig) -> Self {
        Self { wide, reuse_label_cache: true, mode: ScoreMode::FullSum, label_mask: LabelMaskConfig::default() }
    }

    /// The second pass must see at least the first pass's future context.
    pub fn check_widens(&self, first_pass: &MaskConfig, n_layers: usize, seq_len: usize) -> Result<()> {
        if !self.wide.future_dominates(first_pass, n_layers, seq_len) {
            return Err(Error::Config(format!("{} does not widen {first_pass}", self.wide)));
        }
        Ok(())
    }
}

/// Log-probability of `tokens` given acoustic encodings. `cached_labels`
/// replaces the label-encoder pass when supplied.
pub fn score_with_encodings(
    model: &TransducerModel,
    encodings: &Tensor,
    tokens: &[usize],
    cached_labels: Option<&Tensor>,
    label_cfg: &LabelMaskConfig,
    mode: ScoreMode,
) -> Result<f64> {
    let computed;
    let labels = match cached_labels {
        Some(c) => {
            if c.rows() != tokens.len() + 1 {
                return Err(Error::shape("score_hypothesis", format!("{} cached rows for {} tokens", c.rows(), tokens.len())));
            }
            c
        }
        None => {
            computed = model.encode_labels(tokens, label_cfg)?;
            &computed
        }
    };
    let lat = model.lattice(encodings, labels, tokens)?;
    Ok(match mode {
        ScoreMode::FullSum => lat.log_prob(),
        ScoreMode::Viterbi => viterbi(&lat),
    })
}

fn viterbi(lat: &crate::transducer::Lattice) -> f64 {
    let (t_n, u_n) = (lat.frames(), lat.labels().len() + 1);
    let mut a = vec![f64::NEG_INFINITY; t_n * u_n];
    a[0] = 0.0;
    for t in 0..t_n {
        for u in 0..u_n {
            if t == 0 && u == 0 {
                continue;
            }
            let b = if t > 0 { a[(t - 1) * u_n + u] + lat.blank(t - 1, u) } else { f64::NEG_INFINITY };
            let e = if u > 0 { a[t * u_n + u - 1] + lat.emit(t, u - 1) } else { f64::NEG_INFINITY };
            a[t * u_n + u] = b.max(e);
        }
    }
    a[t_n * u_n - 1] + lat.blank(t_n - 1, u_n - 1)
}

pub fn score_hypothesis(
    model: &TransducerModel,
    features: &Tensor,
    tokens: &[usize],
    cfg: &MaskConfig,
    cached_labels: Option<&Tensor>,
    label_cfg: &LabelMaskConfig,
) -> Result<f64> {
    let enc = model.encode(features, cfg)?;
    score_with_encodings(model, &enc, tokens, cached_labels, label_cfg, ScoreMode::FullSum)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RescoredHypothesis {
    pub hypothesis: TimedHypothesis,
    pub first_pass_score: f64,
    pub first_pass_rank: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RescoredList {
    pub hypotheses: Vec<RescoredHypothesis>,
}

impl RescoredList {
    pub fn best(&self) -> Option<&TimedHypothesis> {
        self.hypotheses.first().map(|h| &h.hypothesis)
    }

    pub fn into_nbest(self) -> NBestList {
        NBestList { hypotheses: self.hypotheses.into_iter().map(|h| h.hypothesis).collect(), label_caches: Vec::new() }
    }
}

/// Encodes the utterance once under `rc.wide`, rescores every hypothesis and
/// re-sorts. Ties keep first-pass order.
pub fn rescore_nbest(
    model: &TransducerModel,
    features: &Tensor,
    nbest: &NBestList,
    rc: &RescoreConfig,
    exec: Exec,
) -> Result<RescoredList> {
    if nbest.hypotheses.is_empty() {
        return Err(Error::Invalid("cannot rescore an empty n-best list".into()));
    }
    let enc = model.encode(features, &rc.wide)?;
    let use_cache = rc.reuse_label_cache && nbest.label_caches.len() == nbest.hypotheses.len();
    let scores = exec.map_range(nbest.hypotheses.len(), |i| {
        let cache = use_cache.then(|| &nbest.label_caches[i]);
        score_with_encodings(model, &enc, &nbest.hypotheses[i].tokens, cache, &rc.label_mask, rc.mode)
    });
    let mut out = Vec::with_capacity(scores.len());
    for (rank, (h, s)) in nbest.hypotheses.iter().zip(scores).enumerate() {
        out.push(RescoredHypothesis {
            hypothesis: TimedHypothesis { score: s?, ..h.clone() },
            first_pass_score: h.score,
            first_pass_rank: rank,
        });
    }
    out.sort_by(|a, b| b.hypothesis.score.total_cmp(&a.hypothesis.score));
    Ok(RescoredList { hypotheses: out })
}
