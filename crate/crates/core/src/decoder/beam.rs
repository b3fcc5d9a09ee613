//! Frame-synchronous beam search. At each frame, hypotheses go through up
//! to `max_symbols_per_frame + 1` expansion rounds; in every round each live
//! hypothesis either ends the frame with blank or extends by one label, and
//! the pooled candidates of the round are pruned to the beam. Hypotheses
//! with equal token sequences are merged by log-sum-exp.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::greedy::log_softmax;
use super::{ready_times, DecodeConfig, NBestList, TimedHypothesis, DEFAULT_MAX_SYMBOLS_PER_FRAME};
use crate::encoders::LabelState;
use crate::error::{Error, Result};
use crate::numerics::{log_add_exp, Tensor};
use crate::transducer::TransducerModel;

/// Source of normalised output distributions for the search.
pub trait Scorer {
    type State: Clone;

    fn frames(&self) -> usize;
    fn n_outputs(&self) -> usize;
    fn initial(&self) -> Result<Self::State>;
    fn extend(&self, state: &Self::State, token: usize) -> Result<Self::State>;
    /// Log-probabilities over blank and labels at frame `t`.
    fn log_probs(&self, t: usize, state: &Self::State) -> Result<Vec<f64>>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BeamConfig {
    pub beam: usize,
    pub nbest: usize,
    pub max_symbols_per_frame: usize,
    /// Candidates scoring more than this below the round's best are dropped.
    pub score_gap: f64,
}

impl Default for BeamConfig {
    fn default() -> Self {
        Self { beam: 10, nbest: 10, max_symbols_per_frame: DEFAULT_MAX_SYMBOLS_PER_FRAME, score_gap: 30.0 }
    }
}

impl BeamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.nbest == 0 || self.beam < self.nbest {
            return Err(Error::Config(format!("need beam ({}) >= nbest ({}) >= 1", self.beam, self.nbest)));
        }
        if !(self.score_gap > 0.0) {
            return Err(Error::Config("score gap must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct BeamHypothesis<S> {
    pub tokens: Vec<usize>,
    pub score: f64,
    /// Frame at which each token was emitted.
    pub emit_frames: Vec<usize>,
    pub state: S,
}

enum Move {
    Blank,
    Label(usize),
}

struct Candidate {
    parent: usize,
    mv: Move,
    score: f64,
}

/// Adds `h` into `pool`, summing probability with an existing entry of the
/// same sequence; the better-scoring entry keeps its emission frames.
fn merge<S>(pool: &mut BTreeMap<Vec<usize>, BeamHypothesis<S>>, h: BeamHypothesis<S>) {
    match pool.get_mut(&h.tokens) {
        Some(existing) => {
            let total = log_add_exp(existing.score, h.score);
            if h.score > existing.score {
                *existing = h;
            }
            existing.score = total;
        }
        None => {
            pool.insert(h.tokens.clone(), h);
        }
    }
}

fn ranked<S>(pool: BTreeMap<Vec<usize>, BeamHypothesis<S>>) -> Vec<BeamHypothesis<S>> {
    let mut v: Vec<_> = pool.into_values().collect();
    v.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.tokens.cmp(&b.tokens)));
    v
}

fn prune<S>(mut v: Vec<BeamHypothesis<S>>, cfg: &BeamConfig) -> Vec<BeamHypothesis<S>> {
    v.truncate(cfg.beam);
    if let Some(best) = v.first().map(|h| h.score) {
        v.retain(|h| h.score >= best - cfg.score_gap);
    }
    v
}

pub fn beam_search_with<S: Scorer>(scorer: &S, cfg: &BeamConfig) -> Result<Vec<BeamHypothesis<S::State>>> {
    cfg.validate()?;
    let v = scorer.n_outputs();
    let mut hyps = vec![BeamHypothesis { tokens: Vec::new(), score: 0.0, emit_frames: Vec::new(), state: scorer.initial()? }];
    for t in 0..scorer.frames() {
        let mut done: BTreeMap<Vec<usize>, BeamHypothesis<S::State>> = BTreeMap::new();
        let mut live = hyps;
        for round in 0..=cfg.max_symbols_per_frame {
            if live.is_empty() {
                break;
            }
            let mut cands = Vec::new();
            for (i, h) in live.iter().enumerate() {
                let lp = scorer.log_probs(t, &h.state)?;
                if lp.len() != v {
                    return Err(Error::shape("beam_search", format!("{} scores for {v} outputs", lp.len())));
                }
                cands.push(Candidate { parent: i, mv: Move::Blank, score: h.score + lp[0] });
                if round < cfg.max_symbols_per_frame {
                    for (y, l) in lp.iter().enumerate().skip(1) {
                        cands.push(Candidate { parent: i, mv: Move::Label(y), score: h.score + l });
                    }
                }
            }
            // Stable sort keeps blank ahead of labels and lower ids first on
            // ties, which makes a width-one beam follow the greedy argmax.
            cands.sort_by(|a, b| b.score.total_cmp(&a.score));
            let best = cands.first().map_or(f64::NEG_INFINITY, |c| c.score);
            cands.truncate(cfg.beam);
            cands.retain(|c| c.score >= best - cfg.score_gap);

            let mut extended: BTreeMap<Vec<usize>, BeamHypothesis<S::State>> = BTreeMap::new();
            for c in cands {
                let parent = &live[c.parent];
                match c.mv {
                    Move::Blank => merge(&mut done, BeamHypothesis { score: c.score, ..parent.clone() }),
                    Move::Label(y) => {
                        let mut tokens = parent.tokens.clone();
                        tokens.push(y);
                        if let Some(e) = extended.get_mut(&tokens) {
                            let total = log_add_exp(e.score, c.score);
                            e.score = total;
                            continue;
                        }
                        let mut emit_frames = parent.emit_frames.clone();
                        emit_frames.push(t);
                        let state = scorer.extend(&parent.state, y)?;
                        extended.insert(tokens.clone(), BeamHypothesis { tokens, score: c.score, emit_frames, state });
                    }
                }
            }
            live = ranked(extended);
        }
        hyps = prune(ranked(done), cfg);
    }
    hyps.truncate(cfg.nbest);
    Ok(hyps)
}

/// Scores hypotheses against fixed acoustic encodings with the model's label
/// encoder run incrementally.
pub struct ModelScorer<'m> {
    model: &'m TransducerModel,
    projected: Tensor,
    label_cfg: crate::masking::LabelMaskConfig,
}

#[derive(Debug, Clone)]
pub struct ModelState {
    pub label: LabelState,
    pub projected: Vec<f64>,
    /// Label-encoder output rows so far, one per prefix.
    pub rows: Vec<Vec<f64>>,
}

impl<'m> ModelScorer<'m> {
    pub fn new(model: &'m TransducerModel, encodings: &Tensor, label_cfg: crate::masking::LabelMaskConfig) -> Result<Self> {
        Ok(Self { model, projected: model.joint.project_acoustic(&model.params, encodings)?, label_cfg })
    }
}

impl Scorer for ModelScorer<'_> {
    type State = ModelState;

    fn frames(&self) -> usize {
        self.projected.rows()
    }

    fn n_outputs(&self) -> usize {
        self.model.n_outputs()
    }

    fn initial(&self) -> Result<ModelState> {
        let m = self.model;
        let label = m.label.start(&m.params, &self.label_cfg)?;
        let projected = m.joint.project_label_row(&m.params, &label.output);
        Ok(ModelState { rows: vec![label.output.clone()], label, projected })
    }

    fn extend(&self, state: &ModelState, token: usize) -> Result<ModelState> {
        let m = self.model;
        let label = m.label.step(&m.params, &state.label, token, &self.label_cfg)?;
        let projected = m.joint.project_label_row(&m.params, &label.output);
        let mut rows = state.rows.clone();
        rows.push(label.output.clone());
        Ok(ModelState { label, projected, rows })
    }

    fn log_probs(&self, t: usize, state: &ModelState) -> Result<Vec<f64>> {
        Ok(log_softmax(&self.model.joint.combine(&self.model.params, self.projected.row(t), &state.projected)))
    }
}

/// N-best decoding. The search proposes candidate sequences; each returned
/// hypothesis is then scored by its full alignment sum under the same
/// encodings, and the list is ordered by that score.
pub fn beam_search(model: &TransducerModel, features: &Tensor, cfg: &DecodeConfig, beam: &BeamConfig) -> Result<NBestList> {
    cfg.validate()?;
    let beam = BeamConfig { max_symbols_per_frame: cfg.max_symbols_per_frame, ..*beam };
    let enc = model.encode(features, &cfg.mask)?;
    let scorer = ModelScorer::new(model, &enc, cfg.label_mask)?;
    let found = beam_search_with(&scorer, &beam)?;
    let ready = ready_times(model, &cfg.mask, enc.rows(), features.rows());
    let mut scored = Vec::with_capacity(found.len());
    for h in found {
        let labels = Tensor::from_rows(&h.state.rows)?;
        let score = model.lattice(&enc, &labels, &h.tokens)?.log_prob();
        let emit_audio_ms = h.emit_frames.iter().map(|&t| ready[t]).collect();
        scored.push((TimedHypothesis { tokens: h.tokens, score, emit_audio_ms }, labels));
    }
    // Stable: equal scores keep search order.
    scored.sort_by(|a, b| b.0.score.total_cmp(&a.0.score));
    let (hypotheses, label_caches) = scored.into_iter().unzip();
    Ok(NBestList { hypotheses, label_caches })
}
