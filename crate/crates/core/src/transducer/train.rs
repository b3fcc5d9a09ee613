//! Mini-batch training with one mask configuration sampled per batch.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::LossConfig;
use super::model::{TransducerModel, UtteranceGrad};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::masking::{sample_config, LabelMaskConfig, MaskConfig, VariableMaskSet};
use crate::numerics::{ParamStore, Tensor};

/// Features and reference labels of one training utterance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Utterance {
    pub id: String,
    pub features: Tensor,
    pub tokens: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum MaskSchedule {
    Fixed(MaskConfig),
    Variable(VariableMaskSet),
}

impl MaskSchedule {
    pub fn sample(&self, rng: &mut ChaCha8Rng) -> Result<MaskConfig> {
        match self {
            MaskSchedule::Fixed(cfg) => {
                cfg.validate()?;
                Ok(*cfg)
            }
            MaskSchedule::Variable(set) => sample_config(set, rng),
        }
    }

    pub fn configs(&self) -> Vec<MaskConfig> {
        match self {
            MaskSchedule::Fixed(cfg) => vec![*cfg],
            MaskSchedule::Variable(set) => set.configs(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub learning_rate: f64,
    /// Learning rate multiplier applied after every step.
    pub decay: f64,
    pub momentum: f64,
    /// Rescales the whole gradient when its L2 norm exceeds this.
    pub clip_norm: Option<f64>,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self { learning_rate: 0.05, decay: 0.999, momentum: 0.0, clip_norm: None }
    }
}

/// Stochastic gradient descent with exponential learning-rate decay.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd {
    pub config: SgdConfig,
    pub step: usize,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(config: SgdConfig) -> Result<Self> {
        let ok = config.learning_rate > 0.0
            && config.learning_rate.is_finite()
            && config.decay > 0.0
            && config.decay <= 1.0
            && (0.0..1.0).contains(&config.momentum)
            && config.clip_norm.is_none_or(|c| c > 0.0);
        if !ok {
            return Err(Error::Config(format!("invalid optimiser settings {config:?}")));
        }
        Ok(Self { config, step: 0, velocity: Vec::new() })
    }

    pub fn learning_rate(&self) -> f64 {
        self.config.learning_rate * self.config.decay.powi(self.step as i32)
    }

    /// Applies one update; returns the gradient norm before clipping.
    pub fn apply(&mut self, params: &mut ParamStore, grads: &[Option<Vec<f64>>]) -> f64 {
        let norm = grads.iter().flatten().flat_map(|g| g.iter()).map(|x| x * x).sum::<f64>().sqrt();
        let clip = match self.config.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        let lr = self.learning_rate();
        if self.velocity.is_empty() && self.config.momentum > 0.0 {
            self.velocity = params.iter().map(|(_, _, t)| vec![0.0; t.len()]).collect();
        }
        let ids: Vec<_> = params.iter().map(|(id, _, _)| id).collect();
        for id in ids {
            let Some(g) = grads.get(id.0).and_then(Option::as_ref) else { continue };
            let p = params.get_mut(id).data_mut();
            if self.config.momentum > 0.0 {
                let v = &mut self.velocity[id.0];
                for ((pi, vi), gi) in p.iter_mut().zip(v.iter_mut()).zip(g) {
                    *vi = self.config.momentum * *vi + clip * gi;
                    *pi -= lr * *vi;
                }
            } else {
                for (pi, gi) in p.iter_mut().zip(g) {
                    *pi -= lr * clip * gi;
                }
            }
        }
        self.step += 1;
        norm
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: usize,
    pub mean_loss: f64,
    pub mask: MaskConfig,
    pub grad_norm: f64,
    pub learning_rate: f64,
}

/// Sums per-utterance gradients in batch order.
fn reduce(results: Vec<UtteranceGrad>, n_params: usize) -> (f64, Vec<Option<Vec<f64>>>) {
    let mut total = 0.0;
    let mut acc: Vec<Option<Vec<f64>>> = vec![None; n_params];
    for r in results {
        total += r.loss;
        for (slot, g) in acc.iter_mut().zip(r.grads) {
            let Some(g) = g else { continue };
            match slot {
                Some(s) => s.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                None => *slot = Some(g),
            }
        }
    }
    (total, acc)
}

/// One optimiser step on `batch` under a single sampled mask. The loss is the
/// mean over utterances.
#[allow(clippy::too_many_arguments)]
pub fn training_step(
    model: &mut TransducerModel,
    batch: &[&Utterance],
    schedule: &MaskSchedule,
    label_cfg: &LabelMaskConfig,
    loss_cfg: &LossConfig,
    opt: &mut Sgd,
    mask_rng: &mut ChaCha8Rng,
    exec: Exec,
) -> Result<StepReport> {
    if batch.is_empty() {
        return Err(Error::Invalid("empty training batch".into()));
    }
    loss_cfg.validate()?;
    let mask = schedule.sample(mask_rng)?;
    let step = opt.step;
    let results = {
        let m = &*model;
        exec.map(batch, |u| m.utterance_grad(&u.features, &u.tokens, &mask, label_cfg, loss_cfg))
    };
    let results = results.into_iter().collect::<Result<Vec<_>>>().map_err(|e| match e {
        Error::NonFinite { op } => Error::Diverged { step, detail: format!("non-finite value in {op} under {mask}") },
        other => other,
    })?;
    let n = batch.len() as f64;
    let (total, mut grads) = reduce(results, model.params.len());
    let mean_loss = total / n;
    for g in grads.iter_mut().flatten() {
        g.iter_mut().for_each(|x| *x /= n);
    }
    if !mean_loss.is_finite() || grads.iter().flatten().flatten().any(|x| !x.is_finite()) {
        return Err(Error::Diverged { step, detail: format!("loss {mean_loss} under {mask}") });
    }
    let learning_rate = opt.learning_rate();
    let grad_norm = opt.apply(&mut model.params, &grads);
    Ok(StepReport { step, mean_loss, mask, grad_norm, learning_rate })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub sgd: SgdConfig,
    pub schedule: MaskSchedule,
    pub label_mask: LabelMaskConfig,
    pub loss: LossConfig,
    /// Seeds batch shuffling and mask sampling.
    pub seed: u64,
}

/// Runs `cfg.steps` steps over shuffled mini-batches, calling `on_step`
/// after each one.
pub fn train(
    model: &mut TransducerModel,
    data: &[Utterance],
    cfg: &TrainConfig,
    exec: Exec,
    mut on_step: impl FnMut(&StepReport),
) -> Result<Vec<StepReport>> {
    if data.is_empty() || cfg.batch_size == 0 {
        return Err(Error::Invalid("training needs data and a positive batch size".into()));
    }
    let mut opt = Sgd::new(cfg.sgd)?;
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut mask_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6d61_736b);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut cursor = order.len();
    let mut reports = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size.min(data.len()) {
            if cursor == order.len() {
                order.shuffle(&mut order_rng);
                cursor = 0;
            }
            batch.push(&data[order[cursor]]);
            cursor += 1;
        }
        let r = training_step(model, &batch, &cfg.schedule, &cfg.label_mask, &cfg.loss, &mut opt, &mut mask_rng, exec)?;
        on_step(&r);
        reports.push(r);
    }
    Ok(reports)
}
