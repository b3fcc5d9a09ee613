use std::sync::atomic::{AtomicUsize, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::joint::JointNetwork;
use super::loss::{transducer_loss, Lattice, LossConfig};
use crate::encoders::{AcousticEncoder, EncoderConfig, LabelEncoder, StreamState};
use crate::error::{Error, Result};
use crate::masking::{LabelMaskConfig, MaskConfig};
use crate::numerics::{ParamStore, Tape, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub feature_dim: usize,
    /// Number of real labels; outputs are `vocab_size + 1` with blank at 0.
    pub vocab_size: usize,
    pub acoustic: EncoderConfig,
    pub label: EncoderConfig,
    pub d_joint: usize,
    /// Seed for parameter initialisation.
    pub seed: u64,
}

impl ModelConfig {
    pub fn new(feature_dim: usize, vocab_size: usize) -> Self {
        Self {
            feature_dim,
            vocab_size,
            acoustic: EncoderConfig::acoustic_default(),
            label: EncoderConfig::label_default(),
            d_joint: 64,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.acoustic.validate()?;
        self.label.validate()?;
        if self.acoustic.d_model != self.label.d_model {
            return Err(Error::Config("acoustic and label encoders must share d_model".into()));
        }
        if self.acoustic.conv_kernel % 2 == 0 {
            return Err(Error::Config(format!("conv_kernel {} must be odd", self.acoustic.conv_kernel)));
        }
        if self.feature_dim == 0 || self.vocab_size == 0 || self.d_joint == 0 {
            return Err(Error::Config("feature_dim, vocab_size and d_joint must be positive".into()));
        }
        Ok(())
    }
}

/// Acoustic encoder, label encoder and joint network with their parameters.
#[derive(Debug)]
pub struct TransducerModel {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub acoustic: AcousticEncoder,
    pub label: LabelEncoder,
    pub joint: JointNetwork,
    acoustic_evals: AtomicUsize,
}

impl Clone for TransducerModel {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            params: self.params.clone(),
            acoustic: self.acoustic.clone(),
            label: self.label.clone(),
            joint: self.joint.clone(),
            acoustic_evals: AtomicUsize::new(self.acoustic_evaluations()),
        }
    }
}

/// Loss of one utterance and the gradient of every parameter.
#[derive(Debug, Clone)]
pub struct UtteranceGrad {
    pub loss: f64,
    pub grads: Vec<Option<Vec<f64>>>,
}

impl TransducerModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::new();
        let acoustic = AcousticEncoder::new(&mut params, config.feature_dim, &config.acoustic, &mut rng);
        let label = LabelEncoder::new(&mut params, config.vocab_size, &config.label, &mut rng);
        let joint = JointNetwork::new(&mut params, config.acoustic.d_model, config.d_joint, config.vocab_size, &mut rng);
        Ok(Self { config, params, acoustic, label, joint, acoustic_evals: AtomicUsize::new(0) })
    }

    pub fn blank(&self) -> usize {
        0
    }

    pub fn n_outputs(&self) -> usize {
        self.config.vocab_size + 1
    }

    /// Number of whole-utterance acoustic encoder evaluations so far.
    pub fn acoustic_evaluations(&self) -> usize {
        self.acoustic_evals.load(Ordering::Relaxed)
    }

    pub fn encode(&self, features: &Tensor, cfg: &MaskConfig) -> Result<Tensor> {
        self.acoustic_evals.fetch_add(1, Ordering::Relaxed);
        self.acoustic.encode(&self.params, features, cfg)
    }

    pub fn start_stream(&self) -> StreamState {
        self.acoustic.start_stream()
    }

    pub fn encode_chunk(&self, chunk: &Tensor, state: StreamState, cfg: &MaskConfig) -> Result<(Tensor, StreamState)> {
        self.acoustic.encode_streaming(&self.params, chunk, state, cfg)
    }

    pub fn encode_labels(&self, tokens: &[usize], cfg: &LabelMaskConfig) -> Result<Tensor> {
        self.label.encode(&self.params, tokens, cfg)
    }

    /// Lattice of output log-probabilities for already computed encodings.
    pub fn lattice(&self, acoustic: &Tensor, labels: &Tensor, tokens: &[usize]) -> Result<Lattice> {
        if labels.rows() != tokens.len() + 1 {
            return Err(Error::shape("lattice", format!("{} label rows for {} tokens", labels.rows(), tokens.len())));
        }
        let pa = self.joint.project_acoustic(&self.params, acoustic)?;
        let pl = self.joint.project_labels(&self.params, labels)?;
        let mut rows = Vec::with_capacity(pa.rows() * pl.rows());
        for t in 0..pa.rows() {
            for u in 0..pl.rows() {
                rows.push(self.joint.combine(&self.params, pa.row(t), pl.row(u)));
            }
        }
        if rows.is_empty() {
            return Err(Error::Lattice("lattice needs at least one frame".into()));
        }
        Lattice::from_logits(&Tensor::from_rows(&rows)?, pa.rows(), tokens)
    }

    /// Loss of one utterance under a fixed mask, with parameter gradients.
    pub fn utterance_grad(
        &self,
        features: &Tensor,
        tokens: &[usize],
        mask: &MaskConfig,
        label_cfg: &LabelMaskConfig,
        loss_cfg: &LossConfig,
    ) -> Result<UtteranceGrad> {
        let mut tape = Tape::with_params(&self.params);
        let x = tape.constant(features.clone());
        let a = self.acoustic.forward(&mut tape, x, mask)?;
        let l = self.label.forward(&mut tape, tokens, label_cfg)?;
        let logits = self.joint.forward_lattice(&mut tape, a, l)?;
        let frames = tape.value(a).rows();
        let lat = Lattice::from_logits(tape.value(logits), frames, tokens)?;
        let out = transducer_loss(&lat, loss_cfg)?;
        let root = tape.precomputed_scalar(logits, out.loss, out.dlogits.into_data())?;
        tape.backward(root)?;
        Ok(UtteranceGrad { loss: out.loss, grads: tape.param_grads() })
    }

    /// Same value as [`Self::utterance_grad`] without recording gradients.
    pub fn utterance_loss(
        &self,
        features: &Tensor,
        tokens: &[usize],
        mask: &MaskConfig,
        label_cfg: &LabelMaskConfig,
        loss_cfg: &LossConfig,
    ) -> Result<f64> {
        let mut tape = Tape::inference(&self.params);
        let x = tape.constant(features.clone());
        let a = self.acoustic.forward(&mut tape, x, mask)?;
        let l = self.label.forward(&mut tape, tokens, label_cfg)?;
        let logits = self.joint.forward_lattice(&mut tape, a, l)?;
        let frames = tape.value(a).rows();
        let lat = Lattice::from_logits(tape.value(logits), frames, tokens)?;
        Ok(transducer_loss(&lat, loss_cfg)?.loss)
    }
}
