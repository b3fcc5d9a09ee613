//! Synthetic token-sequence task: every token is a fixed random vector held
//! for a random number of 10 ms frames, with Gaussian noise on top.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::checkpoint::{Reader, Writer};
use crate::error::{Error, Result};
use crate::masking::INPUT_FRAME_MS;
use crate::metrics::{word_of, WordSpan};
use crate::numerics::Tensor;
use crate::transducer::Utterance;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTaskSpec {
    pub vocab_size: usize,
    pub num_utterances: usize,
    pub min_tokens: usize,
    pub max_tokens: usize,
    /// Token duration range in 10 ms input frames.
    pub min_token_frames: usize,
    pub max_token_frames: usize,
    /// Upper bound on leading and trailing silence, in input frames.
    pub max_edge_silence_frames: usize,
    pub feature_dim: usize,
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticTaskSpec {
    fn default() -> Self {
        Self {
            vocab_size: 10,
            num_utterances: 200,
            min_tokens: 3,
            max_tokens: 6,
            min_token_frames: 12,
            max_token_frames: 24,
            max_edge_silence_frames: 12,
            feature_dim: 16,
            noise: 0.5,
            seed: 1,
        }
    }
}

impl SyntheticTaskSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("synthetic task: {m}")));
        if self.vocab_size < 2 {
            return bad("vocab_size must be at least 2");
        }
        if self.min_tokens == 0 || self.min_tokens > self.max_tokens {
            return bad("token count range must be non-empty and start at 1 or more");
        }
        if self.min_token_frames == 0 || self.min_token_frames > self.max_token_frames {
            return bad("token duration range must be non-empty and positive");
        }
        if self.feature_dim == 0 || !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad("feature_dim must be positive and noise finite and non-negative");
        }
        Ok(())
    }
}

/// Generated utterances with their per-token time alignments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub spec: SyntheticTaskSpec,
    /// `(V + 1) × F`; row 0 is unused so rows are indexed by token id.
    pub embeddings: Tensor,
    pub utterances: Vec<Utterance>,
    pub alignments: Vec<Vec<WordSpan>>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    /// First `n` utterances and the rest.
    pub fn split(&self, n: usize) -> (Corpus, Corpus) {
        let n = n.min(self.len());
        let part = |r: std::ops::Range<usize>| Corpus {
            spec: self.spec.clone(),
            embeddings: self.embeddings.clone(),
            utterances: self.utterances[r.clone()].to_vec(),
            alignments: self.alignments[r].to_vec(),
        };
        (part(0..n), part(n..self.len()))
    }
}

/// Deterministic in `spec.seed`.
pub fn generate_corpus(spec: &SyntheticTaskSpec) -> Result<Corpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let f = spec.feature_dim;
    let mut emb = vec![0.0; (spec.vocab_size + 1) * f];
    for x in &mut emb[f..] {
        *x = StandardNormal.sample(&mut rng);
    }
    let embeddings = Tensor::new(vec![spec.vocab_size + 1, f], emb)?;
    let noise = Normal::new(0.0, spec.noise).map_err(|e| Error::Config(e.to_string()))?;
    let mut utterances = Vec::with_capacity(spec.num_utterances);
    let mut alignments = Vec::with_capacity(spec.num_utterances);
    for i in 0..spec.num_utterances {
        let n = rng.random_range(spec.min_tokens..=spec.max_tokens);
        let mut tokens = Vec::with_capacity(n);
        while tokens.len() < n {
            let y = rng.random_range(1..=spec.vocab_size);
            if tokens.last() != Some(&y) {
                tokens.push(y);
            }
        }
        let lead = rng.random_range(0..=spec.max_edge_silence_frames);
        let mut rows: Vec<f64> = vec![0.0; lead * f];
        let mut spans = Vec::with_capacity(n);
        let mut frame = lead;
        for &y in &tokens {
            let d = rng.random_range(spec.min_token_frames..=spec.max_token_frames);
            for _ in 0..d {
                rows.extend_from_slice(embeddings.row(y));
            }
            spans.push(WordSpan {
                word: word_of(y),
                start_ms: (frame as u64) * INPUT_FRAME_MS,
                end_ms: ((frame + d) as u64) * INPUT_FRAME_MS,
            });
            frame += d;
        }
        let trail = rng.random_range(0..=spec.max_edge_silence_frames);
        rows.extend(std::iter::repeat_n(0.0, trail * f));
        if spec.noise > 0.0 {
            for x in &mut rows {
                *x += noise.sample(&mut rng);
            }
        }
        let t = rows.len() / f;
        utterances.push(Utterance { id: format!("utt{i:05}"), features: Tensor::new(vec![t, f], rows)?, tokens });
        alignments.push(spans);
    }
    Ok(Corpus { spec: spec.clone(), embeddings, utterances, alignments })
}

pub const CORPUS_MAGIC: &[u8; 8] = b"CCTDATA\0";
pub const CORPUS_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CorpusHeader {
    spec: SyntheticTaskSpec,
    ids: Vec<String>,
    tokens: Vec<Vec<usize>>,
    alignments: Vec<Vec<WordSpan>>,
}

impl Corpus {
    /// Binary form: magic, version, JSON header with transcripts and
    /// alignments, then the embedding table and one feature tensor per
    /// utterance as little-endian `f64`.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = CorpusHeader {
            spec: self.spec.clone(),
            ids: self.utterances.iter().map(|u| u.id.clone()).collect(),
            tokens: self.utterances.iter().map(|u| u.tokens.clone()).collect(),
            alignments: self.alignments.clone(),
        };
        let mut w = Writer::default();
        w.buf.extend_from_slice(CORPUS_MAGIC);
        w.u32(CORPUS_VERSION);
        w.bytes(&serde_json::to_vec(&header)?);
        w.tensor(&self.embeddings);
        for u in &self.utterances {
            w.tensor(&u.features);
        }
        Ok(w.buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "corpus");
        r.magic(CORPUS_MAGIC, CORPUS_VERSION)?;
        let h: CorpusHeader = serde_json::from_slice(r.bytes()?)?;
        if h.ids.len() != h.tokens.len() || h.ids.len() != h.alignments.len() {
            return Err(Error::Checkpoint("corpus: header lists disagree in length".into()));
        }
        let embeddings = r.tensor()?;
        let mut utterances = Vec::with_capacity(h.ids.len());
        for (id, tokens) in h.ids.into_iter().zip(h.tokens) {
            let features = r.tensor()?;
            if features.shape().len() != 2 || features.cols() != h.spec.feature_dim {
                return Err(Error::Checkpoint(format!("corpus: utterance {id} has features of shape {:?}", features.shape())));
            }
            utterances.push(Utterance { id, features, tokens });
        }
        r.finish()?;
        Ok(Corpus { spec: h.spec, embeddings, utterances, alignments: h.alignments })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
