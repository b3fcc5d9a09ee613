use super::{ready_times, DecodeConfig, PartialTrace, Snapshot, TimedHypothesis};
use crate::encoders::LabelState;
use crate::error::Result;
use crate::masking::{LabelMaskConfig, INPUT_FRAME_MS};
use crate::numerics::{log_sum_exp, Tensor};
use crate::transducer::TransducerModel;

pub(crate) fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let z = log_sum_exp(logits);
    logits.iter().map(|x| x - z).collect()
}

/// First index of the maximum.
pub(crate) fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in xs.iter().enumerate() {
        if *x > xs[best] {
            best = i;
        }
    }
    best
}

/// Greedy search state carried across frames and chunks.
struct Cursor<'m> {
    model: &'m TransducerModel,
    label_cfg: LabelMaskConfig,
    state: LabelState,
    projected: Vec<f64>,
    hyp: TimedHypothesis,
    max_symbols: usize,
}

impl<'m> Cursor<'m> {
    fn new(model: &'m TransducerModel, cfg: &DecodeConfig) -> Result<Self> {
        let state = model.label.start(&model.params, &cfg.label_mask)?;
        let projected = model.joint.project_label_row(&model.params, &state.output);
        Ok(Self {
            model,
            label_cfg: cfg.label_mask,
            state,
            projected,
            hyp: TimedHypothesis::empty(),
            max_symbols: cfg.max_symbols_per_frame,
        })
    }

    /// Emits labels at one projected acoustic frame until blank wins or the
    /// per-frame symbol budget is spent.
    fn frame(&mut self, pa: &[f64], emit_ms: u64) -> Result<()> {
        let m = self.model;
        for k in 0..=self.max_symbols {
            let lp = log_softmax(&m.joint.combine(&m.params, pa, &self.projected));
            let best = if k == self.max_symbols { 0 } else { argmax(&lp) };
            self.hyp.score += lp[best];
            if best == 0 {
                return Ok(());
            }
            self.hyp.tokens.push(best);
            self.hyp.emit_audio_ms.push(emit_ms);
            self.state = m.label.step(&m.params, &self.state, best, &self.label_cfg)?;
            self.projected = m.joint.project_label_row(&m.params, &self.state.output);
        }
        Ok(())
    }
}

/// Greedy decoding over whole-utterance encodings. Emission times follow
/// the audio each frame needs under the mask.
pub fn greedy_decode(model: &TransducerModel, features: &Tensor, cfg: &DecodeConfig) -> Result<TimedHypothesis> {
    cfg.validate()?;
    let enc = model.encode(features, &cfg.mask)?;
    let pa = model.joint.project_acoustic(&model.params, &enc)?;
    let ready = ready_times(model, &cfg.mask, enc.rows(), features.rows());
    let mut cur = Cursor::new(model, cfg)?;
    for t in 0..enc.rows() {
        cur.frame(pa.row(t), ready[t])?;
    }
    Ok(cur.hyp)
}

/// Greedy decoding as audio arrives. Masks without cross-chunk look-ahead
/// run chunk by chunk on the cached streaming encoder; masks with a fixed
/// look-ahead are emulated from the offline encoding, releasing each frame
/// once the audio it depends on has arrived, one 60 ms step at a time.
pub fn greedy_decode_streaming(
    model: &TransducerModel,
    features: &Tensor,
    cfg: &DecodeConfig,
) -> Result<(TimedHypothesis, PartialTrace)> {
    cfg.validate()?;
    let mut cur = Cursor::new(model, cfg)?;
    let mut trace = PartialTrace::default();
    let total = features.rows();
    if cfg.mask.is_streamable() {
        let step = model.acoustic.chunk_input_frames(&cfg.mask);
        let mut state = model.start_stream();
        let mut pos = 0;
        loop {
            let n = step.min(total - pos);
            let (enc, next) = model.encode_chunk(&features.slice_rows(pos, n), state, &cfg.mask)?;
            state = next;
            pos += n;
            let audio_ms = state.input_frames_consumed as u64 * INPUT_FRAME_MS;
            let pa = model.joint.project_acoustic(&model.params, &enc)?;
            for t in 0..pa.rows() {
                cur.frame(pa.row(t), audio_ms)?;
            }
            trace.snapshots.push(Snapshot { audio_ms, tokens: cur.hyp.tokens.clone() });
            if state.finished {
                break;
            }
        }
    } else {
        let enc = model.encode(features, &cfg.mask)?;
        let pa = model.joint.project_acoustic(&model.params, &enc)?;
        let ready = ready_times(model, &cfg.mask, enc.rows(), total);
        let step = model.acoustic.downsampler.factor();
        let mut next_frame = 0;
        let mut consumed = 0;
        while consumed < total {
            consumed = (consumed + step).min(total);
            let audio_ms = consumed as u64 * INPUT_FRAME_MS;
            while next_frame < enc.rows() && ready[next_frame] <= audio_ms {
                cur.frame(pa.row(next_frame), audio_ms)?;
                next_frame += 1;
            }
            trace.snapshots.push(Snapshot { audio_ms, tokens: cur.hyp.tokens.clone() });
        }
    }
    Ok((cur.hyp, trace))
}
