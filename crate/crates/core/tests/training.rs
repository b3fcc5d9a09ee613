//! Seed-pinned training runs on the synthetic task.

use cct_core::decoder::DecodeConfig;
use cct_core::exec::Exec;
use cct_core::harness::{decode_wer, prepare_data, train_model, ExperimentSpec, Future, Past};
use cct_core::masking::PastPolicy;

/// 600 steps left this at 25% WER; 2000 clears the threshold.
const TOY_STEPS: usize = 2000;

#[test]
fn two_hundred_steps_halve_the_loss() {
    let mut spec = ExperimentSpec::default_spec();
    spec.training.steps = 200;
    spec.task.train_utterances = 400;
    spec.task.test_utterances = 1;
    let data = prepare_data(&spec).unwrap();
    let mut losses = Vec::new();
    train_model(&spec, &data.train, Exec::default(), |r| losses.push(r.mean_loss)).unwrap();
    assert_eq!(losses.len(), 200);
    // Mean over the last ten steps, so that one easy batch cannot pass alone.
    let tail = losses[190..].iter().sum::<f64>() / 10.0;
    assert!(tail <= 0.5 * losses[0], "step 1 loss {:.3}, final mean {tail:.3}", losses[0]);
}

#[test]
fn low_noise_toy_task_is_learned_at_full_context() {
    let mut spec = ExperimentSpec::default_spec();
    spec.seed = 2;
    spec.task.vocab_size = 16;
    spec.task.noise = 0.5;
    spec.task.train_utterances = 600;
    spec.task.test_utterances = 100;
    spec.training.steps = TOY_STEPS;
    spec.training.future = vec![Future::chunk(1_000_000)];
    spec.training.past = vec![Past(PastPolicy::Unlimited)];
    let data = prepare_data(&spec).unwrap();
    let (model, _) = train_model(&spec, &data.train, Exec::default(), |_| {}).unwrap();
    let full = cct_core::harness::ContextPoint::new(Past(PastPolicy::Unlimited), Future::chunk(1_000_000));
    let cfg = DecodeConfig { label_mask: spec.label_mask(), ..DecodeConfig::new(full.mask()) };
    let stats = decode_wer(&model, &data.test, &cfg, Exec::default()).unwrap();
    assert!(stats.wer() <= 0.05, "WER {:.2}% over {} words", 100.0 * stats.wer(), stats.ref_len);
}
