use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use cct_core::decoder::DecodeConfig;
use cct_core::exec::Exec;
use cct_core::harness::{decode_wer, prepare_data, train_model, ExperimentSpec};
use cct_core::masking::MaskConfig;

fn small_spec() -> ExperimentSpec {
    let mut spec = ExperimentSpec::default_spec();
    spec.task.train_utterances = 32;
    spec.task.test_utterances = 32;
    spec.model.d_model = 16;
    spec.model.d_joint = 16;
    spec.training.steps = 2;
    spec.training.batch_size = 16;
    spec
}

fn modes() -> [(&'static str, Exec); 2] {
    [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)]
}

fn bench_training(c: &mut Criterion) {
    let spec = small_spec();
    let data = prepare_data(&spec).unwrap();
    let mut g = c.benchmark_group("train_2_steps_batch_16");
    g.sample_size(10);
    for (name, exec) in modes() {
        g.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| train_model(&spec, &data.train, exec, |_| {}).unwrap())
        });
    }
    g.finish();
}

fn bench_decoding(c: &mut Criterion) {
    let spec = small_spec();
    let data = prepare_data(&spec).unwrap();
    let (model, _) = train_model(&spec, &data.train, Exec::Sequential, |_| {}).unwrap();
    let cfg = DecodeConfig::new(MaskConfig::chunked(4));
    let mut g = c.benchmark_group("greedy_decode_32_utterances");
    g.sample_size(10);
    for (name, exec) in modes() {
        g.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| decode_wer(&model, &data.test, &cfg, exec).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, bench_training, bench_decoding);
criterion_main!(benches);
