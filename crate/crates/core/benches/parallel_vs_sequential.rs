use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use fppformer::data::{sliding_windows, synth_generate, SplitSpec, SynthSpec};
use fppformer::parallel::{map_range, Execution};
use fppformer::train::{evaluate, gradient_check};
use fppformer::{Fppformer, ModelConfig};

fn config() -> ModelConfig {
    ModelConfig {
        input_len: 96,
        pred_len: 24,
        stages: 2,
        patch_size: 6,
        embed_dim: 8,
        ..ModelConfig::default()
    }
}

fn batch_gradients(c: &mut Criterion) {
    let data = synth_generate(&SynthSpec { length: 1000, ..SynthSpec::default() }).unwrap().dataset;
    let w = sliding_windows(&data, 96, 24, SplitSpec::default(), 1).unwrap();
    let batch: Vec<_> = w.train[..16].iter().map(|s| (s.normalized_input(), s.normalized_target())).collect();
    let model = Fppformer::new(config(), 0).unwrap();
    let params = model.params().data().to_vec();

    let mut group = c.benchmark_group("batch_gradient_16");
    for exec in [Execution::Sequential, Execution::Parallel] {
        group.bench_with_input(BenchmarkId::from_parameter(format!("{exec:?}")), &exec, |b, &exec| {
            b.iter(|| {
                let grads = map_range(exec, batch.len(), |i| model.loss_and_grad(&params, &batch[i].0, &batch[i].1, None).unwrap());
                let mut acc = vec![0.0; params.len()];
                for (_, g) in grads {
                    acc.iter_mut().zip(&g).for_each(|(a, v)| *a += v);
                }
                acc
            })
        });
    }
    group.finish();

    let mut group = c.benchmark_group("evaluate_test_split");
    group.sample_size(10);
    for exec in [Execution::Sequential, Execution::Parallel] {
        group.bench_with_input(BenchmarkId::from_parameter(format!("{exec:?}")), &exec, |b, &exec| {
            b.iter(|| evaluate(&model, &w.test, Some(24), exec).unwrap())
        });
    }
    group.finish();
}

fn finite_differences(c: &mut Criterion) {
    let model = Fppformer::new(
        ModelConfig {
            input_len: 12,
            pred_len: 12,
            stages: 1,
            patch_size: 6,
            embed_dim: 2,
            ..ModelConfig::default()
        },
        0,
    )
    .unwrap();
    let x: Vec<f64> = (0..12).map(|t| (t as f64 * 0.5).sin()).collect();
    let y: Vec<f64> = (0..12).map(|t| (t as f64 * 0.5 + 6.0).sin()).collect();
    let mut group = c.benchmark_group("gradient_check_tiny");
    group.sample_size(10);
    for exec in [Execution::Sequential, Execution::Parallel] {
        group.bench_with_input(BenchmarkId::from_parameter(format!("{exec:?}")), &exec, |b, &exec| {
            b.iter(|| gradient_check(&model, &x, &y, 1e-5, exec).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, batch_gradients, finite_differences);
criterion_main!(benches);
