use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::Rng;
use rq_core::rng::seeded;
use rq_core::*;
use std::hint::black_box;

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn nearest_batch(c: &mut Criterion) {
    let mut r = seeded(1);
    let mut g = c.benchmark_group("nearest_code_batch");
    for k in [256, 4096] {
        let cb = Codebook::from_embeddings(k, 16, (0..k * 16).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap();
        let z: Vec<f64> = (0..4096 * 16).map(|_| r.random_range(-1.0..1.0)).collect();
        for (name, exec) in MODES {
            g.bench_with_input(BenchmarkId::new(name, k), &exec, |b, &exec| {
                b.iter(|| cb.nearest_code_batch(black_box(&z), exec).unwrap())
            });
        }
    }
    g.finish();
}

fn feature_map(c: &mut Criterion) {
    let mut r = seeded(2);
    let cb = Codebook::from_embeddings(256, 16, (0..256 * 16).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap();
    let z = FeatureMap::new(
        32,
        32,
        16,
        (0..32 * 32 * 16).map(|_| r.random_range(-2.0..2.0)).collect(),
    )
    .unwrap();
    let mut g = c.benchmark_group("quantize_feature_map");
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::new(name, "deterministic"), |b| {
            b.iter(|| quantize_feature_map(black_box(&z), &cb, 4, SamplingMode::Deterministic, exec).unwrap())
        });
        let mode = SamplingMode::Stochastic { tau: 0.5, seed: 3 };
        g.bench_function(BenchmarkId::new(name, "stochastic"), |b| {
            b.iter(|| quantize_feature_map(black_box(&z), &cb, 4, mode, exec).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, nearest_batch, feature_map);
criterion_main!(benches);
