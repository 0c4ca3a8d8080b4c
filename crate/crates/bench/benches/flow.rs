use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use dlow_core::objectives::full_objective;
use dlow_core::{Domainness, DomainnessValue, Tensor, TrainConfig, TrainState};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn config(size: usize) -> TrainConfig {
    TrainConfig {
        image_size: size,
        crop_size: size,
        batch_size: 1,
        ..TrainConfig::new(1000)
    }
}

fn image(size: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::uniform(&[1, 3, size, size], -1.0, 1.0, &mut rng)
}

fn generator_forward(c: &mut Criterion) {
    let mut group = c.benchmark_group("generator_forward");
    group.sample_size(10);
    for size in [32, 64] {
        let state = TrainState::new(config(size)).unwrap();
        let x = image(size, 1);
        let z = Domainness::from(DomainnessValue::new(0.5).unwrap());
        group.bench_with_input(BenchmarkId::from_parameter(size), &size, |b, _| {
            b.iter(|| state.models.g_st.translate(black_box(&x), &z).unwrap())
        });
    }
    group.finish();
}

fn train_step(c: &mut Criterion) {
    let mut group = c.benchmark_group("train_step");
    group.sample_size(10);
    let size = 32;
    let mut state = TrainState::new(config(size)).unwrap();
    let (xs, xt) = (image(size, 2), image(size, 3));
    group.bench_function(BenchmarkId::from_parameter(size), |b| {
        b.iter(|| state.train_step(black_box(&xs), black_box(&xt)).unwrap())
    });
    group.finish();
}

fn objective(c: &mut Criterion) {
    let mut group = c.benchmark_group("full_objective");
    group.sample_size(10);
    let size = 32;
    let state = TrainState::new(config(size)).unwrap();
    let objective = state.config.objective();
    let (xs, xt) = (image(size, 4), image(size, 5));
    let zs = [DomainnessValue::new(0.3).unwrap()];
    group.bench_function(BenchmarkId::from_parameter(size), |b| {
        b.iter(|| full_objective(black_box(&xs), black_box(&xt), &zs, &state.models, &objective).unwrap())
    });
    group.finish();
}

criterion_group!(benches, generator_forward, train_step, objective);
criterion_main!(benches);
