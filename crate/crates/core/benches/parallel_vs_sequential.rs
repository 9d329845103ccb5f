use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use specast::dataio::generate_synthetic;
use specast::spectral::{dft2_with, random_square_field};
use specast::train::{batch_grads, latitude_weights, make_samples};
use specast::{Exec, LossVariant, Model, ModelConfig, Split, SyntheticConfig};

fn modes() -> Vec<(&'static str, Exec)> {
    let mut m = vec![("sequential", Exec::Sequential)];
    if cfg!(feature = "parallel") {
        m.push(("parallel", Exec::Parallel));
    }
    m
}

fn bench_dft(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let field = random_square_field(32, &mut rng).unwrap();
    let mut group = c.benchmark_group("dft2_32x32");
    for (name, exec) in modes() {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| dft2_with(black_box(&field), exec))
        });
    }
    group.finish();
}

fn bench_grads(c: &mut Criterion) {
    let data = generate_synthetic(&SyntheticConfig {
        n_lat: 8,
        n_lon: 16,
        n_steps: 64,
        ..SyntheticConfig::default()
    })
    .unwrap();
    let cfg = ModelConfig {
        history_len: 3,
        k_max: 2,
        d_latent: 8,
        n_experts: 4,
        n_bands: 2,
        d_model: 32,
        n_layers: 1,
        n_heads: 4,
        ..ModelConfig::default()
    };
    let model = Model::new(cfg, data.grid.clone(), 1).unwrap();
    let samples = make_samples(&model, &data, Split::Train).unwrap();
    let batch: Vec<_> = samples.iter().take(16).collect();
    let w = latitude_weights(&data.grid.lats).unwrap();

    let mut group = c.benchmark_group("batch_grads_16");
    group.sample_size(10);
    for (name, exec) in modes() {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| batch_grads(&model, black_box(&batch), &w, LossVariant::default(), exec).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, bench_dft, bench_grads);
criterion_main!(benches);
