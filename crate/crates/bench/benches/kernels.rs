use adablock::networks::{self, NetworkKind, NetworkParams};
use adablock::radar::{self, CodeScheme, RadarConfig};
use adablock::solvers::{self, IterativeConfig, SolverKind};
use adablock::training;
use adablock::{ops, BlockSignal};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::hint::black_box;

fn setup(pulses: usize) -> (adablock::BlockDictionary, Vec<training::Sample>) {
    let cfg = RadarConfig::with_code_scheme(pulses, 16, 64, CodeScheme::Balanced, 1).unwrap();
    let dict = radar::dictionary(&cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let samples = (0..32)
        .map(|_| radar::scene_sample(&cfg, &dict, 2, (12, 16), &mut rng).unwrap())
        .collect();
    (dict, samples)
}

fn shrinkage(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let part = adablock::BlockPartition::new(64, 16).unwrap();
    let x = BlockSignal::from_vec(adablock::linalg::random_complex_normal(1024, &mut rng), part).unwrap();
    c.bench_function("block_soft_threshold_1024", |b| {
        b.iter(|| ops::block_soft_threshold(black_box(&x), 3.0).unwrap())
    });
    c.bench_function("soft_threshold_complex_1024", |b| {
        b.iter(|| ops::soft_threshold_complex(black_box(x.as_slice()), 0.8).unwrap())
    });
}

fn operators(c: &mut Criterion) {
    let (dict, samples) = setup(48);
    c.bench_function("lipschitz_48x1024", |b| b.iter(|| ops::lipschitz_constant(black_box(&dict)).unwrap()));
    let lip = ops::lipschitz_constant(&dict).unwrap();
    let s = &samples[0];
    let x = BlockSignal::zeros(dict.partition());
    c.bench_function("block_ista_step_48x1024", |b| {
        b.iter(|| solvers::block_ista_step(black_box(&x), &s.y, &dict, lip, 0.01).unwrap())
    });
    let cfg = IterativeConfig::new(0.05, 100);
    c.bench_function("block_ista_100_iters", |b| {
        b.iter(|| solvers::solve_with_lipschitz(SolverKind::BlockIsta, &s.y, &dict, &cfg, lip, None).unwrap())
    });
}

fn network_passes(c: &mut Criterion) {
    let (dict, samples) = setup(48);
    let mut group = c.benchmark_group("network");
    for kind in [NetworkKind::AdaLista, NetworkKind::AdaBlockLista] {
        let params = NetworkParams::init_from_dictionary(kind, &dict, 10, 0.05).unwrap();
        group.bench_with_input(BenchmarkId::new("forward_10_layers", kind.name()), &params, |b, p| {
            b.iter(|| networks::infer(p, &samples[0].y, &dict, None).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("backward_batch_32", kind.name()), &params, |b, p| {
            b.iter(|| training::backward(p, &samples, &dict).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, shrinkage, operators, network_passes);
criterion_main!(benches);
