use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::hint::black_box;

use svkit::codecsim::{transcode_alaw, PcmBuffer};
use svkit::metrics::{compute_eer, compute_min_cost};
use svkit::neurkern::{fuse_repvgg_block, random_block, Tensor4};
use svkit::plda::{sample_embeddings, score_trials};
use svkit::synth::random_plda_model;
use svkit::{CostParams, Trial, TrialKey, TrialScores};

fn plda_scoring(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut group = c.benchmark_group("plda_score");
    for dim in [16, 64] {
        let model = random_plda_model(dim, &mut rng).unwrap();
        let enroll = sample_embeddings(&model, 50, 1, 1, None).unwrap();
        let test = sample_embeddings(&model, 50, 4, 2, None).unwrap();
        let trials: Vec<Trial> = enroll
            .iter()
            .flat_map(|e| test.iter().map(move |t| Trial::new(&e.id, &t.id, TrialKey::Unknown)))
            .collect();
        group.bench_with_input(BenchmarkId::new("10k_trials", dim), &dim, |b, _| {
            b.iter(|| score_trials(&model, &enroll, &test, black_box(&trials)).unwrap())
        });
    }
    group.finish();
}

fn metrics_sweep(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let tar: Vec<f64> = (0..10_000).map(|_| rng.random_range(-1.0..3.0)).collect();
    let non: Vec<f64> = (0..100_000).map(|_| rng.random_range(-3.0..1.0)).collect();
    let scores = TrialScores::from_split(&tar, &non).unwrap();
    let cost = CostParams::default();
    c.bench_function("eer_110k", |b| b.iter(|| compute_eer(black_box(&scores)).unwrap()));
    c.bench_function("min_cost_110k", |b| b.iter(|| compute_min_cost(black_box(&scores), &cost).unwrap()));
}

fn repvgg(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let block = random_block(32, true, true, &mut rng);
    let input = Tensor4::from_vec([1, 32, 16, 16], (0..32 * 256).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let fused = fuse_repvgg_block(&block).unwrap();
    c.bench_function("repvgg_fuse_c32", |b| b.iter(|| fuse_repvgg_block(black_box(&block)).unwrap()));
    c.bench_function("repvgg_branches_forward_c32", |b| b.iter(|| block.forward(black_box(&input)).unwrap()));
    c.bench_function("repvgg_fused_forward_c32", |b| b.iter(|| fused.forward(black_box(&input)).unwrap()));
}

fn alaw(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let pcm = PcmBuffer {
        samples: (0..8000 * 10).map(|_| rng.random()).collect(),
        sample_rate_hz: 8000,
    };
    c.bench_function("alaw_transcode_10s", |b| b.iter(|| transcode_alaw(black_box(&pcm)).unwrap()));
}

criterion_group!(benches, plda_scoring, metrics_sweep, repvgg, alaw);
criterion_main!(benches);
