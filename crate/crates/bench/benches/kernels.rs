use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use tcan_core::attention::{
    appa_attention, temporal_attention, AttentionWeights, LatentVideo, LoraDelta, Matrix,
};
use tcan_core::diffusion::config::TrainConfig;
use tcan_core::diffusion::dataset::{make_synthetic_dataset, DatasetSpec};
use tcan_core::diffusion::model::{condition_clip, eps_predict, loss_and_grad};
use tcan_core::diffusion::params::DenoiserParams;
use tcan_core::diffusion::sample::{render_poses, window_tmap};
use tcan_core::diffusion::train::sample_batch;
use tcan_core::ptm::{distance_map, BinaryMask};
use tcan_core::SplitMix64;

fn bench_distance_map(c: &mut Criterion) {
    let mut group = c.benchmark_group("distance_map");
    for side in [64, 256] {
        let mut rng = SplitMix64::new(side as u64);
        let mut mask = BinaryMask::empty(side, side);
        for y in 0..side {
            for x in 0..side {
                mask.set(x, y, rng.uniform() < 0.02);
            }
        }
        group.bench_with_input(BenchmarkId::from_parameter(side), &mask, |b, m| {
            b.iter(|| distance_map(black_box(m)))
        });
    }
    group.finish();
}

fn bench_attention(c: &mut Criterion) {
    let mut rng = SplitMix64::new(11);
    let (ch, heads) = (16, 2);
    let weights = AttentionWeights::random(ch, heads, 1.0, &mut rng);
    let mut delta = LoraDelta::init(ch, 4, &mut rng);
    for b in [&mut delta.b_q, &mut delta.b_k, &mut delta.b_v] {
        b.fill(0.1);
    }
    let z = Matrix::from_shape_fn((64, ch), |_| rng.normal());
    let z_a = Matrix::from_shape_fn((64, ch), |_| rng.normal());
    c.bench_function("appa_attention 64+64 tokens c=16", |b| {
        b.iter(|| appa_attention(black_box(&z), black_box(&z_a), &weights, &delta).unwrap())
    });

    let video = LatentVideo::from_fn((1, ch, 8, 8, 8), || rng.normal());
    c.bench_function("temporal_attention f=8 8x8 c=16", |b| {
        b.iter(|| temporal_attention(black_box(&video), &weights, None).unwrap())
    });
}

fn bench_model(c: &mut Criterion) {
    let cfg = TrainConfig::default();
    let data = make_synthetic_dataset(4, 3, &DatasetSpec::new(cfg.c, cfg.h, cfg.w)).unwrap();
    let mut params = DenoiserParams::init(cfg.dims(), 3).unwrap();
    let poses = data[0].poses.slice(0, cfg.f).unwrap();
    let cond = condition_clip(&params, &render_poses(&poses), &data[0].source).unwrap();
    let tmap = window_tmap(&poses, cfg.tau, cfg.h, cfg.w).unwrap();
    let mut rng = SplitMix64::new(5);
    let z = LatentVideo::from_fn((1, cfg.c, cfg.f, cfg.h, cfg.w), || rng.normal());
    c.bench_function("eps_predict default dims", |b| {
        b.iter(|| eps_predict(&params, black_box(&z), 50, &cond, Some(&tmap)).unwrap())
    });

    let sched = cfg.schedule().unwrap();
    let batch = sample_batch(&data, cfg.batch, cfg.f, &sched, &mut rng).unwrap();
    params.set_stage(tcan_core::diffusion::params::Stage::Two);
    c.bench_function("loss_and_grad stage-2 batch", |b| {
        b.iter(|| loss_and_grad(&params, black_box(&batch)).unwrap())
    });
}

criterion_group!(benches, bench_distance_map, bench_attention, bench_model);
criterion_main!(benches);
