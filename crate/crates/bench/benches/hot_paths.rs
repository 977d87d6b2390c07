use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use chain_bench::{random_codebook, random_points};
use chain_core::affinity::{affinity_propagation, build_similarity, APConfig, Preference};
use chain_core::encoder::{forward, ClipBatch, EncoderConfig, ModelState};
use chain_core::retrieval::map_at_k;

fn hamming_ranking(c: &mut Criterion) {
    let mut group = c.benchmark_group("map_at_5");
    for n in [200, 1000] {
        let db = random_codebook(n, 64, 10, 1);
        group.bench_with_input(BenchmarkId::from_parameter(n), &db, |b, db| {
            b.iter(|| map_at_k(black_box(db), db, 5).unwrap())
        });
    }
    group.finish();
}

fn affinity(c: &mut Criterion) {
    let cfg = APConfig::default();
    let mut group = c.benchmark_group("affinity_propagation");
    for n in [16, 50] {
        let s = build_similarity(random_points(n, 64, 2).view(), Preference::Median).unwrap();
        group.bench_with_input(BenchmarkId::from_parameter(n), &s, |b, s| {
            b.iter(|| affinity_propagation(black_box(s.view()), &cfg).unwrap())
        });
    }
    group.finish();
}

fn encoder_forward(c: &mut Criterion) {
    let cfg = EncoderConfig {
        frame_dim: 128,
        model_dim: 64,
        num_heads: 4,
        ffn_dim: 128,
        hash_hidden: 64,
        clip_length: 8,
        code_bits: 16,
        ..EncoderConfig::default()
    };
    let state = ModelState::init(cfg, 0).unwrap();
    let batch = ClipBatch::Features(random_points(64 * 8, 128, 3));
    c.bench_function("forward_64x8", |b| {
        b.iter(|| forward(black_box(&state), &batch).unwrap())
    });
}

criterion_group!(benches, hamming_ranking, affinity, encoder_forward);
criterion_main!(benches);
