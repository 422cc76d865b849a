use std::collections::HashSet;

use criterion::{black_box, criterion_group, criterion_main, BatchSize, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use temporec::encoder::encode_hash;
use temporec::eval::{ndcg_at_k, top_k_indices};
use temporec::model::{ScorerModel, ScoringVariant, TrainConfig};
use temporec_bench::{batch, scoring_inputs, texts};

fn hashing(c: &mut Criterion) {
    let docs = texts(256, 1);
    c.bench_function("encode_hash 256 texts d=384", |b| {
        b.iter(|| {
            for t in &docs {
                black_box(encode_hash(t, 384));
            }
        })
    });
}

fn training_step(c: &mut Criterion) {
    let inputs = scoring_inputs(384, 500, 300, 2);
    let pairs = batch(256, 500, 300, 3);
    let cfg = TrainConfig::default();
    for variant in [ScoringVariant::Full, ScoringVariant::DotProduct] {
        let model = ScorerModel::new(variant, inputs.clone(), &cfg).unwrap();
        c.bench_function(&format!("forward+backward batch 256 ({variant})"), |b| {
            b.iter_batched(
                || model.clone(),
                |mut m| black_box(m.accumulate_gradients(&pairs, None)),
                BatchSize::LargeInput,
            )
        });
    }
}

fn scoring(c: &mut Criterion) {
    let inputs = scoring_inputs(384, 50, 300, 4);
    let model = ScorerModel::new(ScoringVariant::Full, inputs, &TrainConfig::default()).unwrap();
    let prepared = model.prepare();
    let mut out = vec![0.0; 300];
    c.bench_function("score full catalog (300 items)", |b| {
        b.iter(|| {
            prepared.logits(black_box(7), &mut out);
            black_box(&out);
        })
    });
}

fn ranking(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let scores: Vec<f64> = (0..5000).map(|_| rng.gen()).collect();
    let excluded: Vec<bool> = (0..5000).map(|_| rng.gen_bool(0.01)).collect();
    let test: HashSet<usize> = (0..5).map(|_| rng.gen_range(0..5000)).collect();
    c.bench_function("top-20 of 5000 + ndcg@20", |b| {
        b.iter(|| {
            let top = top_k_indices(black_box(&scores), &excluded, 20).unwrap();
            black_box(ndcg_at_k(&top, &test, 20))
        })
    });
}

criterion_group!(benches, hashing, training_step, scoring, ranking);
criterion_main!(benches);
