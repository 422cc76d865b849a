//! Fixtures shared by the criterion benchmarks.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use temporec::model::{Features, ScoringInputs, TrainPair, UserVectors};

/// A dense random vector scaled to unit length.
pub fn unit_vector(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / norm).collect()
}

/// Scorer inputs with profile and item vectors at the given sizes.
pub fn scoring_inputs(dim: usize, n_users: usize, n_items: usize, seed: u64) -> Arc<ScoringInputs> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let users = (0..n_users)
        .map(|_| UserVectors {
            short: Some(Features::new(unit_vector(&mut rng, dim))),
            long: Some(Features::new(unit_vector(&mut rng, dim))),
            general: Some(Features::new(unit_vector(&mut rng, dim))),
        })
        .collect();
    let items = (0..n_items).map(|_| Features::new(unit_vector(&mut rng, dim))).collect();
    Arc::new(ScoringInputs::new(dim, users, items).expect("consistent fixture"))
}

/// One positive and four negatives per row, like a training batch.
pub fn batch(n: usize, n_users: usize, n_items: usize, seed: u64) -> Vec<TrainPair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| TrainPair {
            user: rng.gen_range(0..n_users),
            item: rng.gen_range(0..n_items),
            label: if i % 5 == 0 { 1.0 } else { 0.0 },
        })
        .collect()
}

/// Short item-like texts of a few dozen words.
pub fn texts(n: usize, seed: u64) -> Vec<String> {
    const WORDS: [&str; 12] = [
        "space", "opera", "noir", "detective", "cooking", "garden", "history", "war", "comedy", "jazz", "travel",
        "mystery",
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            (0..40)
                .map(|_| WORDS[rng.gen_range(0..WORDS.len())])
                .collect::<Vec<_>>()
                .join(" ")
        })
        .collect()
}
