//! Mini-batch training with per-epoch negative resampling and early stopping
//! on validation Recall@10.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{sample_from_pool, IndexedSplit};
use crate::error::{Error, Result};
use crate::eval::{validation_recall, Recommender};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub dropout_rate: f64,
    pub patience: usize,
    pub max_epochs: usize,
    pub n_neg_per_pos: usize,
    pub hidden: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            batch_size: 2048,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            dropout_rate: 0.2,
            patience: 5,
            max_epochs: 100,
            n_neg_per_pos: 4,
            hidden: 128,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("learning_rate", self.learning_rate),
            ("epsilon", self.epsilon),
            ("batch_size", self.batch_size as f64),
            ("patience", self.patience as f64),
            ("n_neg_per_pos", self.n_neg_per_pos as f64),
            ("hidden", self.hidden as f64),
        ];
        for (name, value) in positive {
            if !(value > 0.0 && value.is_finite()) {
                return Err(Error::config(format!("{name} must be positive, got {value}")));
            }
        }
        for (name, beta) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&beta) {
                return Err(Error::config(format!("{name} must lie in [0, 1), got {beta}")));
            }
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::config(format!(
                "dropout_rate must lie in [0, 1), got {}",
                self.dropout_rate
            )));
        }
        Ok(())
    }
}

/// One labeled training example in index space.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainPair {
    pub user: usize,
    pub item: usize,
    pub label: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    #[serde(rename = "val_recall@10")]
    pub val_recall_at_10: f64,
    /// Wall-clock time; left out of serialized logs so they are reproducible.
    #[serde(default, skip_serializing)]
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_val_recall: f64,
    pub stopped_early: bool,
}

impl TrainingLog {
    /// One JSON object per epoch.
    pub fn to_jsonl(&self) -> String {
        self.epochs
            .iter()
            .map(|e| serde_json::to_string(e).expect("epoch log serializes") + "\n")
            .collect()
    }

    /// Equality ignoring wall-clock timings.
    pub fn same_trajectory(&self, other: &TrainingLog) -> bool {
        let strip = |log: &TrainingLog| -> Vec<(usize, u64, u64)> {
            log.epochs
                .iter()
                .map(|e| (e.epoch, e.train_loss.to_bits(), e.val_recall_at_10.to_bits()))
                .collect()
        };
        strip(self) == strip(other)
            && self.best_epoch == other.best_epoch
            && self.stopped_early == other.stopped_early
    }
}

/// A model the generic loop can train.
pub trait TrainableModel: Clone {
    /// Forward, backward and one optimizer step on `batch`; returns the mean
    /// loss over the batch.
    fn train_batch(&mut self, batch: &[TrainPair], dropout: f64, rng: &mut ChaCha8Rng) -> f64;

    fn recommender(&self) -> Box<dyn Recommender + '_>;

    /// The early-stopping metric.
    fn validation_metric(&self, split: &IndexedSplit) -> f64 {
        validation_recall(&*self.recommender(), split, 10)
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Independent stream seed for `(seed, a, b)`.
pub fn derive_seed(seed: u64, a: u64, b: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(seed) ^ a) ^ b)
}

const SHUFFLE_STREAM: u64 = u64::MAX;
const DROPOUT_STREAM: u64 = u64::MAX - 1;

/// Positives and freshly sampled negatives for one epoch, shuffled. The
/// negatives of user `u` come from a stream keyed by `(seed, epoch, u)`, so
/// every model trained with the same seed sees the same examples.
pub fn epoch_pairs(split: &IndexedSplit, cfg: &TrainConfig, epoch: usize) -> Vec<TrainPair> {
    let mut pairs = Vec::with_capacity(split.n_train() * (1 + cfg.n_neg_per_pos));
    for (u, user) in split.users.iter().enumerate() {
        pairs.extend(user.train.iter().map(|&item| TrainPair {
            user: u,
            item,
            label: 1.0,
        }));
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, epoch as u64, u as u64));
        let negatives = sample_from_pool(&user.negative_pool, user.train.len(), cfg.n_neg_per_pos, &mut rng);
        pairs.extend(negatives.into_iter().map(|item| TrainPair {
            user: u,
            item,
            label: 0.0,
        }));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, epoch as u64, SHUFFLE_STREAM));
    pairs.shuffle(&mut rng);
    pairs
}

/// Trains until validation Recall@10 stalls for `patience` epochs or
/// `max_epochs` is reached, and returns the best-epoch model.
pub fn fit<M: TrainableModel>(
    mut model: M,
    split: &IndexedSplit,
    cfg: &TrainConfig,
) -> Result<(M, TrainingLog)> {
    cfg.validate()?;
    if split.n_train() == 0 {
        return Err(Error::data("empty training set"));
    }
    let mut log = TrainingLog {
        best_val_recall: f64::NEG_INFINITY,
        ..TrainingLog::default()
    };
    let mut best = model.clone();
    let mut stale = 0;
    for epoch in 1..=cfg.max_epochs {
        let start = Instant::now();
        let pairs = epoch_pairs(split, cfg, epoch);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, epoch as u64, DROPOUT_STREAM));
        let mut loss = 0.0;
        for batch in pairs.chunks(cfg.batch_size) {
            loss += model.train_batch(batch, cfg.dropout_rate, &mut rng) * batch.len() as f64;
        }
        let train_loss = loss / pairs.len().max(1) as f64;
        if !train_loss.is_finite() {
            return Err(Error::data(format!("training diverged at epoch {epoch}")));
        }
        let val = model.validation_metric(split);
        log.epochs.push(EpochLog {
            epoch,
            train_loss,
            val_recall_at_10: val,
            seconds: start.elapsed().as_secs_f64(),
        });
        log::debug!("epoch {epoch}: loss {train_loss:.5} val recall@10 {val:.4}");
        if val > log.best_val_recall {
            log.best_val_recall = val;
            log.best_epoch = epoch;
            best = model.clone();
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                log.stopped_early = true;
                break;
            }
        }
    }
    if log.epochs.is_empty() {
        log.best_val_recall = model.validation_metric(split);
    }
    Ok((best, log))
}
