//! Comparison systems: Centric, Temp-Fusion, Popularity and matrix
//! factorization.
//!
//! Centric and Temp-Fusion only build user vectors from item embeddings; the
//! vectors are then scored by the same MLP stack as the profile model (see
//! [`crate::model::scorer`]). Popularity and MF are self-contained.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::IndexedSplit;
use crate::encoder::Embedding;
use crate::error::{Error, Result};
use crate::eval::Recommender;
use crate::model::adam::Adam;
use crate::model::mlp::{bce_loss, sigmoid};
use crate::model::train::{derive_seed, TrainConfig, TrainPair, TrainableModel};

pub const DEFAULT_MF_FACTORS: usize = 64;
pub const MF_INIT_STD: f64 = 0.01;

fn mean_of(history: &[usize], items: &[Embedding]) -> Result<Embedding> {
    let first = history
        .first()
        .and_then(|&i| items.get(i))
        .ok_or_else(|| Error::data("no embeddable items in history"))?;
    let mut sum = vec![0.0; first.dim()];
    for &i in history {
        let e = items
            .get(i)
            .ok_or_else(|| Error::data(format!("item #{i} has no embedding")))?;
        for (s, v) in sum.iter_mut().zip(&e.values) {
            *s += v;
        }
    }
    let n = history.len() as f64;
    Ok(Embedding {
        values: sum.into_iter().map(|s| s / n).collect(),
    })
}

/// Unweighted mean of the user's train-item embeddings.
pub fn centric_user_embedding(history: &[usize], items: &[Embedding]) -> Result<Embedding> {
    mean_of(history, items)
}

/// `(r_short, r_long)`: the mean over the last `min(recent_k, n)` train items
/// and the mean over the whole train history.
pub fn tempfusion_user_embeddings(
    history: &[usize],
    items: &[Embedding],
    recent_k: usize,
) -> Result<(Embedding, Embedding)> {
    if recent_k == 0 {
        return Err(Error::config("recent_k must be at least 1"));
    }
    let window = &history[history.len().saturating_sub(recent_k)..];
    Ok((mean_of(window, items)?, mean_of(history, items)?))
}

/// Train interaction counts per item index.
pub fn train_counts(split: &IndexedSplit) -> Vec<usize> {
    let mut counts = vec![0; split.n_items()];
    for user in &split.users {
        for &i in &user.train {
            counts[i] += 1;
        }
    }
    counts
}

/// Catalog indices by descending train count, ties by index (= item id order).
pub fn popularity_rank(split: &IndexedSplit) -> Result<Vec<usize>> {
    if split.n_train() == 0 {
        return Err(Error::data("popularity needs a nonempty training set"));
    }
    let counts = train_counts(split);
    let mut order: Vec<usize> = (0..counts.len()).collect();
    order.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then(a.cmp(&b)));
    Ok(order)
}

/// Serves the same train-count scores to every user.
#[derive(Debug, Clone)]
pub struct Popularity {
    scores: Vec<f64>,
}

impl Popularity {
    pub fn fit(split: &IndexedSplit) -> Result<Self> {
        popularity_rank(split)?;
        Ok(Popularity {
            scores: train_counts(split).into_iter().map(|c| c as f64).collect(),
        })
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn from_scores(scores: Vec<f64>) -> Self {
        Popularity { scores }
    }
}

impl Recommender for Popularity {
    fn method(&self) -> String {
        "popularity".into()
    }

    fn score_all(&self, _user: usize, out: &mut [f64]) {
        out.copy_from_slice(&self.scores);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MfParams {
    pub k: usize,
    /// `n_users × k`, row-major.
    pub user_factors: Vec<f64>,
    /// `n_items × k`, row-major.
    pub item_factors: Vec<f64>,
    pub user_bias: Vec<f64>,
    pub item_bias: Vec<f64>,
}

impl MfParams {
    pub fn zeros(n_users: usize, n_items: usize, k: usize) -> Self {
        MfParams {
            k,
            user_factors: vec![0.0; n_users * k],
            item_factors: vec![0.0; n_items * k],
            user_bias: vec![0.0; n_users],
            item_bias: vec![0.0; n_items],
        }
    }

    /// Factors drawn from `N(0, 0.01²)`, biases zero.
    pub fn init(n_users: usize, n_items: usize, k: usize, seed: u64) -> Result<Self> {
        if k == 0 {
            return Err(Error::config("MF latent dimension must be at least 1"));
        }
        let mut p = Self::zeros(n_users, n_items, k);
        let normal = Normal::new(0.0, MF_INIT_STD).expect("valid std");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        p.user_factors
            .iter_mut()
            .chain(p.item_factors.iter_mut())
            .for_each(|w| *w = normal.sample(&mut rng));
        Ok(p)
    }

    pub fn n_users(&self) -> usize {
        self.user_bias.len()
    }

    pub fn n_items(&self) -> usize {
        self.item_bias.len()
    }

    fn logit(&self, user: usize, item: usize) -> f64 {
        let k = self.k;
        let p = &self.user_factors[user * k..(user + 1) * k];
        let q = &self.item_factors[item * k..(item + 1) * k];
        p.iter().zip(q).map(|(a, b)| a * b).sum::<f64>() + self.user_bias[user] + self.item_bias[item]
    }
}

/// `σ(p_u·q_i + b_u + b_i)`.
pub fn mf_score(params: &MfParams, user: usize, item: usize) -> Result<f64> {
    if user >= params.n_users() {
        return Err(Error::data(format!("unknown user index {user}")));
    }
    if item >= params.n_items() {
        return Err(Error::data(format!("unknown item index {item}")));
    }
    Ok(sigmoid(params.logit(user, item)))
}

/// Pointwise implicit-feedback MF trained with BCE and Adam.
#[derive(Debug, Clone)]
pub struct MfModel {
    pub params: MfParams,
    pub adam: Adam,
    grads: MfParams,
}

impl MfModel {
    pub fn new(split: &IndexedSplit, k: usize, cfg: &TrainConfig) -> Result<Self> {
        let params = MfParams::init(split.n_users(), split.n_items(), k, derive_seed(cfg.seed, 0x4d46, 0))?;
        let grads = MfParams::zeros(split.n_users(), split.n_items(), k);
        let adam = Adam::new(
            cfg.learning_rate,
            cfg.beta1,
            cfg.beta2,
            cfg.epsilon,
            &[
                params.user_factors.len(),
                params.item_factors.len(),
                params.user_bias.len(),
                params.item_bias.len(),
            ],
        );
        Ok(MfModel { params, adam, grads })
    }

    pub fn tensors(&self) -> Vec<Vec<f64>> {
        let p = &self.params;
        vec![
            p.user_factors.clone(),
            p.item_factors.clone(),
            p.user_bias.clone(),
            p.item_bias.clone(),
        ]
    }

    /// Restores parameters written by [`MfModel::tensors`].
    pub fn load_tensors(&mut self, tensors: &[Vec<f64>], adam: Adam) -> Result<()> {
        let expected = self.tensors();
        if tensors.len() != expected.len() || tensors.iter().zip(&expected).any(|(a, b)| a.len() != b.len()) {
            return Err(Error::data("checkpoint tensors do not match the MF shape"));
        }
        let p = &mut self.params;
        p.user_factors.clone_from(&tensors[0]);
        p.item_factors.clone_from(&tensors[1]);
        p.user_bias.clone_from(&tensors[2]);
        p.item_bias.clone_from(&tensors[3]);
        self.adam = adam;
        Ok(())
    }
}

impl TrainableModel for MfModel {
    fn train_batch(&mut self, batch: &[TrainPair], _dropout: f64, _rng: &mut ChaCha8Rng) -> f64 {
        let k = self.params.k;
        let g = &mut self.grads;
        for buf in [
            &mut g.user_factors,
            &mut g.item_factors,
            &mut g.user_bias,
            &mut g.item_bias,
        ] {
            buf.iter_mut().for_each(|x| *x = 0.0);
        }
        let n = batch.len() as f64;
        let mut loss = 0.0;
        for pair in batch {
            let (u, i) = (pair.user, pair.item);
            let y_hat = sigmoid(self.params.logit(u, i));
            loss += bce_loss(y_hat, pair.label);
            let d = (y_hat - pair.label) / n;
            let p = &self.params.user_factors[u * k..(u + 1) * k];
            let q = &self.params.item_factors[i * k..(i + 1) * k];
            for f in 0..k {
                g.user_factors[u * k + f] += d * q[f];
                g.item_factors[i * k + f] += d * p[f];
            }
            g.user_bias[u] += d;
            g.item_bias[i] += d;
        }
        let p = &mut self.params;
        self.adam.begin_step();
        self.adam.update(0, &mut p.user_factors, &g.user_factors);
        self.adam.update(1, &mut p.item_factors, &g.item_factors);
        self.adam.update(2, &mut p.user_bias, &g.user_bias);
        self.adam.update(3, &mut p.item_bias, &g.item_bias);
        if n > 0.0 {
            loss / n
        } else {
            0.0
        }
    }

    fn recommender(&self) -> Box<dyn Recommender + '_> {
        Box::new(self)
    }
}

impl Recommender for &MfModel {
    fn method(&self) -> String {
        "mf".into()
    }

    fn score_all(&self, user: usize, out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate() {
            *o = self.params.logit(user, i);
        }
    }
}
