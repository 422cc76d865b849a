use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PROB_CLAMP: f64 = 1e-7;

/// One-hidden-layer scorer `σ(w2·ReLU(W1ᵀ[e_u; e_i] + b1) + b2)`.
///
/// `w1` is stored `(2d × h)` row-major: row `j` holds the weights from input
/// `j` to every hidden unit, so rows `0..d` see the user half of the input
/// and rows `d..2d` the item half.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub dim: usize,
    pub hidden: usize,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: f64,
    pub grad_w1: Vec<f64>,
    pub grad_b1: Vec<f64>,
    pub grad_w2: Vec<f64>,
    pub grad_b2: f64,
}

impl MlpParams {
    pub fn zeros(dim: usize, hidden: usize) -> Self {
        MlpParams {
            dim,
            hidden,
            w1: vec![0.0; 2 * dim * hidden],
            b1: vec![0.0; hidden],
            w2: vec![0.0; hidden],
            b2: 0.0,
            grad_w1: vec![0.0; 2 * dim * hidden],
            grad_b1: vec![0.0; hidden],
            grad_w2: vec![0.0; hidden],
            grad_b2: 0.0,
        }
    }

    /// Uniform `±1/sqrt(fan_in)` for every weight and bias of a layer.
    pub fn init(dim: usize, hidden: usize, seed: u64) -> Self {
        let mut p = Self::zeros(dim, hidden);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = 1.0 / ((2 * dim) as f64).sqrt();
        p.w1.iter_mut().chain(p.b1.iter_mut()).for_each(|w| *w = rng.gen_range(-b..=b));
        let b = 1.0 / (hidden as f64).sqrt();
        p.w2.iter_mut().for_each(|w| *w = rng.gen_range(-b..=b));
        p.b2 = rng.gen_range(-b..=b);
        p
    }

    pub fn zero_grad(&mut self) {
        self.grad_w1.iter_mut().for_each(|g| *g = 0.0);
        self.grad_b1.iter_mut().for_each(|g| *g = 0.0);
        self.grad_w2.iter_mut().for_each(|g| *g = 0.0);
        self.grad_b2 = 0.0;
    }

    pub fn row(&self, j: usize) -> &[f64] {
        &self.w1[j * self.hidden..(j + 1) * self.hidden]
    }

    pub fn is_finite(&self) -> bool {
        self.w1
            .iter()
            .chain(&self.b1)
            .chain(&self.w2)
            .all(|w| w.is_finite())
            && self.b2.is_finite()
    }
}

/// Logistic function, stable for large |x|.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Binary cross-entropy of one prediction, with `y_hat` clamped to
/// `[1e-7, 1 - 1e-7]`.
pub fn bce_loss(y_hat: f64, y: f64) -> f64 {
    let p = y_hat.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

/// Mean BCE over a batch.
pub fn mean_bce(pairs: &[(f64, f64)]) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    pairs.iter().map(|&(p, y)| bce_loss(p, y)).sum::<f64>() / pairs.len() as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpForward {
    /// Hidden pre-activations.
    pub pre: Vec<f64>,
    /// Hidden activations after ReLU and the dropout mask.
    pub hidden: Vec<f64>,
    pub logit: f64,
    pub y_hat: f64,
}

/// Forward pass for one pair. `dropout_mask` multiplies the hidden
/// activations (entries are 0 or `1/(1-p)` under inverted dropout).
pub fn mlp_forward(
    e_u: &[f64],
    e_i: &[f64],
    params: &MlpParams,
    dropout_mask: Option<&[f64]>,
) -> Result<MlpForward> {
    let d = params.dim;
    for len in [e_u.len(), e_i.len()] {
        if len != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                actual: len,
            });
        }
    }
    if let Some(mask) = dropout_mask {
        if mask.len() != params.hidden {
            return Err(Error::DimensionMismatch {
                expected: params.hidden,
                actual: mask.len(),
            });
        }
    }
    let mut pre = params.b1.clone();
    for (j, &x) in e_u.iter().chain(e_i).enumerate() {
        if x != 0.0 {
            for (z, w) in pre.iter_mut().zip(params.row(j)) {
                *z += x * w;
            }
        }
    }
    let hidden: Vec<f64> = pre
        .iter()
        .enumerate()
        .map(|(k, &z)| z.max(0.0) * dropout_mask.map_or(1.0, |m| m[k]))
        .collect();
    let logit = params.b2 + hidden.iter().zip(&params.w2).map(|(h, w)| h * w).sum::<f64>();
    Ok(MlpForward {
        pre,
        hidden,
        logit,
        y_hat: sigmoid(logit),
    })
}

/// Inverted-dropout mask for `hidden` units: each unit is kept with
/// probability `1 - p` and scaled by `1/(1-p)`.
pub fn dropout_mask<R: Rng>(hidden: usize, p: f64, rng: &mut R) -> Vec<f64> {
    let scale = 1.0 / (1.0 - p);
    (0..hidden)
        .map(|_| if rng.gen::<f64>() < p { 0.0 } else { scale })
        .collect()
}
