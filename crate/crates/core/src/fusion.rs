//! Learnable two-way attention over the short- and long-term embeddings.
//!
//! With logits `s = w·r_short` and `l = w·r_long`, the short-term weight is
//! the two-term softmax `exp(s) / (exp(s) + exp(l))`, evaluated as a sigmoid
//! of `s - l` so that large logits never overflow. The fused user vector is
//! the convex combination `a·r_short + (1 - a)·r_long`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionParams {
    pub w_a: Vec<f64>,
    pub grad_w_a: Vec<f64>,
}

impl AttentionParams {
    pub fn zeros(dim: usize) -> Self {
        AttentionParams {
            w_a: vec![0.0; dim],
            grad_w_a: vec![0.0; dim],
        }
    }

    /// i.i.d. uniform in `[-1/sqrt(d), 1/sqrt(d)]`.
    pub fn init(dim: usize, seed: u64) -> Self {
        let bound = 1.0 / (dim as f64).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        AttentionParams {
            w_a: (0..dim).map(|_| rng.gen_range(-bound..=bound)).collect(),
            grad_w_a: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.w_a.len()
    }

    pub fn zero_grad(&mut self) {
        self.grad_w_a.iter_mut().for_each(|g| *g = 0.0);
    }
}

fn sigmoid_pos(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `(alpha_short, alpha_long)` from the two logits. The larger weight comes
/// from a sigmoid of a non-negative argument and the smaller is `1 - larger`,
/// which is exact in binary floating point, so the pair sums to exactly 1.
pub fn alphas_from_logits(short_logit: f64, long_logit: f64) -> (f64, f64) {
    let diff = short_logit - long_logit;
    if diff >= 0.0 {
        let a = sigmoid_pos(diff);
        (a, 1.0 - a)
    } else {
        let b = sigmoid_pos(-diff);
        (1.0 - b, b)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionOutput {
    pub e_u: Vec<f64>,
    pub alpha_short: f64,
    pub alpha_long: f64,
    pub short_logit: f64,
    pub long_logit: f64,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn attention_forward(
    r_short: &[f64],
    r_long: &[f64],
    params: &AttentionParams,
) -> Result<FusionOutput> {
    let d = params.dim();
    for len in [r_short.len(), r_long.len()] {
        if len != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                actual: len,
            });
        }
    }
    let short_logit = dot(&params.w_a, r_short);
    let long_logit = dot(&params.w_a, r_long);
    let (alpha_short, alpha_long) = alphas_from_logits(short_logit, long_logit);
    let e_u = r_short
        .iter()
        .zip(r_long)
        .map(|(s, l)| alpha_short * s + alpha_long * l)
        .collect();
    Ok(FusionOutput {
        e_u,
        alpha_short,
        alpha_long,
        short_logit,
        long_logit,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionGrads {
    pub r_short: Vec<f64>,
    pub r_long: Vec<f64>,
    pub w_a: Vec<f64>,
}

/// Exact gradients of a loss with upstream gradient `upstream = dL/de_u`.
///
/// With `a = alpha_short`, `diff = r_short - r_long` and
/// `d_alpha = upstream·diff`, the logit-difference sensitivity is
/// `d_alpha·a(1-a)`, which flows to `w_a` through `diff` and to each input
/// through `±w_a`.
pub fn attention_backward(
    params: &AttentionParams,
    r_short: &[f64],
    r_long: &[f64],
    output: &FusionOutput,
    upstream: &[f64],
) -> FusionGrads {
    let a = output.alpha_short;
    let d_alpha: f64 = upstream
        .iter()
        .zip(r_short.iter().zip(r_long))
        .map(|(g, (s, l))| g * (s - l))
        .sum();
    let d_logit = d_alpha * a * (1.0 - a);
    FusionGrads {
        w_a: r_short
            .iter()
            .zip(r_long)
            .map(|(s, l)| d_logit * (s - l))
            .collect(),
        r_short: upstream
            .iter()
            .zip(&params.w_a)
            .map(|(g, w)| a * g + d_logit * w)
            .collect(),
        r_long: upstream
            .iter()
            .zip(&params.w_a)
            .map(|(g, w)| (1.0 - a) * g - d_logit * w)
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn rand_vec(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
        (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn identical_inputs_return_input() {
        let v = vec![0.3, -1.2, 4.0];
        let p = AttentionParams::init(3, 9);
        let out = attention_forward(&v, &v, &p).unwrap();
        assert_eq!(out.e_u, v);
    }

    #[test]
    fn unit_logit_gap_gives_sigmoid_one() {
        let mut p = AttentionParams::zeros(2);
        p.w_a = vec![1.0, 0.0];
        let out = attention_forward(&[1.5, 0.0], &[0.5, 0.0], &p).unwrap();
        let expected = std::f64::consts::E / (std::f64::consts::E + 1.0);
        assert!((out.alpha_short - expected).abs() < 1e-12);
        assert!((out.alpha_short - 0.73106).abs() < 1e-5);
    }

    #[test]
    fn zero_weights_split_evenly() {
        let p = AttentionParams::zeros(4);
        let out = attention_forward(&[1.0, 2.0, 3.0, 4.0], &[0.0; 4], &p).unwrap();
        assert_eq!((out.alpha_short, out.alpha_long), (0.5, 0.5));
    }

    #[test]
    fn huge_logits_do_not_overflow() {
        let (a, b) = alphas_from_logits(1e308, -1e308);
        assert_eq!((a, b), (1.0, 0.0));
        let (a, b) = alphas_from_logits(-800.0, 800.0);
        assert!(a >= 0.0 && a < 1e-300 && b == 1.0);
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let p = AttentionParams::zeros(3);
        assert!(matches!(
            attention_forward(&[1.0; 3], &[1.0; 2], &p),
            Err(Error::DimensionMismatch { expected: 3, actual: 2 })
        ));
    }

    #[test]
    fn equal_inputs_zero_weight_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let v = rand_vec(&mut rng, 6);
        let p = AttentionParams::init(6, 2);
        let out = attention_forward(&v, &v, &p).unwrap();
        let g = attention_backward(&p, &v, &v, &out, &rand_vec(&mut rng, 6));
        assert!(g.w_a.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn zero_upstream_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (s, l) = (rand_vec(&mut rng, 5), rand_vec(&mut rng, 5));
        let p = AttentionParams::init(5, 4);
        let out = attention_forward(&s, &l, &p).unwrap();
        let g = attention_backward(&p, &s, &l, &out, &[0.0; 5]);
        assert!(g.w_a.iter().chain(&g.r_short).chain(&g.r_long).all(|&x| x == 0.0));
    }

    /// Scalar loss `c·e_u` so that `dL/de_u = c`.
    fn loss(s: &[f64], l: &[f64], p: &AttentionParams, c: &[f64]) -> f64 {
        dot(&attention_forward(s, l, p).unwrap().e_u, c)
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
    }

    fn check_fd(seed: u64, tol: f64) {
        let d = 8;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (s, l, c) = (rand_vec(&mut rng, d), rand_vec(&mut rng, d), rand_vec(&mut rng, d));
        let mut p = AttentionParams::init(d, seed + 1000);
        p.w_a.iter_mut().for_each(|w| *w *= 3.0);
        let out = attention_forward(&s, &l, &p).unwrap();
        let g = attention_backward(&p, &s, &l, &out, &c);
        let h = 1e-5;
        for j in 0..d {
            let mut pp = p.clone();
            pp.w_a[j] += h;
            let up = loss(&s, &l, &pp, &c);
            pp.w_a[j] -= 2.0 * h;
            let down = loss(&s, &l, &pp, &c);
            assert!(rel_err((up - down) / (2.0 * h), g.w_a[j]) < tol, "w_a[{j}] seed {seed}");

            let mut ss = s.clone();
            ss[j] += h;
            let up = loss(&ss, &l, &p, &c);
            ss[j] -= 2.0 * h;
            let down = loss(&ss, &l, &p, &c);
            assert!(rel_err((up - down) / (2.0 * h), g.r_short[j]) < tol, "r_short[{j}]");

            let mut ll = l.clone();
            ll[j] += h;
            let up = loss(&s, &ll, &p, &c);
            ll[j] -= 2.0 * h;
            let down = loss(&s, &ll, &p, &c);
            assert!(rel_err((up - down) / (2.0 * h), g.r_long[j]) < tol, "r_long[{j}]");
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        check_fd(17, 1e-6);
        for seed in 0..100 {
            check_fd(seed, 1e-4);
        }
    }

    proptest! {
        #[test]
        fn fused_vector_is_convex_combination(
            s in prop::collection::vec(-5.0f64..5.0, 6),
            l in prop::collection::vec(-5.0f64..5.0, 6),
            w in prop::collection::vec(-3.0f64..3.0, 6),
        ) {
            let mut p = AttentionParams::zeros(6);
            p.w_a = w;
            let out = attention_forward(&s, &l, &p).unwrap();
            prop_assert_eq!(out.alpha_short + out.alpha_long, 1.0);
            for j in 0..6 {
                let lo = s[j].min(l[j]);
                let hi = s[j].max(l[j]);
                prop_assert!(out.e_u[j] >= lo - 1e-12 && out.e_u[j] <= hi + 1e-12);
            }
        }

        #[test]
        fn common_logit_shift_leaves_alphas(s in -30.0f64..30.0, l in -30.0f64..30.0, c in -50.0f64..50.0) {
            let (a, b) = alphas_from_logits(s, l);
            let (a2, b2) = alphas_from_logits(s + c, l + c);
            prop_assert!((a - a2).abs() < 1e-9 && (b - b2).abs() < 1e-9);
        }
    }
}
