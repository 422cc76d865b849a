//! Scoring variants and the batched forward/backward kernel.
//!
//! Every variant builds a user vector `e_u` and scores it against a frozen
//! item embedding `e_i`:
//!
//! | variant        | `e_u`                         | score             |
//! |----------------|-------------------------------|-------------------|
//! | `full`         | attention over short and long | MLP               |
//! | `short_only`   | short-term embedding          | MLP               |
//! | `long_only`    | long-term embedding           | MLP               |
//! | `general_only` | general-profile embedding     | MLP               |
//! | `dot_product`  | attention over short and long | `σ(e_u·e_i)`      |
//!
//! The kernel splits the first MLP layer into its user and item halves, so
//! each distinct user and item in a batch is projected once and every pair
//! costs `O(h)`. Hash embeddings are sparse, and projections and weight
//! gradients only touch the nonzero coordinates.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::Embedding;
use crate::error::{Error, Result};
use crate::eval::Recommender;
use crate::fusion::{alphas_from_logits, attention_forward, AttentionParams};
use crate::model::adam::Adam;
use crate::model::mlp::{bce_loss, dropout_mask, mlp_forward, sigmoid, MlpParams};
use crate::model::train::{derive_seed, TrainConfig, TrainPair, TrainableModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoringVariant {
    Full,
    ShortOnly,
    LongOnly,
    GeneralOnly,
    DotProduct,
}

impl ScoringVariant {
    pub const ALL: [ScoringVariant; 5] = [
        ScoringVariant::Full,
        ScoringVariant::ShortOnly,
        ScoringVariant::LongOnly,
        ScoringVariant::GeneralOnly,
        ScoringVariant::DotProduct,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ScoringVariant::Full => "full",
            ScoringVariant::ShortOnly => "short_only",
            ScoringVariant::LongOnly => "long_only",
            ScoringVariant::GeneralOnly => "general_only",
            ScoringVariant::DotProduct => "dot_product",
        }
    }

    pub fn uses_attention(self) -> bool {
        matches!(self, ScoringVariant::Full | ScoringVariant::DotProduct)
    }

    pub fn uses_mlp(self) -> bool {
        self != ScoringVariant::DotProduct
    }
}

impl fmt::Display for ScoringVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ScoringVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::config(format!("unknown scoring variant {s:?}")))
    }
}

/// A dense vector together with the sorted list of its nonzero coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct Features {
    pub values: Vec<f64>,
    pub support: Vec<u32>,
}

impl Features {
    pub fn new(values: Vec<f64>) -> Self {
        let support = values
            .iter()
            .enumerate()
            .filter(|(_, v)| **v != 0.0)
            .map(|(j, _)| j as u32)
            .collect();
        Features { values, support }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    /// `self · dense`, summed over the support in ascending order.
    pub fn dot_dense(&self, dense: &[f64]) -> f64 {
        self.support
            .iter()
            .map(|&j| self.values[j as usize] * dense[j as usize])
            .sum()
    }
}

impl From<Embedding> for Features {
    fn from(e: Embedding) -> Self {
        Features::new(e.values)
    }
}

/// The user-side embeddings a variant may draw on.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct UserVectors {
    pub short: Option<Features>,
    pub long: Option<Features>,
    pub general: Option<Features>,
}

/// Frozen embeddings for every user and item, in index order.
#[derive(Debug, Clone)]
pub struct ScoringInputs {
    pub dim: usize,
    pub users: Vec<UserVectors>,
    pub items: Vec<Features>,
    /// Union of the short and long supports per user.
    fused_support: Vec<Vec<u32>>,
}

impl ScoringInputs {
    pub fn new(dim: usize, users: Vec<UserVectors>, items: Vec<Features>) -> Result<Self> {
        let all_features = users
            .iter()
            .flat_map(|u| [&u.short, &u.long, &u.general])
            .flatten()
            .chain(&items);
        for f in all_features {
            if f.dim() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    actual: f.dim(),
                });
            }
        }
        let fused_support = users
            .iter()
            .map(|u| match (&u.short, &u.long) {
                (Some(s), Some(l)) => {
                    let mut union: Vec<u32> = s.support.iter().chain(&l.support).copied().collect();
                    union.sort_unstable();
                    union.dedup();
                    union
                }
                _ => Vec::new(),
            })
            .collect();
        Ok(ScoringInputs {
            dim,
            users,
            items,
            fused_support,
        })
    }

    pub fn n_users(&self) -> usize {
        self.users.len()
    }

    pub fn n_items(&self) -> usize {
        self.items.len()
    }

    /// Fails, naming the variant, when any user lacks an embedding it needs.
    pub fn check_variant(&self, variant: ScoringVariant) -> Result<()> {
        for (u, vectors) in self.users.iter().enumerate() {
            let missing = match variant {
                ScoringVariant::Full | ScoringVariant::DotProduct => {
                    if vectors.short.is_none() {
                        Some("short-term")
                    } else if vectors.long.is_none() {
                        Some("long-term")
                    } else {
                        None
                    }
                }
                ScoringVariant::ShortOnly => vectors.short.is_none().then_some("short-term"),
                ScoringVariant::LongOnly => vectors.long.is_none().then_some("long-term"),
                ScoringVariant::GeneralOnly => vectors.general.is_none().then_some("general"),
            };
            if let Some(which) = missing {
                return Err(Error::data(format!(
                    "variant {variant} needs a {which} embedding for user #{u}"
                )));
            }
        }
        Ok(())
    }
}

/// Dense single-pair score, straight from the definitions.
pub fn score_variant(
    variant: ScoringVariant,
    r_short: Option<&[f64]>,
    r_long: Option<&[f64]>,
    r_general: Option<&[f64]>,
    e_i: &[f64],
    attention: &AttentionParams,
    mlp: &MlpParams,
) -> Result<f64> {
    let need = |v: Option<&[f64]>, which: &str| -> Result<Vec<f64>> {
        v.map(<[f64]>::to_vec).ok_or_else(|| {
            Error::data(format!("variant {variant} needs a {which} embedding"))
        })
    };
    let e_u = match variant {
        ScoringVariant::Full | ScoringVariant::DotProduct => {
            let s = need(r_short, "short-term")?;
            let l = need(r_long, "long-term")?;
            attention_forward(&s, &l, attention)?.e_u
        }
        ScoringVariant::ShortOnly => need(r_short, "short-term")?,
        ScoringVariant::LongOnly => need(r_long, "long-term")?,
        ScoringVariant::GeneralOnly => need(r_general, "general")?,
    };
    if variant == ScoringVariant::DotProduct {
        if e_u.len() != e_i.len() {
            return Err(Error::DimensionMismatch {
                expected: e_u.len(),
                actual: e_i.len(),
            });
        }
        return Ok(sigmoid(e_u.iter().zip(e_i).map(|(a, b)| a * b).sum()));
    }
    Ok(mlp_forward(&e_u, e_i, mlp, None)?.y_hat)
}

/// A user's effective input for one forward pass.
struct UserState {
    e_u: Vec<f64>,
    support: Vec<u32>,
    /// `(alpha_short, r_short - r_long)` for attention variants.
    fused: Option<(f64, Vec<f64>)>,
}

/// A trainable scorer bound to its frozen inputs.
#[derive(Debug, Clone)]
pub struct ScorerModel {
    pub name: String,
    pub variant: ScoringVariant,
    pub attention: AttentionParams,
    pub mlp: MlpParams,
    pub adam: Adam,
    inputs: Arc<ScoringInputs>,
}

const ADAM_SLOTS: usize = 5;

impl ScorerModel {
    pub fn new(
        variant: ScoringVariant,
        inputs: Arc<ScoringInputs>,
        cfg: &TrainConfig,
    ) -> Result<Self> {
        inputs.check_variant(variant)?;
        let d = inputs.dim;
        let hidden = if variant.uses_mlp() { cfg.hidden } else { 0 };
        let mlp = if variant.uses_mlp() {
            MlpParams::init(d, hidden, derive_seed(cfg.seed, 0x4d4c50, 0))
        } else {
            MlpParams::zeros(d, 0)
        };
        let attention = AttentionParams::init(d, derive_seed(cfg.seed, 0x41545431, 0));
        let adam = Adam::new(
            cfg.learning_rate,
            cfg.beta1,
            cfg.beta2,
            cfg.epsilon,
            &[mlp.w1.len(), mlp.b1.len(), mlp.w2.len(), 1, d],
        );
        Ok(ScorerModel {
            name: variant.as_str().to_owned(),
            variant,
            attention,
            mlp,
            adam,
            inputs,
        })
    }

    pub fn with_name(mut self, name: &str) -> Self {
        self.name = name.to_owned();
        self
    }

    pub fn inputs(&self) -> &ScoringInputs {
        &self.inputs
    }

    pub fn zero_grad(&mut self) {
        self.mlp.zero_grad();
        self.attention.zero_grad();
    }

    fn user_state(&self, u: usize) -> UserState {
        let vectors = &self.inputs.users[u];
        let fixed = |f: &Option<Features>| {
            let f = f.as_ref().expect("variant checked at construction");
            UserState {
                e_u: f.values.clone(),
                support: f.support.clone(),
                fused: None,
            }
        };
        match self.variant {
            ScoringVariant::ShortOnly => fixed(&vectors.short),
            ScoringVariant::LongOnly => fixed(&vectors.long),
            ScoringVariant::GeneralOnly => fixed(&vectors.general),
            ScoringVariant::Full | ScoringVariant::DotProduct => {
                let s = vectors.short.as_ref().expect("variant checked");
                let l = vectors.long.as_ref().expect("variant checked");
                let w = &self.attention.w_a;
                let (a, b) = alphas_from_logits(s.dot_dense(w), l.dot_dense(w));
                let support = self.inputs.fused_support[u].clone();
                let d = self.inputs.dim;
                let mut e_u = vec![0.0; d];
                let mut diff = vec![0.0; d];
                for &j in &support {
                    let j = j as usize;
                    e_u[j] = a * s.values[j] + b * l.values[j];
                    diff[j] = s.values[j] - l.values[j];
                }
                UserState {
                    e_u,
                    support,
                    fused: Some((a, diff)),
                }
            }
        }
    }

    /// `(alpha_short, alpha_long)` for attention variants.
    pub fn alphas(&self, u: usize) -> Option<(f64, f64)> {
        if !self.variant.uses_attention() {
            return None;
        }
        let vectors = &self.inputs.users[u];
        let (s, l) = (vectors.short.as_ref()?, vectors.long.as_ref()?);
        let w = &self.attention.w_a;
        Some(alphas_from_logits(s.dot_dense(w), l.dot_dense(w)))
    }

    /// Adds `Σ_j values[j]·W1[offset + j, :]` into `out`.
    fn project(&self, values: &[f64], support: &[u32], offset: usize, out: &mut [f64]) {
        let h = self.mlp.hidden;
        for &j in support {
            let x = values[j as usize];
            let row = &self.mlp.w1[(offset + j as usize) * h..][..h];
            for (o, w) in out.iter_mut().zip(row) {
                *o += x * w;
            }
        }
    }

    /// Mean BCE over `batch`, accumulating its exact gradients into the grad
    /// buffers (which are zeroed first). `masks` holds one dropout mask of
    /// length `h` per pair, in batch order.
    pub fn accumulate_gradients(&mut self, batch: &[TrainPair], masks: Option<&[f64]>) -> f64 {
        self.zero_grad();
        if batch.is_empty() {
            return 0.0;
        }
        let mut user_slot = vec![usize::MAX; self.inputs.n_users()];
        let mut item_slot = vec![usize::MAX; self.inputs.n_items()];
        let mut users = Vec::new();
        let mut items = Vec::new();
        for p in batch {
            if user_slot[p.user] == usize::MAX {
                user_slot[p.user] = users.len();
                users.push(p.user);
            }
            if item_slot[p.item] == usize::MAX {
                item_slot[p.item] = items.len();
                items.push(p.item);
            }
        }
        let states: Vec<UserState> = users.iter().map(|&u| self.user_state(u)).collect();
        let slots = |p: &TrainPair| (user_slot[p.user], item_slot[p.item]);
        if self.variant.uses_mlp() {
            self.mlp_batch(batch, masks, &states, &items, slots)
        } else {
            self.dot_batch(batch, &states, slots)
        }
    }

    fn mlp_batch(
        &mut self,
        batch: &[TrainPair],
        masks: Option<&[f64]>,
        states: &[UserState],
        items: &[usize],
        slots: impl Fn(&TrainPair) -> (usize, usize),
    ) -> f64 {
        let (d, h) = (self.inputs.dim, self.mlp.hidden);
        let inputs = Arc::clone(&self.inputs);
        let mut u_proj = vec![0.0; states.len() * h];
        for (s, st) in states.iter().enumerate() {
            self.project(&st.e_u, &st.support, 0, &mut u_proj[s * h..(s + 1) * h]);
        }
        let mut v_proj = vec![0.0; items.len() * h];
        for (s, &i) in items.iter().enumerate() {
            let f = &inputs.items[i];
            self.project(&f.values, &f.support, d, &mut v_proj[s * h..(s + 1) * h]);
        }

        let n = batch.len() as f64;
        let mut du = vec![0.0; states.len() * h];
        let mut dv = vec![0.0; items.len() * h];
        let mut z = vec![0.0; h];
        let mut hid = vec![0.0; h];
        let mut loss = 0.0;
        let mlp = &mut self.mlp;
        for (b, p) in batch.iter().enumerate() {
            let (us, is) = slots(p);
            let mask = masks.map(|m| &m[b * h..(b + 1) * h]);
            let mut logit = mlp.b2;
            for k in 0..h {
                z[k] = mlp.b1[k] + u_proj[us * h + k] + v_proj[is * h + k];
                hid[k] = z[k].max(0.0) * mask.map_or(1.0, |m| m[k]);
                logit += mlp.w2[k] * hid[k];
            }
            let y_hat = sigmoid(logit);
            loss += bce_loss(y_hat, p.label);
            let g = (y_hat - p.label) / n;
            mlp.grad_b2 += g;
            for k in 0..h {
                mlp.grad_w2[k] += g * hid[k];
                if z[k] > 0.0 {
                    let dz = g * mlp.w2[k] * mask.map_or(1.0, |m| m[k]);
                    mlp.grad_b1[k] += dz;
                    du[us * h + k] += dz;
                    dv[is * h + k] += dz;
                }
            }
        }

        for (s, st) in states.iter().enumerate() {
            let dz = &du[s * h..(s + 1) * h];
            for &j in &st.support {
                let x = st.e_u[j as usize];
                let row = &mut mlp.grad_w1[j as usize * h..][..h];
                for (r, g) in row.iter_mut().zip(dz) {
                    *r += x * g;
                }
            }
        }
        for (s, &i) in items.iter().enumerate() {
            let f = &inputs.items[i];
            let dz = &dv[s * h..(s + 1) * h];
            for &j in &f.support {
                let x = f.values[j as usize];
                let row = &mut mlp.grad_w1[(d + j as usize) * h..][..h];
                for (r, g) in row.iter_mut().zip(dz) {
                    *r += x * g;
                }
            }
        }

        for (s, st) in states.iter().enumerate() {
            let Some((a, diff)) = &st.fused else { continue };
            let dz = &du[s * h..(s + 1) * h];
            let d_alpha: f64 = st
                .support
                .iter()
                .map(|&j| {
                    let row = &mlp.w1[j as usize * h..][..h];
                    let de: f64 = row.iter().zip(dz).map(|(w, g)| w * g).sum();
                    de * diff[j as usize]
                })
                .sum();
            let d_logit = d_alpha * a * (1.0 - a);
            for &j in &st.support {
                self.attention.grad_w_a[j as usize] += d_logit * diff[j as usize];
            }
        }
        loss / n
    }

    fn dot_batch(
        &mut self,
        batch: &[TrainPair],
        states: &[UserState],
        slots: impl Fn(&TrainPair) -> (usize, usize),
    ) -> f64 {
        let n = batch.len() as f64;
        let mut d_alpha = vec![0.0; states.len()];
        let mut loss = 0.0;
        for p in batch {
            let (us, _) = slots(p);
            let st = &states[us];
            let f = &self.inputs.items[p.item];
            let y_hat = sigmoid(f.dot_dense(&st.e_u));
            loss += bce_loss(y_hat, p.label);
            if let Some((_, diff)) = &st.fused {
                d_alpha[us] += (y_hat - p.label) / n * f.dot_dense(diff);
            }
        }
        for (st, da) in states.iter().zip(d_alpha) {
            let Some((a, diff)) = &st.fused else { continue };
            let d_logit = da * a * (1.0 - a);
            for &j in &st.support {
                self.attention.grad_w_a[j as usize] += d_logit * diff[j as usize];
            }
        }
        loss / n
    }

    /// One Adam step on the trainable tensors of this variant.
    pub fn apply_gradients(&mut self) {
        self.adam.begin_step();
        if self.variant.uses_mlp() {
            let mlp = &mut self.mlp;
            self.adam.update(0, &mut mlp.w1, &mlp.grad_w1);
            self.adam.update(1, &mut mlp.b1, &mlp.grad_b1);
            self.adam.update(2, &mut mlp.w2, &mlp.grad_w2);
            self.adam
                .update(3, std::slice::from_mut(&mut mlp.b2), &[mlp.grad_b2]);
        }
        if self.variant.uses_attention() {
            let att = &mut self.attention;
            self.adam.update(4, &mut att.w_a, &att.grad_w_a);
        }
    }

    /// Caches item-side projections for catalog-wide scoring.
    pub fn prepare(&self) -> PreparedScorer<'_> {
        let h = self.mlp.hidden;
        let mut item_proj = vec![0.0; self.inputs.n_items() * h];
        if self.variant.uses_mlp() {
            for (i, f) in self.inputs.items.iter().enumerate() {
                self.project(&f.values, &f.support, self.inputs.dim, &mut item_proj[i * h..(i + 1) * h]);
            }
        }
        PreparedScorer {
            model: self,
            item_proj,
        }
    }

    pub fn tensors(&self) -> Vec<Vec<f64>> {
        vec![
            self.mlp.w1.clone(),
            self.mlp.b1.clone(),
            self.mlp.w2.clone(),
            vec![self.mlp.b2],
            self.attention.w_a.clone(),
        ]
    }

    /// Restores parameters written by [`ScorerModel::tensors`].
    pub fn load_tensors(&mut self, tensors: &[Vec<f64>], adam: Adam) -> Result<()> {
        let expected = self.tensors();
        if tensors.len() != ADAM_SLOTS
            || tensors.iter().zip(&expected).any(|(a, b)| a.len() != b.len())
        {
            return Err(Error::data("checkpoint tensors do not match the model shape"));
        }
        self.mlp.w1.clone_from(&tensors[0]);
        self.mlp.b1.clone_from(&tensors[1]);
        self.mlp.w2.clone_from(&tensors[2]);
        self.mlp.b2 = tensors[3][0];
        self.attention.w_a.clone_from(&tensors[4]);
        self.adam = adam;
        Ok(())
    }
}

/// A scorer with item projections computed once for full-catalog ranking.
/// Scores are logits, which rank identically to probabilities.
pub struct PreparedScorer<'a> {
    model: &'a ScorerModel,
    item_proj: Vec<f64>,
}

impl PreparedScorer<'_> {
    pub fn logits(&self, user: usize, out: &mut [f64]) {
        let m = self.model;
        let st = m.user_state(user);
        if !m.variant.uses_mlp() {
            for (o, f) in out.iter_mut().zip(&m.inputs.items) {
                *o = f.dot_dense(&st.e_u);
            }
            return;
        }
        let h = m.mlp.hidden;
        let mut u_proj = m.mlp.b1.clone();
        m.project(&st.e_u, &st.support, 0, &mut u_proj);
        for (i, o) in out.iter_mut().enumerate() {
            let v = &self.item_proj[i * h..(i + 1) * h];
            *o = m.mlp.b2
                + u_proj
                    .iter()
                    .zip(v)
                    .zip(&m.mlp.w2)
                    .map(|((u, v), w)| (u + v).max(0.0) * w)
                    .sum::<f64>();
        }
    }
}

impl Recommender for PreparedScorer<'_> {
    fn method(&self) -> String {
        self.model.name.clone()
    }

    fn score_all(&self, user: usize, out: &mut [f64]) {
        self.logits(user, out);
    }

    fn attention(&self, user: usize) -> Option<(f64, f64)> {
        self.model.alphas(user)
    }
}

impl TrainableModel for ScorerModel {
    fn train_batch(&mut self, batch: &[TrainPair], dropout: f64, rng: &mut ChaCha8Rng) -> f64 {
        let h = self.mlp.hidden;
        let masks: Option<Vec<f64>> = (dropout > 0.0 && h > 0).then(|| {
            let mut m = Vec::with_capacity(batch.len() * h);
            for _ in batch {
                m.extend(dropout_mask(h, dropout, rng));
            }
            m
        });
        let loss = self.accumulate_gradients(batch, masks.as_deref());
        self.apply_gradients();
        loss
    }

    fn recommender(&self) -> Box<dyn Recommender + '_> {
        Box::new(self.prepare())
    }
}
