//! Temporal user profiling for recommendation.
//!
//! The pipeline turns each user's chronologically sorted history into a
//! short-term and a long-term natural-language profile, encodes both into
//! vectors, fuses them with a learned two-way attention, and scores
//! user–item pairs with an MLP trained on binary cross-entropy. Baselines,
//! ablation variants and a temporal-holdout evaluator sit alongside so the
//! whole comparison runs offline.

pub mod baselines;
pub mod dataset;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod fusion;
pub mod http;
pub mod model;
pub mod profiles;
pub mod synth;
pub mod text;

#[cfg(test)]
pub(crate) mod testutil;

pub use error::{Error, Result};
