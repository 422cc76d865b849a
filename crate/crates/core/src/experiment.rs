//! Glue between the stages: profile texts → embeddings → per-method scoring
//! inputs → trained models → evaluation reports.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::baselines::{centric_user_embedding, tempfusion_user_embeddings, MfModel, Popularity, DEFAULT_MF_FACTORS};
use crate::dataset::{IndexedSplit, ItemMeta, SplitDataset};
use crate::encoder::{encode_items, Embedding, TextEncoder};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalReport, Recommender};
use crate::model::adam::Adam;
use crate::model::checkpoint::Checkpoint;
use crate::model::scorer::{Features, ScorerModel, ScoringInputs, ScoringVariant, UserVectors};
use crate::model::train::{fit, TrainConfig, TrainingLog};
use crate::profiles::{
    render_history_block, HistoryBlocks, ProfileGenerator, TemporalProfile, DEFAULT_MAX_ITEMS,
    DEFAULT_RECENT_K,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Centric,
    TempFusion,
    Popularity,
    Mf,
    LlmTp,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Centric,
        Method::TempFusion,
        Method::Popularity,
        Method::Mf,
        Method::LlmTp,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Centric => "centric",
            Method::TempFusion => "temp_fusion",
            Method::Popularity => "popularity",
            Method::Mf => "mf",
            Method::LlmTp => "llm_tp",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::config(format!("unknown method {s:?}")))
    }
}

/// What to train: a comparison method, or an ablation variant of the profile
/// model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Run {
    Method(Method),
    Variant(ScoringVariant),
}

impl Run {
    pub fn name(self) -> &'static str {
        match self {
            Run::Method(m) => m.as_str(),
            Run::Variant(v) => v.as_str(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub recent_k: usize,
    pub max_history_items: usize,
    pub mf_factors: usize,
    pub ks: Vec<usize>,
    pub significance_alpha: f64,
    pub train: TrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            recent_k: DEFAULT_RECENT_K,
            max_history_items: DEFAULT_MAX_ITEMS,
            mf_factors: DEFAULT_MF_FACTORS,
            ks: vec![10, 20],
            significance_alpha: 0.05,
            train: TrainConfig::default(),
        }
    }
}

/// History blocks rendered from each user's training events only.
pub fn user_blocks(
    split: &SplitDataset,
    meta: &[ItemMeta],
    max_items: usize,
    recent_k: usize,
) -> Vec<(String, HistoryBlocks)> {
    let meta: HashMap<String, ItemMeta> = meta.iter().map(|m| (m.item_id.clone(), m.clone())).collect();
    split
        .users
        .iter()
        .map(|u| {
            (
                u.user_id.clone(),
                render_history_block(&u.train, &meta, max_items, recent_k),
            )
        })
        .collect()
}

pub fn generate_profiles(
    generator: &ProfileGenerator<'_>,
    split: &SplitDataset,
    meta: &[ItemMeta],
    cfg: &ExperimentConfig,
    max_in_flight: usize,
) -> Result<Vec<TemporalProfile>> {
    let blocks = user_blocks(split, meta, cfg.max_history_items, cfg.recent_k);
    generator.generate_all(&blocks, true, max_in_flight)
}

/// Encoded profile texts for one user.
#[derive(Debug, Clone, PartialEq)]
pub struct ProfileEmbeddings {
    pub short: Embedding,
    pub long: Embedding,
    pub general: Option<Embedding>,
}

/// Encodes all profile texts in one encoder call, preserving user order.
pub fn encode_profiles(profiles: &[TemporalProfile], encoder: &dyn TextEncoder) -> Result<Vec<ProfileEmbeddings>> {
    let mut texts = Vec::with_capacity(profiles.len() * 3);
    for p in profiles {
        texts.push(p.short_text.clone());
        texts.push(p.long_text.clone());
        if let Some(g) = &p.general_text {
            texts.push(g.clone());
        }
    }
    let mut vectors = encoder.encode(&texts)?.into_iter();
    let mut out = Vec::with_capacity(profiles.len());
    for p in profiles {
        let mut next = || vectors.next().ok_or_else(|| Error::Backend("encoder returned too few vectors".into()));
        let short = next()?;
        let long = next()?;
        let general = if p.general_text.is_some() { Some(next()?) } else { None };
        out.push(ProfileEmbeddings { short, long, general });
    }
    Ok(out)
}

/// Item embeddings in catalog index order.
pub fn catalog_embeddings(split: &IndexedSplit, meta: &[ItemMeta], encoder: &dyn TextEncoder) -> Result<Vec<Embedding>> {
    let by_id: HashMap<&str, &ItemMeta> = meta.iter().map(|m| (m.item_id.as_str(), m)).collect();
    let ordered: Vec<ItemMeta> = split
        .index
        .item_ids
        .iter()
        .map(|id| {
            by_id
                .get(id.as_str())
                .map(|m| (*m).clone())
                .ok_or_else(|| Error::data(format!("no metadata for catalog item {id}")))
        })
        .collect::<Result<_>>()?;
    encode_items(&ordered, encoder)
}

/// Everything the learned methods consume, aligned with the split's index.
#[derive(Debug, Clone)]
pub struct Embedded {
    pub split: IndexedSplit,
    pub items: Vec<Embedding>,
    pub profiles: Vec<ProfileEmbeddings>,
}

impl Embedded {
    pub fn new(split: IndexedSplit, items: Vec<Embedding>, profiles: Vec<ProfileEmbeddings>) -> Result<Self> {
        if items.len() != split.n_items() {
            return Err(Error::data(format!(
                "{} item embeddings for {} catalog items",
                items.len(),
                split.n_items()
            )));
        }
        if profiles.len() != split.n_users() {
            return Err(Error::data(format!(
                "{} profiles for {} users",
                profiles.len(),
                split.n_users()
            )));
        }
        Ok(Embedded { split, items, profiles })
    }

    pub fn dim(&self) -> usize {
        self.items.first().map_or(0, Embedding::dim)
    }

    fn item_features(&self) -> Vec<Features> {
        self.items.iter().cloned().map(Features::from).collect()
    }

    /// Scoring inputs for a run; `None` for runs without a scorer.
    pub fn scoring_inputs(&self, run: Run, recent_k: usize) -> Result<Option<Arc<ScoringInputs>>> {
        let users: Vec<UserVectors> = match run {
            Run::Method(Method::Popularity) | Run::Method(Method::Mf) => return Ok(None),
            Run::Method(Method::LlmTp) | Run::Variant(_) => self
                .profiles
                .iter()
                .map(|p| UserVectors {
                    short: Some(p.short.clone().into()),
                    long: Some(p.long.clone().into()),
                    general: p.general.clone().map(Features::from),
                })
                .collect(),
            Run::Method(Method::Centric) => self
                .split
                .users
                .iter()
                .map(|u| {
                    Ok(UserVectors {
                        general: Some(centric_user_embedding(&u.train, &self.items)?.into()),
                        ..UserVectors::default()
                    })
                })
                .collect::<Result<_>>()?,
            Run::Method(Method::TempFusion) => self
                .split
                .users
                .iter()
                .map(|u| {
                    let (s, l) = tempfusion_user_embeddings(&u.train, &self.items, recent_k)?;
                    Ok(UserVectors {
                        short: Some(s.into()),
                        long: Some(l.into()),
                        general: None,
                    })
                })
                .collect::<Result<_>>()?,
        };
        Ok(Some(Arc::new(ScoringInputs::new(self.dim(), users, self.item_features())?)))
    }
}

fn scorer_variant(run: Run) -> ScoringVariant {
    match run {
        Run::Variant(v) => v,
        Run::Method(Method::Centric) => ScoringVariant::GeneralOnly,
        _ => ScoringVariant::Full,
    }
}

#[derive(Debug, Clone)]
pub enum TrainedModel {
    Scorer(ScorerModel),
    Mf(MfModel),
    Popularity(Popularity),
}

impl TrainedModel {
    pub fn recommender(&self) -> Box<dyn Recommender + '_> {
        match self {
            TrainedModel::Scorer(m) => Box::new(m.prepare()),
            TrainedModel::Mf(m) => Box::new(m),
            TrainedModel::Popularity(p) => Box::new(p.clone()),
        }
    }

    pub fn checkpoint(&self) -> Checkpoint {
        match self {
            TrainedModel::Scorer(m) => Checkpoint {
                dim: m.mlp.dim as u32,
                hidden: m.mlp.hidden as u32,
                tensors: m.tensors(),
                adam: m.adam.clone(),
            },
            TrainedModel::Mf(m) => Checkpoint {
                dim: m.params.k as u32,
                hidden: 0,
                tensors: m.tensors(),
                adam: m.adam.clone(),
            },
            TrainedModel::Popularity(p) => Checkpoint {
                dim: 0,
                hidden: 0,
                tensors: vec![p.scores().to_vec()],
                adam: Adam::new(0.0, 0.0, 0.0, 0.0, &[]),
            },
        }
    }
}

#[derive(Debug, Clone)]
pub struct Trained {
    pub name: String,
    pub model: TrainedModel,
    pub log: TrainingLog,
}

impl Trained {
    pub fn evaluate(&self, split: &IndexedSplit, ks: &[usize]) -> Result<EvalReport> {
        let mut report = evaluate(&*self.model.recommender(), split, ks)?;
        report.method = self.name.clone();
        Ok(report)
    }
}

impl TrainedModel {
    /// Rebuilds a trained model for `run` from its checkpoint.
    pub fn restore(data: &Embedded, run: Run, cfg: &ExperimentConfig, ckpt: Checkpoint) -> Result<Self> {
        let split = &data.split;
        match run {
            Run::Method(Method::Popularity) => {
                let scores = ckpt.tensors.into_iter().next().unwrap_or_default();
                if scores.len() != split.n_items() {
                    return Err(Error::data("popularity checkpoint does not match the catalog"));
                }
                Ok(TrainedModel::Popularity(Popularity::from_scores(scores)))
            }
            Run::Method(Method::Mf) => {
                let mut m = MfModel::new(split, ckpt.dim as usize, &cfg.train)?;
                m.load_tensors(&ckpt.tensors, ckpt.adam)?;
                Ok(TrainedModel::Mf(m))
            }
            _ => {
                let inputs = data
                    .scoring_inputs(run, cfg.recent_k)?
                    .expect("scorer runs have inputs");
                if ckpt.dim as usize != inputs.dim || ckpt.hidden as usize != expected_hidden(run, &cfg.train) {
                    return Err(Error::data(format!(
                        "checkpoint shape d={} h={} does not match the configuration",
                        ckpt.dim, ckpt.hidden
                    )));
                }
                let mut m = ScorerModel::new(scorer_variant(run), inputs, &cfg.train)?.with_name(run.name());
                m.load_tensors(&ckpt.tensors, ckpt.adam)?;
                Ok(TrainedModel::Scorer(m))
            }
        }
    }
}

fn expected_hidden(run: Run, train: &TrainConfig) -> usize {
    if scorer_variant(run).uses_mlp() {
        train.hidden
    } else {
        0
    }
}

pub fn train_run(data: &Embedded, run: Run, cfg: &ExperimentConfig) -> Result<Trained> {
    let split = &data.split;
    let (model, log) = match run {
        Run::Method(Method::Popularity) => (TrainedModel::Popularity(Popularity::fit(split)?), TrainingLog::default()),
        Run::Method(Method::Mf) => {
            let (m, log) = fit(MfModel::new(split, cfg.mf_factors, &cfg.train)?, split, &cfg.train)?;
            (TrainedModel::Mf(m), log)
        }
        _ => {
            let inputs = data
                .scoring_inputs(run, cfg.recent_k)?
                .expect("scorer runs have inputs");
            let model = ScorerModel::new(scorer_variant(run), inputs, &cfg.train)?.with_name(run.name());
            let (m, log) = fit(model, split, &cfg.train)?;
            (TrainedModel::Scorer(m), log)
        }
    };
    log::info!(
        "{}: best epoch {} of {} (val recall@10 {:.4})",
        run.name(),
        log.best_epoch,
        log.epochs.len(),
        log.best_val_recall
    );
    Ok(Trained {
        name: run.name().to_owned(),
        model,
        log,
    })
}

/// Offline end-to-end pass for already-split data: template profiles, the
/// given encoder, every requested run trained and evaluated. Reports follow
/// the order of `runs`; significance is attached against `baseline` when it
/// is among them.
pub fn run_offline(
    split: &SplitDataset,
    meta: &[ItemMeta],
    encoder: &dyn TextEncoder,
    runs: &[Run],
    baseline: Option<Run>,
    cfg: &ExperimentConfig,
) -> Result<Vec<EvalReport>> {
    let backend = crate::profiles::TemplateBackend;
    let cache = crate::profiles::ProfileCache::in_memory();
    let generator = ProfileGenerator::with_builtin_templates(&backend, &cache);
    let profiles = generate_profiles(&generator, split, meta, cfg, 1)?;
    let indexed = IndexedSplit::new(split);
    let items = catalog_embeddings(&indexed, meta, encoder)?;
    let data = Embedded::new(indexed, items, encode_profiles(&profiles, encoder)?)?;
    let mut reports = Vec::with_capacity(runs.len());
    for &run in runs {
        reports.push(train_run(&data, run, cfg)?.evaluate(&data.split, &cfg.ks)?);
    }
    if let Some(base) = baseline {
        if let Some(pos) = runs.iter().position(|&r| r == base) {
            let base_report = reports[pos].clone();
            for (r, report) in runs.iter().zip(reports.iter_mut()) {
                if *r != base {
                    report.attach_significance(&base_report, cfg.significance_alpha)?;
                }
            }
        }
    }
    Ok(reports)
}
