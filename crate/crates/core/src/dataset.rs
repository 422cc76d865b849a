//! Interaction ingestion, item filtering, per-user temporal splits and
//! negative sampling.
//!
//! Every user's interactions are sorted by `(timestamp, item_id)` and cut
//! into train / validation / test so that all training events precede all
//! validation events, which precede all test events. Nothing here shares
//! mutable state; every function is a pure transform of its inputs.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::text;

/// One `(user, item, timestamp)` event.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Interaction {
    pub user_id: String,
    pub item_id: String,
    pub timestamp: i64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemMeta {
    pub item_id: String,
    pub title: String,
    pub description: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InteractionFormat {
    Jsonl,
    Csv,
}

impl InteractionFormat {
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("csv") => InteractionFormat::Csv,
            _ => InteractionFormat::Jsonl,
        }
    }
}

#[derive(Deserialize)]
struct RawInteraction {
    user_id: String,
    item_id: String,
    timestamp: i64,
}

fn check_raw(raw: RawInteraction, path: &Path, line: usize) -> Result<Interaction> {
    if raw.timestamp < 0 {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line,
            message: format!("negative timestamp {}", raw.timestamp),
        });
    }
    Ok(Interaction {
        user_id: raw.user_id,
        item_id: raw.item_id,
        timestamp: raw.timestamp,
    })
}

/// Reads an interactions file, drops exact duplicate triples and returns the
/// events sorted by `(user_id, timestamp, item_id)`.
pub fn load_interactions(path: &Path, format: InteractionFormat) -> Result<Vec<Interaction>> {
    let content = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    match format {
        InteractionFormat::Jsonl => {
            for (idx, line) in content.lines().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                let raw: RawInteraction =
                    serde_json::from_str(line).map_err(|e| Error::Parse {
                        path: path.to_path_buf(),
                        line: idx + 1,
                        message: e.to_string(),
                    })?;
                records.push(check_raw(raw, path, idx + 1)?);
            }
        }
        InteractionFormat::Csv => {
            let mut reader = csv::ReaderBuilder::new()
                .trim(csv::Trim::All)
                .from_reader(content.as_bytes());
            for result in reader.deserialize::<RawInteraction>() {
                let raw = result.map_err(|e| {
                    let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
                    Error::Parse {
                        path: path.to_path_buf(),
                        line,
                        message: e.to_string(),
                    }
                })?;
                // header is line 1; record positions are reported 1-based already
                let line = records.len() + 2;
                records.push(check_raw(raw, path, line)?);
            }
        }
    }
    if records.is_empty() {
        return Err(Error::data(format!(
            "{}: no interactions found",
            path.display()
        )));
    }
    Ok(normalize_interactions(records))
}

/// Deduplicates exact triples and sorts by `(user_id, timestamp, item_id)`.
pub fn normalize_interactions(mut records: Vec<Interaction>) -> Vec<Interaction> {
    records.sort_by(|a, b| {
        (&a.user_id, a.timestamp, &a.item_id).cmp(&(&b.user_id, b.timestamp, &b.item_id))
    });
    records.dedup();
    records
}

pub fn load_item_meta(path: &Path) -> Result<Vec<ItemMeta>> {
    let content = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut items = Vec::new();
    for (idx, line) in content.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let meta: ItemMeta = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: idx + 1,
            message: e.to_string(),
        })?;
        items.push(meta);
    }
    if items.is_empty() {
        return Err(Error::data(format!("{}: no items found", path.display())));
    }
    Ok(items)
}

/// Fraction of alphabetic code points that are ASCII letters; 0 when the text
/// has no letters at all.
pub fn ascii_letter_ratio(text: &str) -> f64 {
    let (ascii, total) = text
        .chars()
        .filter(|c| c.is_alphabetic())
        .fold((0usize, 0usize), |(a, t), c| {
            (a + usize::from(c.is_ascii_alphabetic()), t + 1)
        });
    if total == 0 {
        0.0
    } else {
        ascii as f64 / total as f64
    }
}

pub const MIN_ENGLISH_RATIO: f64 = 0.9;

/// Keeps items whose description is longer than `min_desc_chars` characters
/// and looks English (ASCII-letter ratio at least 0.9).
pub fn filter_items(meta: Vec<ItemMeta>, min_desc_chars: usize) -> Vec<ItemMeta> {
    meta.into_iter()
        .filter(|m| {
            m.description.chars().count() > min_desc_chars
                && ascii_letter_ratio(&m.description) >= MIN_ENGLISH_RATIO
        })
        .collect()
}

/// Groups sorted interactions into per-user histories ordered by
/// `(timestamp, item_id)`.
pub fn group_by_user(interactions: Vec<Interaction>) -> BTreeMap<String, Vec<Interaction>> {
    let mut users: BTreeMap<String, Vec<Interaction>> = BTreeMap::new();
    for it in interactions {
        users.entry(it.user_id.clone()).or_default().push(it);
    }
    for history in users.values_mut() {
        history.sort_by(|a, b| (a.timestamp, &a.item_id).cmp(&(b.timestamp, &b.item_id)));
    }
    users
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitConfig {
    pub ratios: (f64, f64, f64),
    pub min_interactions: usize,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            ratios: (0.8, 0.1, 0.1),
            min_interactions: 3,
        }
    }
}

impl SplitConfig {
    pub fn validate(&self) -> Result<()> {
        let (a, b, c) = self.ratios;
        if a <= 0.0 || b <= 0.0 || c <= 0.0 {
            return Err(Error::config("split ratios must all be positive"));
        }
        if (a + b + c - 1.0).abs() > 1e-9 {
            return Err(Error::config(format!(
                "split ratios must sum to 1, got {}",
                a + b + c
            )));
        }
        if self.min_interactions < 3 {
            return Err(Error::config("min_interactions must be at least 3"));
        }
        Ok(())
    }

    /// Index cuts `(train_end, val_end)` for a history of length `n >= 3`.
    ///
    /// `train = [0, train_end)`, `val = [train_end, val_end)`, `test = [val_end, n)`.
    /// Validation and test get at least one event each, taken from train.
    pub fn cuts(&self, n: usize) -> (usize, usize) {
        let (train, val, _) = self.ratios;
        let nf = n as f64;
        let mut train_end = (nf * train + 1e-9).floor() as usize;
        let mut val_end = (nf * (train + val) + 1e-9).floor() as usize;
        val_end = val_end.min(n - 1);
        if train_end + 1 > val_end {
            train_end = val_end.saturating_sub(1);
        }
        if train_end == 0 {
            train_end = 1;
            val_end = val_end.max(2);
        }
        (train_end, val_end)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserSplit {
    pub user_id: String,
    pub train: Vec<Interaction>,
    pub validation: Vec<Interaction>,
    pub test: Vec<Interaction>,
}

impl UserSplit {
    pub fn len(&self) -> usize {
        self.train.len() + self.validation.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn all(&self) -> impl Iterator<Item = &Interaction> {
        self.train
            .iter()
            .chain(self.validation.iter())
            .chain(self.test.iter())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub n_users: usize,
    pub n_items: usize,
    pub n_interactions: usize,
    pub profile_size_mean: f64,
    pub profile_size_median: f64,
    pub profile_size_mode: usize,
    pub profile_size_stddev: f64,
}

impl DatasetStats {
    /// Statistics over per-user profile sizes. The standard deviation uses
    /// the sample (n - 1) denominator.
    pub fn from_sizes(sizes: &[usize], n_items: usize) -> Self {
        let n = sizes.len();
        let total: usize = sizes.iter().sum();
        if n == 0 {
            return DatasetStats {
                n_users: 0,
                n_items,
                n_interactions: 0,
                profile_size_mean: 0.0,
                profile_size_median: 0.0,
                profile_size_mode: 0,
                profile_size_stddev: 0.0,
            };
        }
        let mean = total as f64 / n as f64;
        let mut sorted = sizes.to_vec();
        sorted.sort_unstable();
        let median = if n % 2 == 1 {
            sorted[n / 2] as f64
        } else {
            (sorted[n / 2 - 1] + sorted[n / 2]) as f64 / 2.0
        };
        let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
        for &s in sizes {
            *counts.entry(s).or_default() += 1;
        }
        // smallest size among the most frequent
        let mode = counts
            .iter()
            .fold((0usize, 0usize), |best, (&size, &c)| {
                if c > best.1 {
                    (size, c)
                } else {
                    best
                }
            })
            .0;
        let stddev = if n > 1 {
            let ss: f64 = sizes.iter().map(|&s| (s as f64 - mean).powi(2)).sum();
            (ss / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        DatasetStats {
            n_users: n,
            n_items,
            n_interactions: total,
            profile_size_mean: mean,
            profile_size_median: median,
            profile_size_mode: mode,
            profile_size_stddev: stddev,
        }
    }
}

/// Leakage-free per-user split of a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitDataset {
    /// Sorted by `user_id`.
    pub users: Vec<UserSplit>,
    pub item_catalog: BTreeSet<String>,
    pub stats: DatasetStats,
}

impl SplitDataset {
    pub fn user(&self, user_id: &str) -> Option<&UserSplit> {
        self.users
            .binary_search_by(|u| u.user_id.as_str().cmp(user_id))
            .ok()
            .map(|i| &self.users[i])
    }

    pub fn catalog_ids(&self) -> Vec<String> {
        self.item_catalog.iter().cloned().collect()
    }

    /// Checks ordering, partition and catalog invariants; returns a
    /// description of the first violation.
    pub fn verify(&self) -> std::result::Result<(), String> {
        for u in &self.users {
            let max_train = u.train.iter().map(|i| i.timestamp).max();
            let min_val = u.validation.iter().map(|i| i.timestamp).min();
            let max_val = u.validation.iter().map(|i| i.timestamp).max();
            let min_test = u.test.iter().map(|i| i.timestamp).min();
            if let (Some(a), Some(b)) = (max_train, min_val) {
                if a > b {
                    return Err(format!("user {}: train after validation", u.user_id));
                }
            }
            if let (Some(a), Some(b)) = (max_val, min_test) {
                if a > b {
                    return Err(format!("user {}: validation after test", u.user_id));
                }
            }
            if u.train.is_empty() || u.validation.is_empty() || u.test.is_empty() {
                return Err(format!("user {}: empty partition", u.user_id));
            }
            for it in u.all() {
                if it.user_id != u.user_id {
                    return Err(format!("user {}: foreign interaction", u.user_id));
                }
                if !self.item_catalog.contains(&it.item_id) {
                    return Err(format!("item {} missing from catalog", it.item_id));
                }
            }
        }
        Ok(())
    }
}

/// Splits every user with at least `min_interactions` events chronologically.
/// Users below the threshold are dropped.
pub fn temporal_split(
    histories: &BTreeMap<String, Vec<Interaction>>,
    cfg: &SplitConfig,
) -> Result<SplitDataset> {
    cfg.validate()?;
    let mut users = Vec::new();
    let mut catalog = BTreeSet::new();
    for (user_id, history) in histories {
        if history.len() < cfg.min_interactions {
            continue;
        }
        let mut sorted = history.clone();
        sorted.sort_by(|a, b| (a.timestamp, &a.item_id).cmp(&(b.timestamp, &b.item_id)));
        let (train_end, val_end) = cfg.cuts(sorted.len());
        let test = sorted.split_off(val_end);
        let validation = sorted.split_off(train_end);
        let train = sorted;
        for it in train.iter().chain(&validation).chain(&test) {
            catalog.insert(it.item_id.clone());
        }
        users.push(UserSplit {
            user_id: user_id.clone(),
            train,
            validation,
            test,
        });
    }
    if users.is_empty() {
        return Err(Error::data("empty split: no user meets the minimum history length"));
    }
    let sizes: Vec<usize> = users.iter().map(UserSplit::len).collect();
    let stats = DatasetStats::from_sizes(&sizes, catalog.len());
    Ok(SplitDataset {
        users,
        item_catalog: catalog,
        stats,
    })
}

/// Full ingestion: filters item metadata, drops interactions on removed
/// items, and splits. Returns the split and the retained metadata.
pub fn build_dataset(
    interactions: Vec<Interaction>,
    meta: Vec<ItemMeta>,
    min_desc_chars: usize,
    cfg: &SplitConfig,
) -> Result<(SplitDataset, Vec<ItemMeta>)> {
    let kept = filter_items(meta, min_desc_chars);
    let kept_ids: BTreeSet<&str> = kept.iter().map(|m| m.item_id.as_str()).collect();
    let retained: Vec<Interaction> = interactions
        .into_iter()
        .filter(|i| kept_ids.contains(i.item_id.as_str()))
        .collect();
    let split = temporal_split(&group_by_user(retained), cfg)?;
    let catalog_meta = kept
        .into_iter()
        .filter(|m| split.item_catalog.contains(&m.item_id))
        .collect();
    Ok((split, catalog_meta))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledPair {
    pub user_id: String,
    pub item_id: String,
    pub label: u8,
}

/// Draws `n_per_pos` distinct entries of `pool` for each of `n_pos`
/// positives. Pools no larger than the request are returned whole.
pub fn sample_from_pool<R: rand::Rng>(
    pool: &[usize],
    n_pos: usize,
    n_per_pos: usize,
    rng: &mut R,
) -> Vec<usize> {
    let mut out = Vec::with_capacity(n_pos * n_per_pos);
    for _ in 0..n_pos {
        if pool.len() <= n_per_pos {
            out.extend_from_slice(pool);
        } else {
            out.extend(index::sample(rng, pool.len(), n_per_pos).into_iter().map(|i| pool[i]));
        }
    }
    out
}

/// Negative samples for one user: `n_neg_per_pos` catalog items per training
/// positive, never touching anything the user interacted with in any split.
pub fn sample_negatives(
    split: &SplitDataset,
    user_id: &str,
    n_neg_per_pos: usize,
    rng_seed: u64,
) -> Result<Vec<LabeledPair>> {
    let user = split
        .user(user_id)
        .ok_or_else(|| Error::data(format!("unknown user {user_id}")))?;
    let seen: BTreeSet<&str> = user.all().map(|i| i.item_id.as_str()).collect();
    let catalog: Vec<&String> = split.item_catalog.iter().collect();
    let pool: Vec<usize> = (0..catalog.len())
        .filter(|&i| !seen.contains(catalog[i].as_str()))
        .collect();
    if pool.len() < n_neg_per_pos {
        log::warn!(
            "user {user_id}: negative pool has {} items, fewer than the {n_neg_per_pos} requested",
            pool.len()
        );
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    Ok(sample_from_pool(&pool, user.train.len(), n_neg_per_pos, &mut rng)
        .into_iter()
        .map(|i| LabeledPair {
            user_id: user_id.to_owned(),
            item_id: catalog[i].clone(),
            label: 0,
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitCut {
    pub user_id: String,
    pub n: usize,
    pub train_end: usize,
    pub val_end: usize,
}

/// Per-user index cuts plus a content hash over the split, for
/// reproducibility checks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub content_hash: String,
    pub n_users: usize,
    pub n_items: usize,
    pub cuts: Vec<SplitCut>,
}

impl SplitManifest {
    pub fn from_split(split: &SplitDataset) -> Self {
        let cuts: Vec<SplitCut> = split
            .users
            .iter()
            .map(|u| SplitCut {
                user_id: u.user_id.clone(),
                n: u.len(),
                train_end: u.train.len(),
                val_end: u.train.len() + u.validation.len(),
            })
            .collect();
        let body = serde_json::to_vec(&(&split.users, &split.item_catalog))
            .expect("split serializes");
        SplitManifest {
            content_hash: text::sha256_hex(&body),
            n_users: split.users.len(),
            n_items: split.item_catalog.len(),
            cuts,
        }
    }
}

/// Dense integer indices for users and items of a split, in sorted id order.
#[derive(Debug, Clone)]
pub struct Index {
    pub user_ids: Vec<String>,
    pub item_ids: Vec<String>,
    item_pos: HashMap<String, usize>,
}

impl Index {
    pub fn new(split: &SplitDataset) -> Self {
        let user_ids: Vec<String> = split.users.iter().map(|u| u.user_id.clone()).collect();
        let item_ids: Vec<String> = split.item_catalog.iter().cloned().collect();
        let item_pos = item_ids
            .iter()
            .enumerate()
            .map(|(i, id)| (id.clone(), i))
            .collect();
        Index {
            user_ids,
            item_ids,
            item_pos,
        }
    }

    pub fn item(&self, id: &str) -> Option<usize> {
        self.item_pos.get(id).copied()
    }

    pub fn n_users(&self) -> usize {
        self.user_ids.len()
    }

    pub fn n_items(&self) -> usize {
        self.item_ids.len()
    }
}

/// One user's events as item indices.
#[derive(Debug, Clone, PartialEq)]
pub struct IndexedUser {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
    /// Catalog items the user never touched, ascending; negatives come from here.
    pub negative_pool: Vec<usize>,
}

/// A split with ids replaced by dense indices, in [`Index`] order.
#[derive(Debug, Clone)]
pub struct IndexedSplit {
    pub index: Index,
    pub users: Vec<IndexedUser>,
}

impl IndexedSplit {
    pub fn new(split: &SplitDataset) -> Self {
        let index = Index::new(split);
        let to_idx = |events: &[Interaction]| -> Vec<usize> {
            events
                .iter()
                .map(|e| index.item(&e.item_id).expect("catalog covers every split item"))
                .collect()
        };
        let users = split
            .users
            .iter()
            .map(|u| {
                let train = to_idx(&u.train);
                let validation = to_idx(&u.validation);
                let test = to_idx(&u.test);
                let mut seen = vec![false; index.n_items()];
                for &i in train.iter().chain(&validation).chain(&test) {
                    seen[i] = true;
                }
                let negative_pool = (0..index.n_items()).filter(|&i| !seen[i]).collect();
                IndexedUser {
                    train,
                    validation,
                    test,
                    negative_pool,
                }
            })
            .collect();
        IndexedSplit { index, users }
    }

    pub fn n_users(&self) -> usize {
        self.users.len()
    }

    pub fn n_items(&self) -> usize {
        self.index.n_items()
    }

    pub fn n_train(&self) -> usize {
        self.users.iter().map(|u| u.train.len()).sum()
    }
}
