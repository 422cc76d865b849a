//! Deterministic synthetic interaction data with known topical structure.
//!
//! Items live on a grid of topics and styles. Every user has a long-term
//! topic and a preferred style. A drifting user's final window (the last
//! `recent_k` training events plus every validation and test event) moves to a
//! different short-term topic. Outside the window, and for the held-out
//! events, the user picks their own style with probability `style_loyalty`;
//! inside the training part of the window they are exploring the new topic
//! and stick to their style only with probability `explore_loyalty`.

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::{Interaction, ItemMeta, SplitConfig};
use crate::error::{Error, Result};

const TOPICS: [&str; 16] = [
    "astronomy", "baking", "cycling", "gardening", "jazz", "knitting", "mountaineering", "origami",
    "photography", "poetry", "robotics", "sailing", "chess", "pottery", "surfing", "woodworking",
];

const STYLES: [&str; 8] = [
    "vintage", "modern", "minimalist", "deluxe", "rustic", "playful", "scholarly", "cinematic",
];

const NOUNS: [&str; 12] = [
    "guide", "collection", "handbook", "companion", "anthology", "primer", "journal", "atlas",
    "workbook", "manual", "almanac", "digest",
];

const FILLER: [&str; 24] = [
    "readers", "will", "find", "careful", "notes", "about", "the", "craft", "with", "plenty", "of",
    "examples", "and", "clear", "advice", "for", "every", "level", "this", "edition", "covers",
    "practical", "ideas", "inside",
];

const BASE_TIMESTAMP: i64 = 1_600_000_000;
const DAY: i64 = 86_400;
const MIN_DESCRIPTION_CHARS: usize = 600;

pub fn topic_name(t: usize) -> String {
    TOPICS
        .get(t)
        .map(|s| s.to_string())
        .unwrap_or_else(|| format!("topic{t}"))
}

pub fn style_name(s: usize) -> String {
    STYLES
        .get(s)
        .map(|x| x.to_string())
        .unwrap_or_else(|| format!("style{s}"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_users: usize,
    pub n_items: usize,
    pub n_topics: usize,
    pub n_styles: usize,
    pub drift_prob: f64,
    pub interactions_mean: f64,
    pub interactions_std: f64,
    pub style_loyalty: f64,
    pub explore_loyalty: f64,
    pub recent_k: usize,
    pub split: SplitConfig,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_users: 500,
            n_items: 300,
            n_topics: 6,
            n_styles: 3,
            drift_prob: 0.8,
            interactions_mean: 20.0,
            interactions_std: 4.0,
            style_loyalty: 0.8,
            explore_loyalty: 0.34,
            recent_k: 5,
            split: SplitConfig::default(),
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("drift_prob", self.drift_prob),
            ("style_loyalty", self.style_loyalty),
            ("explore_loyalty", self.explore_loyalty),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config(format!("{name} must lie in [0, 1], got {p}")));
            }
        }
        for (name, n) in [
            ("n_users", self.n_users),
            ("n_items", self.n_items),
            ("n_topics", self.n_topics),
            ("n_styles", self.n_styles),
            ("recent_k", self.recent_k),
        ] {
            if n == 0 {
                return Err(Error::config(format!("{name} must be at least 1")));
            }
        }
        if self.drift_prob > 0.0 && self.n_topics < 2 {
            return Err(Error::config("drift needs at least two topics"));
        }
        if self.n_items < self.n_topics * self.n_styles {
            return Err(Error::config("need at least one item per topic and style"));
        }
        if self.n_items / self.n_topics < self.split.min_interactions {
            return Err(Error::config("each topic needs at least min_interactions items"));
        }
        if !(self.interactions_mean >= 1.0 && self.interactions_std >= 0.0) {
            return Err(Error::config("interactions_mean must be >= 1 and interactions_std >= 0"));
        }
        self.split.validate()
    }
}

/// Known generating parameters of one user.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserTruth {
    pub user_id: String,
    pub long_topic: String,
    pub short_topic: Option<String>,
    pub style: String,
    /// Number of trailing events drawn from the short-term topic.
    pub window: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemTruth {
    pub item_id: String,
    pub topic: String,
    pub style: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub users: Vec<UserTruth>,
    pub items: Vec<ItemTruth>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthData {
    pub interactions: Vec<Interaction>,
    pub items: Vec<ItemMeta>,
    pub truth: GroundTruth,
}

fn description(topic: &str, style: &str, noun: &str, rng: &mut ChaCha8Rng) -> String {
    let mut words: Vec<String> = Vec::new();
    let mut len = 0;
    let mut sentence = 0;
    while len < MIN_DESCRIPTION_CHARS {
        let mut s: Vec<&str> = (0..6).map(|_| *FILLER.choose(rng).expect("nonempty")).collect();
        s.push(topic);
        if sentence % 2 == 0 {
            s.push(style);
        }
        if sentence % 3 == 0 {
            s.push(noun);
        }
        s.shuffle(rng);
        let mut text = s.join(" ");
        text[..1].make_ascii_uppercase();
        text.push('.');
        len += text.len() + 1;
        words.push(text);
        sentence += 1;
    }
    words.join(" ")
}

/// Picks an unseen item in the style cell, else anywhere in the topic.
fn pick(rng: &mut ChaCha8Rng, candidates: [&[usize]; 2], seen: &BTreeSet<usize>) -> Option<usize> {
    for pool in candidates {
        let fresh: Vec<usize> = pool.iter().copied().filter(|i| !seen.contains(i)).collect();
        if let Some(&i) = fresh.choose(rng) {
            return Some(i);
        }
    }
    None
}

pub fn generate(cfg: &SynthConfig) -> Result<SynthData> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let cell_of = |i: usize| (i % cfg.n_topics, (i / cfg.n_topics) % cfg.n_styles);
    let mut cells = vec![Vec::new(); cfg.n_topics * cfg.n_styles];
    let mut by_topic = vec![Vec::new(); cfg.n_topics];
    let mut items = Vec::with_capacity(cfg.n_items);
    let mut item_truth = Vec::with_capacity(cfg.n_items);
    for i in 0..cfg.n_items {
        let (t, s) = cell_of(i);
        cells[t * cfg.n_styles + s].push(i);
        by_topic[t].push(i);
        let (topic, style) = (topic_name(t), style_name(s));
        let noun = *NOUNS.choose(&mut rng).expect("nonempty");
        let item_id = format!("item{i:05}");
        let title = format!("{} {} {} no{i}", capitalize(&style), capitalize(&topic), capitalize(noun));
        items.push(ItemMeta {
            item_id: item_id.clone(),
            title,
            description: description(&topic, &style, noun, &mut rng),
        });
        item_truth.push(ItemTruth {
            item_id,
            topic,
            style,
        });
    }

    let length = Normal::new(cfg.interactions_mean, cfg.interactions_std.max(f64::MIN_POSITIVE))
        .expect("validated");
    // no history can outgrow the smallest topic
    let max_len = cfg.n_items / cfg.n_topics;
    let mut interactions = Vec::new();
    let mut users = Vec::with_capacity(cfg.n_users);
    for u in 0..cfg.n_users {
        let user_id = format!("user{u:05}");
        let n = (length.sample(&mut rng).round() as i64)
            .clamp(cfg.split.min_interactions as i64, max_len as i64) as usize;
        let long_topic = rng.gen_range(0..cfg.n_topics);
        let style = rng.gen_range(0..cfg.n_styles);
        let drifted = rng.gen_bool(cfg.drift_prob);
        let short_topic = drifted.then(|| {
            let t = rng.gen_range(0..cfg.n_topics - 1);
            if t >= long_topic {
                t + 1
            } else {
                t
            }
        });
        let (train_end, _) = cfg.split.cuts(n);
        let window_start = train_end.saturating_sub(cfg.recent_k);
        let window = if drifted { n - window_start } else { 0 };
        let offset = rng.gen_range(0..365) * DAY;
        let mut seen = BTreeSet::new();
        for pos in 0..n {
            let in_window = pos >= window_start;
            let topic = match short_topic {
                Some(t) if in_window => t,
                _ => long_topic,
            };
            let loyalty = if drifted && in_window && pos < train_end {
                cfg.explore_loyalty
            } else {
                cfg.style_loyalty
            };
            let s = if rng.gen_bool(loyalty) {
                style
            } else {
                rng.gen_range(0..cfg.n_styles)
            };
            let cell = &cells[topic * cfg.n_styles + s];
            let item = pick(&mut rng, [cell, &by_topic[topic]], &seen).expect("history fits in a topic");
            seen.insert(item);
            interactions.push(Interaction {
                user_id: user_id.clone(),
                item_id: items[item].item_id.clone(),
                timestamp: BASE_TIMESTAMP + offset + pos as i64 * DAY,
            });
        }
        users.push(UserTruth {
            user_id,
            long_topic: topic_name(long_topic),
            short_topic: short_topic.map(topic_name),
            style: style_name(style),
            window,
        });
    }
    Ok(SynthData {
        interactions,
        items,
        truth: GroundTruth {
            users,
            items: item_truth,
        },
    })
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

impl SynthData {
    pub fn interactions_jsonl(&self) -> String {
        self.interactions
            .iter()
            .map(|i| serde_json::to_string(i).expect("serializes") + "\n")
            .collect()
    }

    pub fn items_jsonl(&self) -> String {
        self.items
            .iter()
            .map(|i| serde_json::to_string(i).expect("serializes") + "\n")
            .collect()
    }

    /// Writes `interactions.jsonl`, `items.jsonl` and `truth.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let truth = serde_json::to_string_pretty(&self.truth).expect("serializes") + "\n";
        for (name, body) in [
            ("interactions.jsonl", self.interactions_jsonl()),
            ("items.jsonl", self.items_jsonl()),
            ("truth.json", truth),
        ] {
            let path = dir.join(name);
            std::fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use std::collections::HashMap;

    use super::*;
    use crate::dataset::{build_dataset, filter_items, group_by_user};
    use crate::profiles::TemplateBackend;

    fn small(drift_prob: f64, seed: u64) -> SynthConfig {
        SynthConfig {
            n_users: 60,
            n_items: 120,
            drift_prob,
            seed,
            ..SynthConfig::default()
        }
    }

    fn topics_by_user(data: &SynthData) -> HashMap<String, Vec<String>> {
        let topic: HashMap<&str, &str> = data
            .truth
            .items
            .iter()
            .map(|t| (t.item_id.as_str(), t.topic.as_str()))
            .collect();
        let mut out: HashMap<String, Vec<String>> = HashMap::new();
        for it in &data.interactions {
            out.entry(it.user_id.clone())
                .or_default()
                .push(topic[it.item_id.as_str()].to_owned());
        }
        out
    }

    #[test]
    fn no_drift_means_single_topic() {
        let data = generate(&small(0.0, 1)).unwrap();
        for topics in topics_by_user(&data).values() {
            assert!(topics.iter().all(|t| t == &topics[0]));
        }
    }

    #[test]
    fn full_drift_moves_the_tail() {
        let cfg = small(1.0, 2);
        let data = generate(&cfg).unwrap();
        let truth: HashMap<&str, &UserTruth> =
            data.truth.users.iter().map(|u| (u.user_id.as_str(), u)).collect();
        for (user, topics) in topics_by_user(&data) {
            let t = truth[user.as_str()];
            let n = topics.len();
            let (train_end, _) = cfg.split.cuts(n);
            // the last recent_k training events and every held-out event
            let tail = &topics[train_end - cfg.recent_k.min(train_end)..];
            let head = &topics[..train_end - cfg.recent_k.min(train_end)];
            assert!(tail.len() >= cfg.recent_k + 1);
            let short = t.short_topic.as_ref().unwrap();
            assert!(tail.iter().all(|x| x == short));
            assert!(head.iter().all(|x| x != short && x == &t.long_topic));
        }
    }

    #[test]
    fn same_seed_same_bytes() {
        let a = generate(&small(0.5, 7)).unwrap();
        let b = generate(&small(0.5, 7)).unwrap();
        assert_eq!(a.interactions_jsonl(), b.interactions_jsonl());
        assert_eq!(a.items_jsonl(), b.items_jsonl());
        let c = generate(&small(0.5, 8)).unwrap();
        assert_ne!(a.interactions_jsonl(), c.interactions_jsonl());
    }

    #[test]
    fn output_survives_ingestion_unchanged() {
        let cfg = small(0.8, 3);
        let data = generate(&cfg).unwrap();
        assert!(data.items.iter().all(|m| m.description.chars().count() > 500));
        assert_eq!(filter_items(data.items.clone(), 500).len(), data.items.len());
        let users = group_by_user(data.interactions.clone());
        assert_eq!(users.len(), cfg.n_users);
        let (split, meta) = build_dataset(data.interactions.clone(), data.items.clone(), 500, &cfg.split).unwrap();
        assert_eq!(split.users.len(), cfg.n_users);
        let total: usize = split.users.iter().map(|u| u.len()).sum();
        assert_eq!(total, data.interactions.len());
        assert!(meta.len() <= data.items.len());
        split.verify().unwrap();
    }

    #[test]
    fn template_profiles_name_both_topics() {
        let cfg = small(1.0, 4);
        let data = generate(&cfg).unwrap();
        let truth: HashMap<&str, &UserTruth> =
            data.truth.users.iter().map(|u| (u.user_id.as_str(), u)).collect();
        let (split, meta) = build_dataset(data.interactions, data.items, 500, &cfg.split).unwrap();
        let blocks = crate::experiment::user_blocks(&split, &meta, 50, cfg.recent_k);
        for (user, b) in &blocks {
            let t = truth[user.as_str()];
            let short = TemplateBackend::short_term(b).to_lowercase();
            let long = TemplateBackend::long_term(b).to_lowercase();
            assert!(short.contains(t.short_topic.as_deref().unwrap()), "{short}");
            assert!(!short.contains(&t.long_topic), "{short}");
            assert!(long.contains(&t.long_topic), "{long}");
        }
    }

    #[test]
    fn invalid_configs_rejected() {
        let bad = SynthConfig {
            drift_prob: 1.5,
            ..SynthConfig::default()
        };
        assert!(generate(&bad).is_err());
        let bad = SynthConfig {
            n_topics: 1,
            ..SynthConfig::default()
        };
        assert!(generate(&bad).is_err());
    }
}
