//! The single JSON run configuration and its command-line overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use temporec::dataset::SplitConfig;
use temporec::experiment::{ExperimentConfig, Method};
use temporec::model::{ScoringVariant, TrainConfig};
use temporec::synth::SynthConfig;
use temporec::text::sha256_hex;
use temporec::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChatKind {
    Template,
    Remote,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    Hash,
    Remote,
}

/// Everything a pipeline run needs. Relative paths resolve against the
/// directory holding the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub interactions: PathBuf,
    pub items: PathBuf,
    pub work_dir: PathBuf,
    pub prompts_dir: Option<PathBuf>,
    pub chat: ChatKind,
    pub chat_model: String,
    pub encoder: EncoderKind,
    pub dim: usize,
    pub max_in_flight: usize,
    pub min_desc_chars: usize,
    pub split: SplitConfig,
    pub recent_k: usize,
    pub max_history_items: usize,
    pub mf_factors: usize,
    pub ks: Vec<usize>,
    pub methods: Vec<Method>,
    pub variants: Vec<ScoringVariant>,
    pub baseline: Method,
    pub significance_alpha: f64,
    pub seeds: Vec<u64>,
    pub train: TrainConfig,
    pub synth: SynthConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let exp = ExperimentConfig::default();
        RunConfig {
            interactions: "data/interactions.jsonl".into(),
            items: "data/items.jsonl".into(),
            work_dir: "run".into(),
            prompts_dir: None,
            chat: ChatKind::Template,
            chat_model: "gpt-4o-mini".into(),
            encoder: EncoderKind::Hash,
            dim: 384,
            max_in_flight: 2,
            min_desc_chars: 500,
            split: SplitConfig::default(),
            recent_k: exp.recent_k,
            max_history_items: exp.max_history_items,
            mf_factors: exp.mf_factors,
            ks: exp.ks,
            methods: Method::ALL.to_vec(),
            variants: ScoringVariant::ALL.to_vec(),
            baseline: Method::Centric,
            significance_alpha: exp.significance_alpha,
            seeds: vec![0],
            train: exp.train,
            synth: SynthConfig::default(),
        }
    }
}

/// Sets `path` (dot-separated object keys) in a JSON document. The value is
/// parsed as JSON when possible and taken as a string otherwise.
pub fn apply_override(doc: &mut Value, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::config(format!("override {assignment:?} is not key=value")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_owned()));
    let mut node = doc;
    let keys: Vec<&str> = path.split('.').collect();
    for (i, key) in keys.iter().enumerate() {
        if key.is_empty() {
            return Err(Error::config(format!("override {assignment:?} has an empty key")));
        }
        let obj = node
            .as_object_mut()
            .ok_or_else(|| Error::config(format!("override {path:?}: {key:?} is not inside an object")))?;
        if i + 1 == keys.len() {
            obj.insert((*key).to_owned(), value);
            return Ok(());
        }
        node = obj.entry(*key).or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!("split yields at least one key")
}

/// Overlays `patch` onto `base`, recursing into objects present in both.
fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(base), Value::Object(patch)) => {
            for (key, value) in patch {
                match base.get_mut(&key) {
                    Some(slot) => merge(slot, value),
                    None => {
                        base.insert(key, value);
                    }
                }
            }
        }
        (slot, value) => *slot = value,
    }
}

impl RunConfig {
    /// Reads `path` (or starts from defaults when `None`), applies `--set`
    /// overrides in order, then `--seed`.
    pub fn load(path: Option<&Path>, overrides: &[String], seed: Option<u64>) -> Result<(Self, PathBuf)> {
        let (doc, base) = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                let doc: Value = serde_json::from_str(&text)
                    .map_err(|e| Error::config(format!("{}: {e}", p.display())))?;
                let base = p.parent().map(Path::to_path_buf).unwrap_or_default();
                (doc, base)
            }
            None => (Value::Object(Default::default()), PathBuf::new()),
        };
        let mut merged = serde_json::to_value(RunConfig::default()).expect("defaults serialize");
        merge(&mut merged, doc);
        let mut doc = merged;
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let mut cfg: RunConfig = serde_json::from_value(doc).map_err(|e| Error::config(e.to_string()))?;
        if let Some(s) = seed {
            cfg.seeds = vec![s];
            cfg.synth.seed = s;
        }
        cfg.validate()?;
        let base = if base.as_os_str().is_empty() { PathBuf::from(".") } else { base };
        Ok((cfg, base))
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim < 2 {
            return Err(Error::config("dim must be at least 2"));
        }
        if self.ks.is_empty() || self.ks.contains(&0) {
            return Err(Error::config("ks must be a nonempty list of positive integers"));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("at least one seed is required"));
        }
        if self.recent_k == 0 || self.max_history_items == 0 {
            return Err(Error::config("recent_k and max_history_items must be positive"));
        }
        if !(0.0..1.0).contains(&self.significance_alpha) || self.significance_alpha == 0.0 {
            return Err(Error::config("significance_alpha must lie in (0, 1)"));
        }
        if self.max_in_flight == 0 {
            return Err(Error::config("max_in_flight must be at least 1"));
        }
        self.split.validate()?;
        self.train.validate()
    }

    pub fn experiment(&self, seed: u64) -> ExperimentConfig {
        ExperimentConfig {
            recent_k: self.recent_k,
            max_history_items: self.max_history_items,
            mf_factors: self.mf_factors,
            ks: self.ks.clone(),
            significance_alpha: self.significance_alpha,
            train: TrainConfig {
                seed,
                ..self.train.clone()
            },
        }
    }

    /// Hash of the configuration fields a stage depends on.
    pub fn stage_hash(&self, stage: &str) -> String {
        let part = match stage {
            "synth" => serde_json::json!({ "synth": self.synth }),
            "ingest" => serde_json::json!({ "min_desc_chars": self.min_desc_chars, "split": self.split }),
            "profile" => serde_json::json!({
                "chat": self.chat,
                "chat_model": self.chat_model,
                "recent_k": self.recent_k,
                "max_history_items": self.max_history_items,
                "prompts_dir": self.prompts_dir,
            }),
            "encode" => serde_json::json!({ "encoder": self.encoder, "dim": self.dim }),
            "train" => serde_json::json!({
                "train": self.train,
                "methods": self.methods,
                "seeds": self.seeds,
                "mf_factors": self.mf_factors,
                "recent_k": self.recent_k,
            }),
            "evaluate" => serde_json::json!({
                "ks": self.ks,
                "baseline": self.baseline,
                "significance_alpha": self.significance_alpha,
            }),
            "ablate" => serde_json::json!({
                "train": self.train,
                "variants": self.variants,
                "seeds": self.seeds,
                "ks": self.ks,
                "significance_alpha": self.significance_alpha,
            }),
            _ => serde_json::json!({ "ks": self.ks, "baseline": self.baseline }),
        };
        sha256_hex(part.to_string().as_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_reach_nested_fields() {
        let mut doc = serde_json::json!({"train": {"learning_rate": 0.001}});
        apply_override(&mut doc, "train.learning_rate=0.01").unwrap();
        apply_override(&mut doc, "chat=template").unwrap();
        apply_override(&mut doc, "ks=[5,10]").unwrap();
        apply_override(&mut doc, "synth.n_users=7").unwrap();
        let cfg: RunConfig = serde_json::from_value(doc).unwrap();
        assert_eq!(cfg.train.learning_rate, 0.01);
        assert_eq!(cfg.ks, vec![5, 10]);
        assert_eq!(cfg.synth.n_users, 7);
        assert_eq!(cfg.chat, ChatKind::Template);
    }

    #[test]
    fn nested_overrides_keep_sibling_defaults() {
        let (cfg, _) = RunConfig::load(None, &["split.ratios=[0.7,0.15,0.15]".into()], None).unwrap();
        assert_eq!(cfg.split.ratios, (0.7, 0.15, 0.15));
        assert_eq!(cfg.split.min_interactions, SplitConfig::default().min_interactions);
    }

    #[test]
    fn malformed_overrides_are_config_errors() {
        let mut doc = serde_json::json!({"dim": 4});
        assert!(apply_override(&mut doc, "dim").is_err());
        assert!(apply_override(&mut doc, "dim.x=1").is_err());
        assert!(apply_override(&mut doc, "a..b=1").is_err());
    }

    #[test]
    fn unknown_keys_and_bad_values_rejected() {
        assert!(RunConfig::load(None, &["bogus=1".into()], None).is_err());
        assert!(RunConfig::load(None, &["encoder=onnx".into()], None).is_err());
        assert!(RunConfig::load(None, &["ks=[]".into()], None).is_err());
        let (cfg, _) = RunConfig::load(None, &[], Some(9)).unwrap();
        assert_eq!(cfg.seeds, vec![9]);
        assert_eq!(cfg.synth.seed, 9);
    }

    #[test]
    fn stage_hashes_track_only_their_fields() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.ks = vec![5];
        assert_eq!(a.stage_hash("ingest"), b.stage_hash("ingest"));
        assert_eq!(a.stage_hash("train"), b.stage_hash("train"));
        assert_ne!(a.stage_hash("evaluate"), b.stage_hash("evaluate"));
    }
}
