//! Per-stage provenance manifests and the hash checks that chain them.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use temporec::text::sha256_hex;
use temporec::{Error, Result};

pub const TOOL_VERSION: &str = concat!("temporec ", env!("CARGO_PKG_VERSION"));

/// What one stage consumed and produced. Paths under the work directory are
/// stored relative to it; external inputs keep the path given in the config.
/// Wall-clock timings live in `timings/` so manifests stay reproducible.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: String,
    pub tool_version: String,
    pub config_hash: String,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

pub fn file_hash(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

/// The work directory of one run.
#[derive(Debug, Clone)]
pub struct Workspace {
    /// Directory that relative config paths resolve against.
    pub base: PathBuf,
    pub work: PathBuf,
}

impl Workspace {
    pub fn new(base: &Path, work_dir: &Path) -> Self {
        Workspace {
            base: base.to_path_buf(),
            work: base.join(work_dir),
        }
    }

    pub fn resolve(&self, configured: &Path) -> PathBuf {
        self.base.join(configured)
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.work.join(rel)
    }

    fn manifest_path(&self, stage: &str) -> PathBuf {
        self.path(&format!("manifests/{stage}.json"))
    }

    /// Resolves a manifest key: work-relative outputs first, then external
    /// paths as written in the config.
    fn locate(&self, key: &str) -> PathBuf {
        let inside = self.path(key);
        if inside.exists() {
            inside
        } else {
            self.resolve(Path::new(key))
        }
    }

    pub fn read_manifest(&self, stage: &str) -> Result<Option<Manifest>> {
        let path = self.manifest_path(stage);
        if !path.exists() {
            return Ok(None);
        }
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map(Some).map_err(|e| Error::Stale {
            stage: stage.to_owned(),
            reason: format!("unreadable manifest: {e}"),
        })
    }

    pub fn write_manifest(&self, m: &Manifest) -> Result<()> {
        let path = self.manifest_path(&m.stage);
        write_file(&path, (serde_json::to_string_pretty(m).expect("manifest serializes") + "\n").as_bytes())
    }

    /// Hashes every output file of a stage, keyed by work-relative path.
    pub fn hash_outputs(&self, rels: &[String]) -> Result<BTreeMap<String, String>> {
        rels.iter()
            .map(|r| Ok((r.clone(), file_hash(&self.path(r))?)))
            .collect()
    }

    fn check_files(&self, stage: &str, files: &BTreeMap<String, String>, what: &str) -> Result<()> {
        for (key, expected) in files {
            let path = self.locate(key);
            let actual = file_hash(&path).map_err(|_| Error::Stale {
                stage: stage.to_owned(),
                reason: format!("{what} {key} is missing"),
            })?;
            if &actual != expected {
                return Err(Error::Stale {
                    stage: stage.to_owned(),
                    reason: format!("{what} {key} changed since it ran"),
                });
            }
        }
        Ok(())
    }

    /// Loads an upstream stage's manifest and checks that it ran with the
    /// current configuration, that its inputs are unchanged and that its
    /// outputs are intact. Any failure asks for that stage to be rerun.
    pub fn require(&self, stage: &str, config_hash: &str) -> Result<Manifest> {
        let m = self.read_manifest(stage)?.ok_or_else(|| Error::Stale {
            stage: stage.to_owned(),
            reason: "it has not been run".into(),
        })?;
        if m.config_hash != config_hash {
            return Err(Error::Stale {
                stage: stage.to_owned(),
                reason: "its configuration changed".into(),
            });
        }
        self.check_files(stage, &m.inputs, "input")?;
        self.check_files(stage, &m.outputs, "output")?;
        Ok(m)
    }

    /// True when `stage` already ran with this configuration and inputs and
    /// its outputs are untouched.
    pub fn up_to_date(&self, stage: &str, config_hash: &str, inputs: &BTreeMap<String, String>) -> bool {
        match self.read_manifest(stage) {
            Ok(Some(m)) => {
                m.config_hash == config_hash
                    && &m.inputs == inputs
                    && self.check_files(stage, &m.outputs, "output").is_ok()
            }
            _ => false,
        }
    }

    pub fn write_timing(&self, stage: &str, seconds: f64) -> Result<()> {
        let body = serde_json::json!({ "stage": stage, "seconds": seconds });
        write_file(
            &self.path(&format!("timings/{stage}.json")),
            (body.to_string() + "\n").as_bytes(),
        )
    }
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
