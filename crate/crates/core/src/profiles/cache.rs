use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock};

use serde::{Deserialize, Serialize};

use super::PromptKind;
use crate::error::{Error, Result};

/// One cached completion, stored as a JSONL line.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub user_id: String,
    pub kind: PromptKind,
    pub prompt_hash: String,
    pub model: String,
    pub text: String,
}

type Key = (String, PromptKind, String);

/// Append-only JSONL profile cache. Reads are concurrent; appends are
/// serialized through one writer.
#[derive(Debug)]
pub struct ProfileCache {
    entries: RwLock<HashMap<Key, String>>,
    writer: Mutex<Option<(PathBuf, File)>>,
}

impl ProfileCache {
    pub fn in_memory() -> Self {
        ProfileCache {
            entries: RwLock::default(),
            writer: Mutex::new(None),
        }
    }

    /// Opens (or creates) a cache file and loads every entry in it.
    pub fn open(path: &Path) -> Result<Self> {
        let mut entries = HashMap::new();
        if path.exists() {
            let content = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            for (i, line) in content.lines().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                let e: CacheEntry = serde_json::from_str(line).map_err(|e| Error::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    message: e.to_string(),
                })?;
                entries.insert((e.user_id, e.kind, e.prompt_hash), e.text);
            }
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(ProfileCache {
            entries: RwLock::new(entries),
            writer: Mutex::new(Some((path.to_path_buf(), file))),
        })
    }

    pub fn get(&self, user_id: &str, kind: PromptKind, prompt_hash: &str) -> Option<String> {
        self.entries
            .read()
            .expect("cache lock")
            .get(&(user_id.to_owned(), kind, prompt_hash.to_owned()))
            .cloned()
    }

    pub fn put(&self, entry: CacheEntry) -> Result<()> {
        let mut writer = self.writer.lock().expect("cache writer");
        if let Some((path, file)) = writer.as_mut() {
            let mut line = serde_json::to_string(&entry).expect("entry serializes");
            line.push('\n');
            file.write_all(line.as_bytes())
                .map_err(|e| Error::io(path.as_path(), e))?;
        }
        self.entries
            .write()
            .expect("cache lock")
            .insert((entry.user_id, entry.kind, entry.prompt_hash), entry.text);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.read().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
