//! Text → vector encoders.
//!
//! Two interchangeable backends implement [`TextEncoder`]:
//!
//! - [`HashEncoder`]: signed feature hashing with FNV-1a, bit-exact on every
//!   platform and free of any model dependency.
//! - [`RemoteEncoder`]: a client for an HTTP embedding service (`POST /embed`)
//!   with a content-addressed cache.
//!
//! The binary [`EmbeddingCache`] persists vectors between pipeline stages.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::dataset::ItemMeta;
use crate::error::{Error, Result};
use crate::http::{JsonClient, RetryPolicy};
use crate::text::{fnv1a64, key64, tokenize};

pub const DEFAULT_DIM: usize = 384;
pub const MAX_REMOTE_BATCH: usize = 64;
pub const ITEM_DESC_CHARS: usize = 1000;

/// Fixed-dimension real vector for a profile or item text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    pub values: Vec<f64>,
}

impl Embedding {
    pub fn zeros(dim: usize) -> Self {
        Embedding {
            values: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn dot(&self, other: &Embedding) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a * b)
            .sum()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

impl From<Vec<f64>> for Embedding {
    fn from(values: Vec<f64>) -> Self {
        Embedding { values }
    }
}

/// Signed feature hashing of `text` into `d` buckets, L2-normalized.
///
/// Tokens are lowercase alphanumeric runs. Each token's FNV-1a hash picks the
/// bucket (`h mod d`) and the sign (bit 63 clear → +1).
pub fn encode_hash(text: &str, d: usize) -> Embedding {
    assert!(d >= 2, "hash encoder needs d >= 2");
    let mut values = vec![0.0f64; d];
    for token in tokenize(text) {
        let h = fnv1a64(token.as_bytes());
        let idx = (h % d as u64) as usize;
        let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
        values[idx] += sign;
    }
    let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        for v in &mut values {
            *v /= norm;
        }
    }
    Embedding { values }
}

pub trait TextEncoder: Send + Sync {
    fn dim(&self) -> usize;

    /// Short identifier recorded in manifests ("hash" or the remote model).
    fn name(&self) -> String;

    /// Encodes `texts`, returning one vector per input in input order.
    fn encode(&self, texts: &[String]) -> Result<Vec<Embedding>>;
}

#[derive(Debug, Clone, Copy)]
pub struct HashEncoder {
    pub dim: usize,
}

impl HashEncoder {
    pub fn new(dim: usize) -> Result<Self> {
        if dim < 2 {
            return Err(Error::config("hash encoder dimension must be at least 2"));
        }
        Ok(HashEncoder { dim })
    }
}

impl TextEncoder for HashEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn name(&self) -> String {
        format!("hash-fnv1a-{}", self.dim)
    }

    fn encode(&self, texts: &[String]) -> Result<Vec<Embedding>> {
        Ok(texts.iter().map(|t| encode_hash(t, self.dim)).collect())
    }
}

/// The text fed to the encoder for an item: `"title. description"` with the
/// description cut to 1000 characters.
pub fn item_text(meta: &ItemMeta) -> String {
    let desc: String = meta.description.chars().take(ITEM_DESC_CHARS).collect();
    format!("{}. {}", meta.title, desc)
}

pub fn encode_item(meta: &ItemMeta, encoder: &dyn TextEncoder) -> Result<Embedding> {
    let mut out = encoder
        .encode(&[item_text(meta)])
        .map_err(|e| annotate(e, &meta.item_id))?;
    Ok(out.remove(0))
}

/// Encodes many items in one call, preserving order.
pub fn encode_items(items: &[ItemMeta], encoder: &dyn TextEncoder) -> Result<Vec<Embedding>> {
    let texts: Vec<String> = items.iter().map(item_text).collect();
    encoder.encode(&texts).map_err(|e| match items {
        [only] => annotate(e, &only.item_id),
        _ => e,
    })
}

fn annotate(e: Error, item_id: &str) -> Error {
    match e {
        Error::Transport(msg) => Error::Transport(format!("item {item_id}: {msg}")),
        other => other,
    }
}

#[derive(Debug, Serialize)]
struct EmbedRequest<'a> {
    texts: &'a [String],
}

#[derive(Debug, Deserialize)]
struct EmbedResponse {
    dim: usize,
    vectors: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub dim: usize,
    pub model: String,
}

/// Base URL of the embedding service for [`RemoteEncoder::from_env`].
pub const EMBED_BASE_ENV: &str = "TEMPOREC_EMBED_BASE";

/// Client for the embedding service, with an in-memory content-addressed cache.
pub struct RemoteEncoder {
    client: JsonClient,
    dim: usize,
    max_in_flight: usize,
    cache: Mutex<EmbeddingCache>,
    network_calls: AtomicUsize,
}

impl RemoteEncoder {
    pub fn new(base: &str, dim: usize, policy: RetryPolicy) -> Self {
        RemoteEncoder {
            client: JsonClient::new(base, None, policy),
            dim,
            max_in_flight: 2,
            cache: Mutex::new(EmbeddingCache::new(dim)),
            network_calls: AtomicUsize::new(0),
        }
    }

    /// Client for the service at `TEMPOREC_EMBED_BASE`.
    pub fn from_env(dim: usize) -> Result<Self> {
        let base = std::env::var(EMBED_BASE_ENV)
            .map_err(|_| Error::config(format!("{EMBED_BASE_ENV} is not set")))?;
        Ok(Self::new(&base, dim, RetryPolicy::default()))
    }

    pub fn with_max_in_flight(mut self, n: usize) -> Self {
        self.max_in_flight = n.max(1);
        self
    }

    pub fn with_cache(mut self, cache: EmbeddingCache) -> Result<Self> {
        if cache.dim() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                actual: cache.dim(),
            });
        }
        self.cache = Mutex::new(cache);
        Ok(self)
    }

    pub fn health(&self) -> Result<Health> {
        let h: Health = self.client.get("/health")?;
        if h.dim != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                actual: h.dim,
            });
        }
        Ok(h)
    }

    pub fn network_calls(&self) -> usize {
        self.network_calls.load(Ordering::SeqCst)
    }

    pub fn cache_snapshot(&self) -> EmbeddingCache {
        self.cache.lock().expect("cache lock").clone()
    }

    fn fetch(&self, texts: &[String]) -> Result<Vec<Embedding>> {
        self.network_calls.fetch_add(1, Ordering::SeqCst);
        let resp: EmbedResponse = self.client.post("/embed", &EmbedRequest { texts })?;
        if resp.dim != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                actual: resp.dim,
            });
        }
        if resp.vectors.len() != texts.len() {
            return Err(Error::Transport(format!(
                "embed service returned {} vectors for {} texts",
                resp.vectors.len(),
                texts.len()
            )));
        }
        resp.vectors
            .into_iter()
            .map(|v| {
                if v.len() != self.dim {
                    Err(Error::DimensionMismatch {
                        expected: self.dim,
                        actual: v.len(),
                    })
                } else {
                    Ok(Embedding::from(v))
                }
            })
            .collect()
    }
}

impl TextEncoder for RemoteEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn name(&self) -> String {
        format!("remote:{}", self.client.base())
    }

    fn encode(&self, texts: &[String]) -> Result<Vec<Embedding>> {
        let keys: Vec<u64> = texts.iter().map(|t| key64(t)).collect();
        let mut missing: Vec<String> = Vec::new();
        {
            let cache = self.cache.lock().expect("cache lock");
            let mut queued = std::collections::HashSet::new();
            for (t, k) in texts.iter().zip(&keys) {
                if cache.get(*k).is_none() && queued.insert(*k) {
                    missing.push(t.clone());
                }
            }
        }
        let batches: Vec<&[String]> = missing.chunks(MAX_REMOTE_BATCH).collect();
        let results: Mutex<Vec<Option<Result<Vec<Embedding>>>>> =
            Mutex::new((0..batches.len()).map(|_| None).collect());
        let next = AtomicUsize::new(0);
        let workers = self.max_in_flight.min(batches.len());
        std::thread::scope(|s| {
            for _ in 0..workers {
                s.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    if i >= batches.len() {
                        break;
                    }
                    let r = self.fetch(batches[i]);
                    results.lock().expect("results lock")[i] = Some(r);
                });
            }
        });
        let mut cache = self.cache.lock().expect("cache lock");
        for (batch, result) in batches.iter().zip(results.into_inner().expect("results")) {
            let vectors = result.expect("every batch processed")?;
            for (t, v) in batch.iter().zip(vectors) {
                cache.insert(key64(t), v.values.iter().map(|&x| x as f32).collect());
            }
        }
        keys.iter()
            .map(|k| {
                cache
                    .get_f64(*k)
                    .map(Embedding::from)
                    .ok_or_else(|| Error::Transport("embedding missing after fetch".into()))
            })
            .collect()
    }
}

const CACHE_MAGIC: &[u8; 4] = b"TREC";
const CACHE_VERSION: u32 = 1;

/// Binary embedding store: a little-endian header (magic `TREC`, version,
/// dim, count) followed by `count` records of `key: u64` and `dim` f32 values.
/// Records are kept in insertion order.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingCache {
    dim: usize,
    keys: Vec<u64>,
    values: Vec<f32>,
    lookup: HashMap<u64, usize>,
}

impl EmbeddingCache {
    pub fn new(dim: usize) -> Self {
        EmbeddingCache {
            dim,
            keys: Vec::new(),
            values: Vec::new(),
            lookup: HashMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn get(&self, key: u64) -> Option<&[f32]> {
        self.lookup
            .get(&key)
            .map(|&i| &self.values[i * self.dim..(i + 1) * self.dim])
    }

    pub fn get_f64(&self, key: u64) -> Option<Vec<f64>> {
        self.get(key).map(|v| v.iter().map(|&x| f64::from(x)).collect())
    }

    /// Stores `values` under `key`; an existing entry is overwritten in place.
    pub fn insert(&mut self, key: u64, values: Vec<f32>) {
        assert_eq!(values.len(), self.dim, "cache dimension");
        match self.lookup.get(&key) {
            Some(&i) => self.values[i * self.dim..(i + 1) * self.dim].copy_from_slice(&values),
            None => {
                self.lookup.insert(key, self.keys.len());
                self.keys.push(key);
                self.values.extend_from_slice(&values);
            }
        }
    }

    pub fn insert_text(&mut self, text: &str, embedding: &Embedding) {
        self.insert(key64(text), embedding.values.iter().map(|&x| x as f32).collect());
    }

    pub fn get_text(&self, text: &str) -> Option<Embedding> {
        self.get_f64(key64(text)).map(Embedding::from)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(20 + self.keys.len() * (8 + 4 * self.dim));
        out.extend_from_slice(CACHE_MAGIC);
        out.extend_from_slice(&CACHE_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.keys.len() as u64).to_le_bytes());
        for (i, k) in self.keys.iter().enumerate() {
            out.extend_from_slice(&k.to_le_bytes());
            for v in &self.values[i * self.dim..(i + 1) * self.dim] {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_reader<R: Read>(mut r: R) -> std::io::Result<Self> {
        use std::io::{Error as IoError, ErrorKind};
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CACHE_MAGIC {
            return Err(IoError::new(ErrorKind::InvalidData, "bad embedding cache magic"));
        }
        let mut b4 = [0u8; 4];
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b4)?;
        let version = u32::from_le_bytes(b4);
        if version != CACHE_VERSION {
            return Err(IoError::new(
                ErrorKind::InvalidData,
                format!("unsupported embedding cache version {version}"),
            ));
        }
        r.read_exact(&mut b4)?;
        let dim = u32::from_le_bytes(b4) as usize;
        r.read_exact(&mut b8)?;
        let count = u64::from_le_bytes(b8) as usize;
        let mut cache = EmbeddingCache::new(dim);
        let mut buf = vec![0u8; dim * 4];
        for _ in 0..count {
            r.read_exact(&mut b8)?;
            r.read_exact(&mut buf)?;
            let values = buf
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            cache.insert(u64::from_le_bytes(b8), values);
        }
        Ok(cache)
    }

    /// Byte offset of every record, keyed by the hex key.
    pub fn offsets(&self) -> BTreeMap<String, u64> {
        let rec = 8 + 4 * self.dim as u64;
        self.keys
            .iter()
            .enumerate()
            .map(|(i, k)| (format!("{k:016x}"), 20 + i as u64 * rec))
            .collect()
    }

    /// Writes the binary file and its JSON offset index.
    pub fn save(&self, bin_path: &Path, index_path: &Path) -> Result<()> {
        let f = fs::File::create(bin_path).map_err(|e| Error::io(bin_path, e))?;
        let mut w = BufWriter::new(f);
        w.write_all(&self.to_bytes())
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(bin_path, e))?;
        let index = serde_json::json!({
            "dim": self.dim,
            "count": self.len(),
            "offsets": self.offsets(),
        });
        let text = serde_json::to_string_pretty(&index).expect("index serializes");
        fs::write(index_path, text).map_err(|e| Error::io(index_path, e))
    }

    pub fn load(bin_path: &Path) -> Result<Self> {
        let f = fs::File::open(bin_path).map_err(|e| Error::io(bin_path, e))?;
        Self::from_reader(BufReader::new(f)).map_err(|e| Error::io(bin_path, e))
    }
}
