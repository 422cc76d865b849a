//! Binary model checkpoints.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! "TMLP" | version u32 | d u32 | h u32 | tensor count u32
//! per tensor:  length u64 | f64 × length
//! Adam:        t u64 | lr, beta1, beta2, epsilon f64 | slot count u32
//! per slot:    length u64 | m f64 × length | v f64 × length
//! ```

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::adam::Adam;

pub const MAGIC: &[u8; 4] = b"TMLP";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub dim: u32,
    pub hidden: u32,
    pub tensors: Vec<Vec<f64>>,
    pub adam: Adam,
}

fn put_f64s(out: &mut Vec<u8>, values: &[f64]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn read_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> std::io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64(r: &mut impl Read) -> std::io::Result<f64> {
    Ok(f64::from_bits(read_u64(r)?))
}

fn read_f64s(r: &mut impl Read, n: u64) -> std::io::Result<Vec<f64>> {
    (0..n).map(|_| read_f64(r)).collect()
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.dim.to_le_bytes());
        out.extend_from_slice(&self.hidden.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            out.extend_from_slice(&(t.len() as u64).to_le_bytes());
            put_f64s(&mut out, t);
        }
        let a = &self.adam;
        out.extend_from_slice(&a.t.to_le_bytes());
        put_f64s(&mut out, &[a.learning_rate, a.beta1, a.beta2, a.epsilon]);
        out.extend_from_slice(&(a.m.len() as u32).to_le_bytes());
        for (m, v) in a.m.iter().zip(&a.v) {
            out.extend_from_slice(&(m.len() as u64).to_le_bytes());
            put_f64s(&mut out, m);
            put_f64s(&mut out, v);
        }
        out
    }

    pub fn from_reader<R: Read>(mut r: R) -> std::io::Result<Self> {
        let bad = |msg: &str| std::io::Error::new(std::io::ErrorKind::InvalidData, msg.to_owned());
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(bad("not a TMLP checkpoint"));
        }
        if read_u32(&mut r)? != VERSION {
            return Err(bad("unsupported checkpoint version"));
        }
        let dim = read_u32(&mut r)?;
        let hidden = read_u32(&mut r)?;
        let n_tensors = read_u32(&mut r)?;
        let mut tensors = Vec::with_capacity(n_tensors as usize);
        for _ in 0..n_tensors {
            let n = read_u64(&mut r)?;
            tensors.push(read_f64s(&mut r, n)?);
        }
        let t = read_u64(&mut r)?;
        let [learning_rate, beta1, beta2, epsilon] = [
            read_f64(&mut r)?,
            read_f64(&mut r)?,
            read_f64(&mut r)?,
            read_f64(&mut r)?,
        ];
        let n_slots = read_u32(&mut r)?;
        let (mut m, mut v) = (Vec::new(), Vec::new());
        for _ in 0..n_slots {
            let n = read_u64(&mut r)?;
            m.push(read_f64s(&mut r, n)?);
            v.push(read_f64s(&mut r, n)?);
        }
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(bad("trailing bytes after checkpoint"));
        }
        Ok(Checkpoint {
            dim,
            hidden,
            tensors,
            adam: Adam {
                learning_rate,
                beta1,
                beta2,
                epsilon,
                t,
                m,
                v,
            },
        })
    }

    /// Writes the binary checkpoint and its JSON sidecar.
    pub fn save(&self, path: &Path, sidecar: &serde_json::Value) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))?;
        let side = sidecar_path(path);
        let body = serde_json::to_string_pretty(sidecar).expect("json value serializes");
        std::fs::write(&side, body + "\n").map_err(|e| Error::io(&side, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_reader(std::io::BufReader::new(f)).map_err(|e| Error::io(path, e))
    }
}

/// `model.tmlp` → `model.json`.
pub fn sidecar_path(path: &Path) -> std::path::PathBuf {
    path.with_extension("json")
}
