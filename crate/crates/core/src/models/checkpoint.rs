//! Binary checkpoint format.
//!
//! ```text
//! magic      8 bytes   "CLCKPT01"
//! meta_len   u32 LE
//! meta       JSON      { "config": ModelConfig, "provenance": Provenance }
//! count      u32 LE
//! count x record:
//!   name_len u32 LE, name (UTF-8)
//!   ndim     u32 LE, ndim x u64 LE dims
//!   data     f64 LE, product(dims) values
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::network::{init_model, Head, Model};
use crate::autodiff::{ParamSet, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 8] = b"CLCKPT01";
const MAGIC_PREFIX: &[u8; 6] = b"CLCKPT";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub method: String,
    pub task: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<S> {
    pub model: Model<S>,
    pub provenance: Provenance,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    config: ModelConfig,
    provenance: Provenance,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::CorruptCheckpoint(format!("truncated at byte {}", self.pos)))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

impl<S: Scalar> Checkpoint<S> {
    pub fn new(model: Model<S>, provenance: Provenance) -> Self {
        Self { model, provenance }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = MAGIC.to_vec();
        let meta = serde_json::to_vec(&Meta {
            config: self.model.config.clone(),
            provenance: self.provenance.clone(),
        })?;
        out.extend((meta.len() as u32).to_le_bytes());
        out.extend(meta);
        let mut records: Vec<(String, Tensor<S>)> = Vec::new();
        self.model
            .visit_params(&mut |name, t| records.push((name.to_string(), t.clone())));
        out.extend((records.len() as u32).to_le_bytes());
        for (name, t) in records {
            out.extend((name.len() as u32).to_le_bytes());
            out.extend(name.as_bytes());
            out.extend((t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend((d as u64).to_le_bytes());
            }
            for &v in t.data() {
                out.extend(v.as_f64().to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC_PREFIX.len()] != MAGIC_PREFIX {
            return Err(Error::CorruptCheckpoint("missing CLCKPT magic".into()));
        }
        if &bytes[..MAGIC.len()] != MAGIC {
            return Err(Error::VersionMismatch {
                expected: String::from_utf8_lossy(MAGIC).into(),
                found: String::from_utf8_lossy(&bytes[..MAGIC.len()]).into(),
            });
        }
        let mut r = Reader {
            buf: bytes,
            pos: MAGIC.len(),
        };
        let meta_len = r.u32()? as usize;
        let meta: Meta = serde_json::from_slice(r.take(meta_len)?)
            .map_err(|e| Error::CorruptCheckpoint(format!("metadata: {e}")))?;
        meta.config
            .validate()
            .map_err(|e| Error::CorruptCheckpoint(e.to_string()))?;

        let count = r.u32()? as usize;
        let mut records = BTreeMap::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::CorruptCheckpoint("non UTF-8 record name".into()))?
                .to_string();
            let ndim = r.u32()? as usize;
            let mut shape = Vec::with_capacity(ndim.min(8));
            for _ in 0..ndim {
                shape.push(r.u64()? as usize);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::CorruptCheckpoint(format!("{name}: shape overflow")))?;
            let raw = r.take(numel.checked_mul(8).ok_or_else(|| {
                Error::CorruptCheckpoint(format!("{name}: shape overflow"))
            })?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| S::of(f64::from_le_bytes(c.try_into().expect("8 bytes"))))
                .collect();
            let t = Tensor::new(shape, data)
                .map_err(|e| Error::CorruptCheckpoint(format!("{name}: {e}")))?;
            if records.insert(name.clone(), t).is_some() {
                return Err(Error::CorruptCheckpoint(format!("duplicate record {name}")));
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::CorruptCheckpoint("trailing bytes".into()));
        }

        let mut model: Model<S> = init_model(&meta.config)?;
        for name in records.keys() {
            if let Some(task) = name
                .strip_prefix("head")
                .and_then(|rest| rest.split('.').next())
                .and_then(|id| id.parse::<usize>().ok())
            {
                model
                    .heads
                    .entry(task)
                    .or_insert_with(|| Head::seeded(&meta.config, task));
            }
        }
        let mut missing = Vec::new();
        model.visit_params_mut(&mut |name, t| match records.remove(name) {
            Some(stored) if stored.shape() == t.shape() => *t = stored,
            _ => missing.push(name.to_string()),
        });
        if !missing.is_empty() {
            return Err(Error::CorruptCheckpoint(format!(
                "missing or misshapen records: {}",
                missing.join(", ")
            )));
        }
        if let Some(extra) = records.keys().next() {
            return Err(Error::CorruptCheckpoint(format!("unexpected record {extra}")));
        }
        Ok(Self {
            model,
            provenance: meta.provenance,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
