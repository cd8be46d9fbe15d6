//! Binary checkpoints: an 8-byte magic, a little-endian `u32` header
//! length, a TOML header, then named `f32` arrays
//! `[u32 name length][name][u32 rank][u32 dims…][f32 data]`, all
//! little-endian.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Scalar, Tensor};
use crate::error::CheckpointError;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MFLOWCK1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub step: u64,
    pub seed: u64,
    /// Effective run configuration, as TOML.
    pub config: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub arrays: Vec<NamedArray>,
}

impl Checkpoint {
    pub fn new(step: u64, seed: u64, config: String) -> Self {
        Self {
            header: CheckpointHeader {
                format_version: FORMAT_VERSION,
                step,
                seed,
                config,
            },
            arrays: Vec::new(),
        }
    }

    pub fn push<F: Scalar>(&mut self, name: impl Into<String>, t: &Tensor<F>) {
        self.arrays.push(NamedArray {
            name: name.into(),
            shape: t.shape().to_vec(),
            data: t.data().iter().map(|v| v.as_f64() as f32).collect(),
        });
    }

    /// Appends every parameter as `prefix.name`.
    pub fn push_store<F: Scalar>(&mut self, prefix: &str, store: &ParamStore<F>) {
        for (name, t) in store.iter() {
            self.push(format!("{prefix}.{name}"), t);
        }
    }

    pub fn get(&self, name: &str) -> Option<&NamedArray> {
        self.arrays.iter().find(|a| a.name == name)
    }

    /// The array `name` as a tensor of the expected shape.
    pub fn tensor<F: Scalar>(&self, name: &str, shape: &[usize]) -> Result<Tensor<F>, CheckpointError> {
        let a = self
            .get(name)
            .ok_or_else(|| CheckpointError::MissingArray(name.to_string()))?;
        if a.shape != shape {
            return Err(CheckpointError::ShapeMismatch {
                name: name.to_string(),
                expected: shape.to_vec(),
                found: a.shape.clone(),
            });
        }
        let data = a.data.iter().map(|&v| F::of(v as f64)).collect();
        Tensor::new(a.shape.clone(), data).map_err(|e| CheckpointError::Corrupt(e.to_string()))
    }

    /// Rebuilds a store shaped like `like` from `prefix.*` arrays.
    pub fn store<F: Scalar>(&self, prefix: &str, like: &ParamStore<F>) -> Result<ParamStore<F>, CheckpointError> {
        let mut out = ParamStore::new();
        for (name, t) in like.iter() {
            let v = self.tensor(&format!("{prefix}.{name}"), t.shape())?;
            out.add(name, v).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
        }
        Ok(out)
    }

    /// Fails on the first array whose name is not in `expected`.
    pub fn check_no_extra<'a>(&self, expected: impl IntoIterator<Item = &'a str>) -> Result<(), CheckpointError> {
        let known: std::collections::HashSet<&str> = expected.into_iter().collect();
        match self.arrays.iter().find(|a| !known.contains(a.name.as_str())) {
            Some(a) => Err(CheckpointError::ExtraArray(a.name.clone())),
            None => Ok(()),
        }
    }

    pub fn encode(&self) -> Result<Vec<u8>, CheckpointError> {
        let header = toml::to_string(&self.header).map_err(|e| CheckpointError::Header(e.to_string()))?;
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        for a in &self.arrays {
            out.extend_from_slice(&(a.name.len() as u32).to_le_bytes());
            out.extend_from_slice(a.name.as_bytes());
            out.extend_from_slice(&(a.shape.len() as u32).to_le_bytes());
            for &d in &a.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in &a.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < 8 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let mut r = Reader { bytes, pos: 8 };
        let hlen = r.u32("header length")? as usize;
        let htext = std::str::from_utf8(r.take(hlen, "header")?).map_err(|e| CheckpointError::Header(e.to_string()))?;
        let version = toml::from_str::<toml::Table>(htext)
            .ok()
            .and_then(|t| t.get("format_version").and_then(|v| v.as_integer()));
        if let Some(v) = version {
            if v != FORMAT_VERSION as i64 {
                return Err(CheckpointError::VersionMismatch {
                    found: v as u32,
                    expected: FORMAT_VERSION,
                });
            }
        }
        let header: CheckpointHeader = toml::from_str(htext).map_err(|e| CheckpointError::Header(e.to_string()))?;
        let mut arrays = Vec::new();
        while r.pos < bytes.len() {
            let nlen = r.u32("name length")? as usize;
            let name = String::from_utf8(r.take(nlen, "array name")?.to_vec())
                .map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
            let rank = r.u32("rank")? as usize;
            let mut shape = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                shape.push(r.u32("dimension")? as usize);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .and_then(|n| n.checked_mul(4))
                .ok_or_else(|| CheckpointError::Corrupt(format!("array `{name}` is too large")))?;
            let raw = r.take(n, &name)?;
            let data = raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            arrays.push(NamedArray { name, shape, data });
        }
        Ok(Self { header, arrays })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], CheckpointError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| {
                CheckpointError::Corrupt(format!(
                    "payload ends inside {what} (need {n} bytes at offset {}, file has {})",
                    self.pos,
                    self.bytes.len()
                ))
            })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32, CheckpointError> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<(), CheckpointError> {
    let bytes = ck.encode()?;
    std::fs::write(path, bytes).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Checkpoint::decode(&bytes)
}
