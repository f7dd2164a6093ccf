//! Flat exact inner-product index persisted as a `.vec` sidecar.
//!
//! Layout (little-endian): magic `SDVX`, dim `u32`, count `u64`, then `count`
//! entries of (id `u64`, dim × `f32`) in ascending id order.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::backends::{dot, EmbeddingVector};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"SDVX";
const HEADER_LEN: usize = 4 + 4 + 8;

#[derive(Debug, Clone, PartialEq)]
pub struct FlatIndex {
    dim: usize,
    vectors: BTreeMap<i64, Vec<f32>>,
}

impl FlatIndex {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            vectors: BTreeMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = i64> + '_ {
        self.vectors.keys().copied()
    }

    pub fn get(&self, id: i64) -> Option<&[f32]> {
        self.vectors.get(&id).map(Vec::as_slice)
    }

    fn check_dim(&self, v: &EmbeddingVector) -> Result<()> {
        if v.dim() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                actual: v.dim(),
            });
        }
        Ok(())
    }

    /// Inserts or replaces the vector for `id`.
    pub fn upsert(&mut self, id: i64, v: &EmbeddingVector) -> Result<()> {
        self.check_dim(v)?;
        self.vectors.insert(id, v.values().to_vec());
        Ok(())
    }

    /// Exhaustive search: the `k` largest inner products, ties by ascending id.
    pub fn search(&self, q: &EmbeddingVector, k: usize) -> Result<Vec<(i64, f64)>> {
        self.check_dim(q)?;
        // BTreeMap iteration is id-ascending and the sort is stable, so equal
        // scores stay in id order.
        let mut scored: Vec<(i64, f64)> = self
            .vectors
            .iter()
            .map(|(&id, v)| (id, dot(q.values(), v)))
            .collect();
        scored.sort_by(|a, b| b.1.total_cmp(&a.1));
        scored.truncate(k);
        Ok(scored)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.len() * (8 + 4 * self.dim));
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        for (&id, v) in &self.vectors {
            out.extend_from_slice(&(id as u64).to_le_bytes());
            for x in v {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |m: &str| Error::CorruptStore(format!("vector sidecar: {m}"));
        if bytes.len() < HEADER_LEN || &bytes[..4] != MAGIC {
            return Err(corrupt("bad header"));
        }
        let dim = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let count = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
        let entry = 8 + 4 * dim;
        let expected = (count as usize)
            .checked_mul(entry)
            .and_then(|n| n.checked_add(HEADER_LEN))
            .ok_or_else(|| corrupt("count overflows"))?;
        if dim == 0 || bytes.len() != expected {
            return Err(corrupt("length does not match header"));
        }
        let mut vectors = BTreeMap::new();
        for chunk in bytes[HEADER_LEN..].chunks_exact(entry) {
            let id = u64::from_le_bytes(chunk[..8].try_into().unwrap()) as i64;
            let v = chunk[8..]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            if vectors.insert(id, v).is_some() {
                return Err(corrupt("duplicate id"));
            }
        }
        Ok(Self { dim, vectors })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Writes to a temporary file and renames it over `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut tmp = PathBuf::from(path);
        tmp.set_extension("vec.tmp");
        {
            let mut f = std::fs::File::create(&tmp)?;
            f.write_all(&self.to_bytes())?;
            f.sync_all()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }
}
