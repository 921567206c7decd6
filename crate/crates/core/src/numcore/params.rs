//! Named parameter storage, digests, and the binary checkpoint container.
//!
//! Checkpoint layout (all integers little-endian):
//!
//! ```text
//! "FAECKPT1"            8-byte magic
//! header_len: u64       length of the JSON header in bytes
//! header: JSON          {"config_hash", "step", "params": [{"name", "shape", "offset", "len"}]}
//! data                  concatenated raw f64 values, little-endian
//! ```
//!
//! `offset` and `len` count f64 values from the start of the data section.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::tensor::Tensor;
use crate::error::{FaeError, Result};

const MAGIC: &[u8; 8] = b"FAECKPT1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    by_name: HashMap<String, usize>,
    version: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(FaeError::Validation(format!("duplicate parameter {name}")));
        }
        let id = self.tensors.len();
        self.by_name.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(tensor);
        self.version += 1;
        Ok(ParamId(id))
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.by_name
            .get(name)
            .map(|&i| ParamId(i))
            .ok_or_else(|| FaeError::NotFound(format!("parameter {name}")))
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn by_name(&self, name: &str) -> Result<&Tensor> {
        Ok(self.get(self.id(name)?))
    }

    /// Mutable access; bumps the version so derived caches notice.
    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        self.version += 1;
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    /// Monotone counter bumped on every mutation.
    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    /// SHA-256 over names, shapes, and raw values of every parameter.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (_, name, t) in self.iter() {
            hash_param(&mut h, name, t);
        }
        hex::encode(h.finalize())
    }

    /// SHA-256 over a subset of parameters, in the given order.
    pub fn digest_of(&self, names: &[&str]) -> Result<String> {
        let mut h = Sha256::new();
        for name in names {
            hash_param(&mut h, name, self.by_name(name)?);
        }
        Ok(hex::encode(h.finalize()))
    }

    pub fn save(&self, path: &Path, config_hash: &str, step: usize) -> Result<()> {
        let mut entries = Vec::with_capacity(self.len());
        let mut offset = 0;
        for (_, name, t) in self.iter() {
            entries.push(CheckpointEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                offset,
                len: t.len(),
            });
            offset += t.len();
        }
        let header = CheckpointHeader {
            config_hash: config_hash.to_string(),
            step,
            params: entries,
        };
        let header_bytes = serde_json::to_vec(&header)?;
        let mut buf = Vec::with_capacity(16 + header_bytes.len() + offset * 8);
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
        buf.extend_from_slice(&header_bytes);
        for t in &self.tensors {
            buf.extend_from_slice(&t.to_le_bytes());
        }
        let mut f = fs::File::create(path).map_err(|e| FaeError::io(path, e))?;
        f.write_all(&buf).map_err(|e| FaeError::io(path, e))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<(ParamStore, CheckpointHeader)> {
        let bytes = fs::read(path).map_err(|e| FaeError::io(path, e))?;
        let bad = |msg: &str| FaeError::Parse {
            location: path.display().to_string(),
            msg: msg.to_string(),
        };
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint (bad magic)"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let data_start = 16 + hlen;
        if bytes.len() < data_start {
            return Err(bad("truncated header"));
        }
        let header: CheckpointHeader = serde_json::from_slice(&bytes[16..data_start])?;
        let data = &bytes[data_start..];
        let mut store = ParamStore::new();
        for e in &header.params {
            let start = e.offset * 8;
            let end = start + e.len * 8;
            if end > data.len() {
                return Err(bad(&format!("truncated data for {}", e.name)));
            }
            let values = data[start..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            store.insert(e.name.clone(), Tensor::new(e.shape.clone(), values)?)?;
        }
        Ok((store, header))
    }
}

fn hash_param(h: &mut Sha256, name: &str, t: &Tensor) {
    h.update((name.len() as u64).to_le_bytes());
    h.update(name.as_bytes());
    h.update((t.shape().len() as u64).to_le_bytes());
    for d in t.shape() {
        h.update((*d as u64).to_le_bytes());
    }
    h.update(t.to_le_bytes());
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config_hash: String,
    pub step: usize,
    pub params: Vec<CheckpointEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_roundtrip_preserves_digest() {
        let mut store = ParamStore::new();
        store
            .insert(
                "a",
                Tensor::matrix(2, 2, vec![1.0, -2.5, 3.25, 1e-300]).unwrap(),
            )
            .unwrap();
        store.insert("b", Tensor::scalar(f64::MAX)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        store.save(&path, "abc", 17).unwrap();
        let (loaded, header) = ParamStore::load(&path).unwrap();
        assert_eq!(header.step, 17);
        assert_eq!(header.config_hash, "abc");
        assert_eq!(loaded.digest(), store.digest());
        assert_eq!(loaded.by_name("a").unwrap(), store.by_name("a").unwrap());
    }

    #[test]
    fn rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad");
        fs::write(&path, b"hello world, not a checkpoint").unwrap();
        assert!(matches!(
            ParamStore::load(&path),
            Err(FaeError::Parse { .. })
        ));
    }

    #[test]
    fn digest_tracks_values() {
        let mut store = ParamStore::new();
        let id = store.insert("w", Tensor::zeros(&[3])).unwrap();
        let d0 = store.digest();
        let v0 = store.version();
        store.get_mut(id).data_mut()[1] = 1e-12;
        assert_ne!(store.digest(), d0);
        assert!(store.version() > v0);
    }
}
