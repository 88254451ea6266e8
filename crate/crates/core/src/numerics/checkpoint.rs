//! Single-file store of named f32 tensors.
//!
//! Layout:
//!
//! ```text
//! 8 bytes   magic "ADNETCKP"
//! 4 bytes   format version, u32 little-endian (currently 1)
//! 8 bytes   manifest length M, u64 little-endian
//! M bytes   UTF-8 JSON manifest:
//!           {"tensors":[{"name":..,"shape":[..],"offset":..,"count":..}, ..],
//!            "meta":{..}}
//!           offset and count are in f32 elements from the payload start
//! rest      payload, f32 little-endian, tensors back to back in manifest order
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

use super::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"ADNETCKP";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    count: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    tensors: Vec<Entry>,
    meta: BTreeMap<String, Value>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub tensors: Vec<(String, Tensor<f32>)>,
    pub meta: BTreeMap<String, Value>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut offset = 0;
        let tensors = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let e = Entry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                    offset,
                    count: t.len(),
                };
                offset += t.len();
                e
            })
            .collect();
        let manifest = serde_json::to_vec(&Manifest {
            tensors,
            meta: self.meta.clone(),
        })
        .expect("manifest serializes");
        let mut out = Vec::with_capacity(20 + manifest.len() + offset * 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        for (_, t) in &self.tensors {
            out.extend(t.data().iter().flat_map(|v| v.to_le_bytes()));
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |why: &str| Error::format(path, why.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(bad(&format!("unsupported checkpoint version {version}")));
        }
        let mlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = bytes.get(20..20 + mlen).ok_or_else(|| bad("truncated manifest"))?;
        let manifest: Manifest = serde_json::from_slice(body).map_err(|e| bad(&e.to_string()))?;
        let payload = &bytes[20 + mlen..];
        let mut tensors = Vec::with_capacity(manifest.tensors.len());
        for e in manifest.tensors {
            let raw = payload
                .get(e.offset * 4..(e.offset + e.count) * 4)
                .ok_or_else(|| bad(&format!("payload too short for tensor {}", e.name)))?;
            let data = raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            let t = Tensor::new(&e.shape, data).map_err(|err| bad(&err.to_string()))?;
            if !t.is_finite() {
                return Err(bad(&format!("tensor {} holds non-finite values", e.name)));
            }
            tensors.push((e.name, t));
        }
        Ok(Checkpoint {
            tensors,
            meta: manifest.meta,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes, path)
    }
}
