//! Single-file tensor archive used for checkpoints and external weights.
//!
//! Layout: 8-byte magic, `u64` manifest length, `u32` CRC32 of the manifest,
//! the JSON manifest, then the raw little-endian `f32` blobs in entry order.
//! Every entry carries its own CRC32. Serialization is a pure function of the
//! content, so equal archives are byte-identical.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"GEOFACE\x01";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Entry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub byte_offset: u64,
    pub byte_length: u64,
    pub crc32: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    #[serde(flatten)]
    metadata: Map<String, Value>,
    entries: Vec<Entry>,
}

/// Named `f32` tensors plus free-form JSON metadata.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Archive {
    pub metadata: Map<String, Value>,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Archive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor<f32>) {
        self.tensors.push((name.into(), t));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Tensor `name` with the given shape, or a checkpoint error.
    pub fn expect(&self, name: &str, shape: &[usize]) -> Result<&Tensor<f32>> {
        let t = self
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
        if t.shape() != shape {
            return Err(Error::Checkpoint(format!(
                "tensor {name} has shape {:?}, expected {shape:?}",
                t.shape()
            )));
        }
        Ok(t)
    }

    pub fn entries(&self) -> Vec<Entry> {
        let mut offset = 0u64;
        self.tensors
            .iter()
            .map(|(name, t)| {
                let bytes = blob(t);
                let e = Entry {
                    name: name.clone(),
                    dtype: "f32".into(),
                    shape: t.shape().to_vec(),
                    byte_offset: offset,
                    byte_length: bytes.len() as u64,
                    crc32: crc32fast::hash(&bytes),
                };
                offset += bytes.len() as u64;
                e
            })
            .collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            metadata: self.metadata.clone(),
            entries: self.entries(),
        };
        let json = serde_json::to_vec(&manifest).expect("manifest serializes");
        let mut out = Vec::with_capacity(20 + json.len() + self.tensors.iter().map(|(_, t)| t.len() * 4).sum::<usize>());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&crc32fast::hash(&json).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &self.tensors {
            out.extend(blob(t));
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a geoface archive (bad magic)"));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let crc = u32::from_le_bytes(bytes[16..20].try_into().expect("4 bytes"));
        let json = bytes
            .get(20..20 + len)
            .ok_or_else(|| bad("truncated archive manifest"))?;
        if crc32fast::hash(json) != crc {
            return Err(bad("manifest checksum mismatch"));
        }
        let manifest: Manifest =
            serde_json::from_slice(json).map_err(|e| Error::Checkpoint(format!("invalid manifest: {e}")))?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {} (expected {FORMAT_VERSION})",
                manifest.format_version
            )));
        }
        let data = &bytes[20 + len..];
        let mut tensors = Vec::with_capacity(manifest.entries.len());
        for e in &manifest.entries {
            if e.dtype != "f32" {
                return Err(Error::Checkpoint(format!("{}: unsupported dtype {}", e.name, e.dtype)));
            }
            let (start, n) = (e.byte_offset as usize, e.byte_length as usize);
            let raw = data
                .get(start..start + n)
                .ok_or_else(|| Error::Checkpoint(format!("{}: truncated data", e.name)))?;
            if crc32fast::hash(raw) != e.crc32 {
                return Err(Error::Checkpoint(format!("{}: checksum mismatch", e.name)));
            }
            if n != crate::tensor::numel(&e.shape) * 4 {
                return Err(Error::Checkpoint(format!("{}: length does not match shape", e.name)));
            }
            let values = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            tensors.push((e.name.clone(), Tensor::new(e.shape.clone(), values)));
        }
        Ok(Self {
            metadata: manifest.metadata,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn blob(t: &Tensor<f32>) -> Vec<u8> {
    t.data().iter().flat_map(|v| v.to_le_bytes()).collect()
}
