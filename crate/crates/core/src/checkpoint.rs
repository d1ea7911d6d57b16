//! Binary checkpoint container.
//!
//! Layout: the 8-byte magic `ICICLCK1`, a little-endian `u64` manifest
//! length, the UTF-8 JSON manifest, then every tensor as raw little-endian
//! `f64` values. Manifest offsets are in bytes from the start of the data
//! section.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"ICICLCK1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
    #[serde(default)]
    pub meta: serde_json::Value,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<(String, Tensor)>,
    pub meta: serde_json::Value,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Tensors whose names start with `prefix`, with the prefix stripped.
    pub fn with_prefix(&self, prefix: &str) -> Vec<(String, Tensor)> {
        self.tensors
            .iter()
            .filter_map(|(n, t)| n.strip_prefix(prefix).map(|s| (s.to_string(), t.clone())))
            .collect()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0u64;
        let entries = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let e = ManifestEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                    offset,
                };
                offset += 8 * t.len() as u64;
                e
            })
            .collect();
        let manifest = Manifest {
            entries,
            meta: self.meta.clone(),
        };
        let text = serde_json::to_vec(&manifest).map_err(|e| Error::Format(e.to_string()))?;
        let mut out = Vec::with_capacity(16 + text.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(text.len() as u64).to_le_bytes());
        out.extend_from_slice(&text);
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let data_start = 16usize
            .checked_add(len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| Error::Format("truncated manifest".into()))?;
        let manifest: Manifest =
            serde_json::from_slice(&bytes[16..data_start]).map_err(|e| Error::Format(format!("manifest: {e}")))?;
        let data = &bytes[data_start..];
        let mut tensors = Vec::with_capacity(manifest.entries.len());
        for e in manifest.entries {
            let n: usize = e.shape.iter().product();
            let start = e.offset as usize;
            let end = start + 8 * n;
            if end > data.len() {
                return Err(Error::Format(format!("tensor {} runs past end of file", e.name)));
            }
            let values = data[start..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push((e.name, Tensor::new(e.shape, values)?));
        }
        Ok(Self {
            tensors,
            meta: manifest.meta,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let bytes = self.to_bytes()?;
        let path = path.as_ref();
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        let mut f = fs::File::create(path)?;
        f.write_all(&bytes)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}
