//! Single-file tensor container.
//!
//! Layout: `DUETCKPT`, u32 version, u64 manifest length, the JSON manifest,
//! then every entry's values as little-endian f32 in manifest order.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::Tensor;

pub const MAGIC: &[u8; 8] = b"DUETCKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, Default)]
pub struct Container {
    pub meta: BTreeMap<String, serde_json::Value>,
    pub entries: Vec<(String, Tensor)>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    version: u32,
    meta: BTreeMap<String, serde_json::Value>,
    entries: Vec<EntryInfo>,
}

#[derive(Serialize, Deserialize)]
struct EntryInfo {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

impl Container {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.entries.push((name.into(), t));
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0;
        let mut infos = Vec::with_capacity(self.entries.len());
        for (name, t) in &self.entries {
            infos.push(EntryInfo {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset,
                len: t.len(),
            });
            offset += t.len();
        }
        let manifest = serde_json::to_vec(&Manifest {
            version: VERSION,
            meta: self.meta.clone(),
            entries: infos,
        })?;
        let mut out = Vec::with_capacity(20 + manifest.len() + 4 * offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        for (_, t) in &self.entries {
            for v in t.data() {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(Error::Format("missing container magic".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::Version {
                found: version,
                expected: VERSION,
            });
        }
        let mlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = &bytes[20..];
        if body.len() < mlen {
            return Err(Error::Format("manifest truncated".into()));
        }
        let manifest: Manifest = serde_json::from_slice(&body[..mlen])
            .map_err(|e| Error::Format(format!("manifest: {e}")))?;
        if manifest.version != version {
            return Err(Error::Format("manifest and header versions differ".into()));
        }
        let data = &body[mlen..];
        let total: usize = manifest.entries.iter().map(|e| e.len).sum();
        if data.len() != 4 * total {
            return Err(Error::Format(format!(
                "expected {} data bytes, found {}",
                4 * total,
                data.len()
            )));
        }
        let mut entries = Vec::with_capacity(manifest.entries.len());
        for e in manifest.entries {
            if e.offset + e.len > total {
                return Err(Error::Format(format!("entry {} out of bounds", e.name)));
            }
            let vals = data[4 * e.offset..4 * (e.offset + e.len)]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect();
            let t = Tensor::new(e.shape.clone(), vals)
                .map_err(|err| Error::Format(format!("entry {}: {err}", e.name)))?;
            entries.push((e.name, t));
        }
        Ok(Self {
            meta: manifest.meta,
            entries,
        })
    }
}

pub fn write(path: &Path, c: &Container) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    fs::write(path, c.to_bytes()?)?;
    Ok(())
}

pub fn read(path: &Path) -> Result<Container> {
    Container::from_bytes(&fs::read(path)?)
}
