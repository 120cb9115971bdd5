//! Single-file checkpoint format.
//!
//! Layout: 8-byte magic `DPCK0001`, u32 little-endian header length, a JSON
//! header listing metadata and `(name, shape)` entries in payload order, then
//! the concatenated parameter payloads as little-endian f64. Floats are
//! stored and restored by raw bits, so round-trips are bit-exact (including
//! NaN payloads and infinities).

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"DPCK0001";

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    /// Free-form string metadata (seeds, config digests, ...).
    pub meta: BTreeMap<String, String>,
    pub entries: Vec<Entry>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    #[serde(default)]
    meta: BTreeMap<String, String>,
    entries: Vec<HeaderEntry>,
}

#[derive(Serialize, Deserialize)]
struct HeaderEntry {
    name: String,
    shape: Vec<usize>,
}

fn bad(detail: impl Into<String>) -> Error {
    Error::Checkpoint(detail.into())
}

impl Checkpoint {
    pub fn from_named(named: &[(String, Tensor)], meta: BTreeMap<String, String>) -> Checkpoint {
        Checkpoint {
            meta,
            entries: named
                .iter()
                .map(|(name, t)| Entry {
                    name: name.clone(),
                    shape: t.shape(),
                    data: t.data(),
                })
                .collect(),
        }
    }

    pub fn entry(&self, name: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.name == name)
    }

    /// Copy stored values into matching live parameters. Every target must be
    /// present with an identical shape.
    pub fn apply_to(&self, named: &[(String, Tensor)]) -> Result<()> {
        for (name, t) in named {
            let e = self
                .entry(name)
                .ok_or_else(|| bad(format!("missing entry {name:?}")))?;
            if e.shape != t.shape() {
                return Err(bad(format!(
                    "entry {name:?} has shape {:?}, expected {:?}",
                    e.shape,
                    t.shape()
                )));
            }
            t.set_data(e.data.clone())?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            meta: self.meta.clone(),
            entries: self
                .entries
                .iter()
                .map(|e| HeaderEntry {
                    name: e.name.clone(),
                    shape: e.shape.clone(),
                })
                .collect(),
        };
        let header_json = serde_json::to_vec(&header).expect("header serializes");
        let payload_len: usize = self.entries.iter().map(|e| e.data.len() * 8).sum();
        let mut out = Vec::with_capacity(12 + header_json.len() + payload_len);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
        out.extend_from_slice(&header_json);
        for e in &self.entries {
            for v in &e.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Strict decoder: every malformed input yields an error, never a panic.
    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        if bytes.len() < 12 {
            return Err(bad(format!("file too short ({} bytes)", bytes.len())));
        }
        if &bytes[..8] != MAGIC {
            return Err(bad("bad magic; not a checkpoint file"));
        }
        let header_len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        let payload_start = 12usize
            .checked_add(header_len)
            .ok_or_else(|| bad("header length overflows"))?;
        if payload_start > bytes.len() {
            return Err(bad(format!(
                "header claims {header_len} bytes, only {} available",
                bytes.len() - 12
            )));
        }
        let header: Header = serde_json::from_slice(&bytes[12..payload_start])
            .map_err(|e| bad(format!("header parse: {e}")))?;

        let mut total_values = 0usize;
        for (i, e) in header.entries.iter().enumerate() {
            if e.name.is_empty() {
                return Err(bad(format!("entry {i} has an empty name")));
            }
            if header.entries[..i].iter().any(|p| p.name == e.name) {
                return Err(bad(format!("duplicate entry name {:?}", e.name)));
            }
            let mut numel = 1usize;
            for &d in &e.shape {
                if d == 0 {
                    return Err(bad(format!("entry {:?} has a zero dim", e.name)));
                }
                numel = numel
                    .checked_mul(d)
                    .ok_or_else(|| bad(format!("entry {:?} shape overflows", e.name)))?;
            }
            total_values = total_values
                .checked_add(numel)
                .ok_or_else(|| bad("total payload size overflows"))?;
        }
        let expected = total_values
            .checked_mul(8)
            .ok_or_else(|| bad("total payload size overflows"))?;
        let payload = &bytes[payload_start..];
        if payload.len() != expected {
            return Err(bad(format!(
                "payload is {} bytes, header implies {expected}",
                payload.len()
            )));
        }

        let mut entries = Vec::with_capacity(header.entries.len());
        let mut off = 0;
        for he in header.entries {
            let numel: usize = he.shape.iter().product();
            let mut data = Vec::with_capacity(numel);
            for _ in 0..numel {
                data.push(f64::from_le_bytes(
                    payload[off..off + 8].try_into().expect("8 bytes"),
                ));
                off += 8;
            }
            entries.push(Entry {
                name: he.name,
                shape: he.shape,
                data,
            });
        }
        Ok(Checkpoint {
            meta: header.meta,
            entries,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(&path, self.to_bytes()).map_err(|e| Error::io(&path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint> {
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        Self::from_bytes(&bytes)
    }
}
