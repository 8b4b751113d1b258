//! Binary checkpoint container.
//!
//! Layout: the magic `UNHY`, a version byte `0x01`, a little-endian `u64`
//! header length, a UTF-8 JSON header, then raw little-endian `f32` tensor
//! data laid out contiguously in header order. Offsets in the header are
//! relative to the start of the data section.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"UNHY";
pub const VERSION: u8 = 1;
const PREFIX_LEN: usize = 4 + 1 + 8;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub byte_offset: u64,
    pub byte_length: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Meta {
    pub fingerprint: String,
    pub seed: u64,
    pub created_at: String,
    /// `base` or `hypernet`.
    pub kind: String,
    /// Fingerprint of the base model a hypernetwork was trained against.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_fingerprint: Option<String>,
    /// Full run config, so downstream commands can rebuild every component.
    pub config: Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    tensors: Vec<TensorEntry>,
    meta: Meta,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: Meta,
    pub tensors: Vec<(String, Tensor)>,
}

fn bad(detail: impl Into<String>) -> Error {
    Error::Format {
        what: "checkpoint",
        detail: detail.into(),
    }
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Compat(format!("checkpoint has no tensor `{name}`")))
    }

    /// Tensors whose names start with `prefix`, in stored order.
    pub fn with_prefix(&self, prefix: &str) -> Vec<Tensor> {
        self.tensors
            .iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, t)| t.clone())
            .collect()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut offset = 0u64;
        for (name, t) in &self.tensors {
            let len = 4 * t.numel() as u64;
            entries.push(TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                dtype: "f32".into(),
                byte_offset: offset,
                byte_length: len,
            });
            offset += len;
        }
        let header = serde_json::to_vec(&Header {
            tensors: entries,
            meta: self.meta.clone(),
        })
        .expect("header serializes");
        let mut out = Vec::with_capacity(PREFIX_LEN + header.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, t) in &self.tensors {
            for &x in t.data() {
                out.extend_from_slice(&(x as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < PREFIX_LEN {
            return Err(bad(format!(
                "file is {} bytes, shorter than the fixed prefix",
                bytes.len()
            )));
        }
        if &bytes[..4] != MAGIC {
            return Err(bad("bad magic bytes"));
        }
        if bytes[4] != VERSION {
            return Err(Error::Compat(format!(
                "checkpoint version {} is not supported (expected {VERSION})",
                bytes[4]
            )));
        }
        let header_len = u64::from_le_bytes(bytes[5..13].try_into().expect("8 bytes"));
        let rest = (bytes.len() - PREFIX_LEN) as u64;
        if header_len > rest {
            return Err(bad(format!("header length {header_len} exceeds file size")));
        }
        let header_end = PREFIX_LEN + header_len as usize;
        let header: Header =
            serde_json::from_slice(&bytes[PREFIX_LEN..header_end]).map_err(|e| bad(format!("header: {e}")))?;
        let data = &bytes[header_end..];

        let mut expected_offset = 0u64;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for (i, e) in header.tensors.iter().enumerate() {
            if header.tensors[..i].iter().any(|p| p.name == e.name) {
                return Err(bad(format!("duplicate tensor name `{}`", e.name)));
            }
            if e.dtype != "f32" {
                return Err(bad(format!(
                    "tensor `{}` has dtype `{}`, only f32 is supported",
                    e.name, e.dtype
                )));
            }
            if e.shape.is_empty() {
                return Err(bad(format!("tensor `{}` has an empty shape", e.name)));
            }
            let numel = e
                .shape
                .iter()
                .try_fold(1u64, |acc, &d| acc.checked_mul(d as u64))
                .and_then(|n| n.checked_mul(4).map(|b| (n, b)));
            let (numel, want_len) = numel.ok_or_else(|| bad(format!("tensor `{}` shape overflows", e.name)))?;
            if e.byte_length != want_len {
                return Err(bad(format!(
                    "tensor `{}` declares {} bytes, shape {:?} needs {want_len}",
                    e.name, e.byte_length, e.shape
                )));
            }
            if e.byte_offset != expected_offset {
                return Err(bad(format!(
                    "tensor `{}` starts at {}, expected {expected_offset}",
                    e.name, e.byte_offset
                )));
            }
            let end = expected_offset
                .checked_add(e.byte_length)
                .filter(|&end| end <= data.len() as u64)
                .ok_or_else(|| bad(format!("tensor `{}` runs past the end of the file", e.name)))?;
            let raw = &data[expected_offset as usize..end as usize];
            let values: Vec<f64> = raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
                .collect();
            debug_assert_eq!(values.len() as u64, numel);
            tensors.push((e.name.clone(), Tensor::new(e.shape.clone(), values)?));
            expected_offset = end;
        }
        if expected_offset != data.len() as u64 {
            return Err(bad(format!(
                "file has {} data bytes, header accounts for {expected_offset}",
                data.len()
            )));
        }
        Ok(Checkpoint {
            meta: header.meta,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::read(path, e))?;
        Self::decode(&bytes)
    }
}
