//! The `VSHF` tensor container shared by checkpoints, trajectories and
//! feature caches.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"VSHF" | version: u32 | meta_len: u64 | meta: UTF-8 JSON (meta_len bytes) | payload
//! ```
//!
//! The JSON object carries a `tag` (`"MODEL"`, `"TRAJ"`, `"FEAT"`), a free
//! form `meta` value and a `tensors` index of `{name, shape, offset}` where
//! `offset` is the byte offset of the tensor inside the payload. Payloads are
//! raw `f32` values.

use std::io::{Read, Write};
use std::path::Path;

use gradcore::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"VSHF";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    tag: String,
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

/// In-memory form of one container file.
#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub tag: String,
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Container {
    pub fn new(tag: &str, meta: serde_json::Value) -> Self {
        Container {
            tag: tag.to_string(),
            meta,
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor<f32>) {
        self.tensors.push((name.into(), t));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut offset = 0u64;
        let entries = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let e = TensorEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                    offset,
                };
                offset += 4 * t.len() as u64;
                e
            })
            .collect();
        let header = Header {
            tag: self.tag.clone(),
            meta: self.meta.clone(),
            tensors: entries,
        };
        let meta = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(16 + meta.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Format(m.to_string());
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(bad("missing VSHF magic"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let meta_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let meta_end = 16usize
            .checked_add(meta_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| bad("metadata runs past end of file"))?;
        let header: Header =
            serde_json::from_slice(&bytes[16..meta_end]).map_err(|e| Error::Format(format!("metadata: {e}")))?;
        let payload = &bytes[meta_end..];
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in header.tensors {
            let n: usize = e.shape.iter().product();
            let start = e.offset as usize;
            let end = start
                .checked_add(4 * n)
                .filter(|&end| end <= payload.len())
                .ok_or_else(|| Error::Format(format!("tensor `{}` runs past end of payload", e.name)))?;
            let data = payload[start..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push((e.name, Tensor::new(e.shape, data)?));
        }
        Ok(Container {
            tag: header.tag,
            meta: header.meta,
            tensors,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    pub fn expect_tag(self, tag: &str) -> Result<Self> {
        if self.tag != tag {
            return Err(Error::Format(format!("expected `{tag}` container, found `{}`", self.tag)));
        }
        Ok(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let mut c = Container::new("TRAJ", serde_json::json!({"steps": 3}));
        c.push("z0", Tensor::from_fn(&[2, 2], |i| i as f32));
        let bytes = c.to_bytes();
        assert_eq!(&bytes[..4], b"VSHF");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        let meta_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        assert_eq!(bytes.len(), 16 + meta_len + 16);
        assert_eq!(&bytes[bytes.len() - 4..], &3f32.to_le_bytes());
    }

    #[test]
    fn truncated_files_are_rejected() {
        let mut c = Container::new("MODEL", serde_json::Value::Null);
        c.push("w", Tensor::ones(&[8]));
        let bytes = c.to_bytes();
        assert!(Container::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(Container::from_bytes(b"NOPE0000000000000000").is_err());
    }

    proptest! {
        #[test]
        fn round_trip_is_bitwise(values in prop::collection::vec(-1e30f32..1e30, 1..64), split in 1usize..8) {
            let mut c = Container::new("FEAT", serde_json::json!({"k": "v"}));
            let cut = split.min(values.len());
            c.push("a", Tensor::new(vec![cut], values[..cut].to_vec()).unwrap());
            if cut < values.len() {
                c.push("b", Tensor::new(vec![values.len() - cut], values[cut..].to_vec()).unwrap());
            }
            let bytes = c.to_bytes();
            let back = Container::from_bytes(&bytes).unwrap();
            prop_assert_eq!(&back, &c);
            prop_assert_eq!(back.to_bytes(), bytes);
        }
    }
}
