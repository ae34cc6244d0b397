//! Self-describing tensor container shared by backbone and projector
//! checkpoints.
//!
//! Layout:
//!
//! ```text
//! offset 0   8 bytes   magic "DFRCKPT1"
//! offset 8   8 bytes   header length H, u64 little-endian
//! offset 16  H bytes   UTF-8 JSON header (see `Header`)
//! offset 16+H          payload: every tensor's f64 values, little-endian,
//!                      concatenated in header order
//! ```
//!
//! The header lists `{name, shape, offset, len}` per tensor (offsets and
//! lengths in elements), free-form string `tags`, the SHA-256 of the payload
//! bytes and the content hash of the named tensors (see
//! [`hash_named_tensors`]).

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{DfrError, Result};
use crate::numkernel::Tensor;

pub const MAGIC: &[u8; 8] = b"DFRCKPT1";

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    kind: String,
    tags: BTreeMap<String, String>,
    tensors: Vec<TensorEntry>,
    payload_sha256: String,
    content_hash: String,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

/// SHA-256 over `(name, shape, data)` of each tensor in order.
pub fn hash_named_tensors<'t>(tensors: impl IntoIterator<Item = (&'t str, &'t Tensor)>) -> String {
    let mut h = Sha256::new();
    for (name, t) in tensors {
        h.update((name.len() as u64).to_le_bytes());
        h.update(name.as_bytes());
        t.hash_into(&mut h);
    }
    hex::encode(h.finalize())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| DfrError::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub tags: BTreeMap<String, String>,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new(kind: impl Into<String>) -> Self {
        Self {
            kind: kind.into(),
            tags: BTreeMap::new(),
            tensors: Vec::new(),
        }
    }

    pub fn tag(mut self, key: &str, value: impl ToString) -> Self {
        self.tags.insert(key.to_string(), value.to_string());
        self
    }

    pub fn push(&mut self, name: impl Into<String>, t: &Tensor) {
        let mut t = t.clone();
        t.requires_grad = false;
        t.grad = None;
        self.tensors.push((name.into(), t));
    }

    pub fn content_hash(&self) -> String {
        hash_named_tensors(self.tensors.iter().map(|(n, t)| (n.as_str(), t)))
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| DfrError::format("checkpoint", format!("missing tensor {name}")))
    }

    pub fn tag_value(&self, key: &str) -> Result<&str> {
        self.tags
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| DfrError::format("checkpoint", format!("missing tag {key}")))
    }

    pub fn parse_tag<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        self.tag_value(key)?
            .parse()
            .map_err(|_| DfrError::format("checkpoint", format!("bad tag {key}")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut payload = Vec::new();
        let mut entries = Vec::new();
        let mut offset = 0;
        for (name, t) in &self.tensors {
            entries.push(TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset,
                len: t.numel(),
            });
            offset += t.numel();
            for x in t.data() {
                payload.extend_from_slice(&x.to_le_bytes());
            }
        }
        let header = Header {
            format: "dfr-checkpoint".into(),
            version: 1,
            kind: self.kind.clone(),
            tags: self.tags.clone(),
            tensors: entries,
            payload_sha256: sha256_hex(&payload),
            content_hash: self.content_hash(),
        };
        let hjson = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(16 + hjson.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(hjson.len() as u64).to_le_bytes());
        out.extend_from_slice(&hjson);
        out.extend_from_slice(&payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |d: &str| DfrError::format("checkpoint", d.to_string());
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("bad magic"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let hend = 16usize.checked_add(hlen).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(&bytes[16..hend])?;
        let payload = &bytes[hend..];
        if sha256_hex(payload) != header.payload_sha256 {
            return Err(DfrError::Integrity("checkpoint payload hash mismatch".into()));
        }
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in &header.tensors {
            let start = e.offset * 8;
            let end = start + e.len * 8;
            if end > payload.len() {
                return Err(bad("tensor extends past payload"));
            }
            let data = payload[start..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            tensors.push((e.name.clone(), Tensor::new(e.shape.clone(), data)?));
        }
        let ck = Self {
            kind: header.kind,
            tags: header.tags,
            tensors,
        };
        if ck.content_hash() != header.content_hash {
            return Err(DfrError::Integrity("checkpoint content hash mismatch".into()));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| DfrError::io(dir, e))?;
        }
        fs::write(path, self.to_bytes()).map_err(|e| DfrError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| DfrError::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            DfrError::Integrity(m) => DfrError::Integrity(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn roundtrip(vals in proptest::collection::vec(-1e6f64..1e6, 1..40), rows in 1usize..4) {
            let n = vals.len() / rows * rows;
            prop_assume!(n > 0);
            let t = Tensor::new([rows, n / rows], vals[..n].to_vec()).unwrap();
            let mut ck = Checkpoint::new("test").tag("n", 4);
            ck.push("w", &t);
            ck.push("b", &Tensor::from_vec(vec![1.5, -2.0]));
            let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
            prop_assert_eq!(back, ck);
        }
    }

    #[test]
    fn detects_corruption() {
        let mut ck = Checkpoint::new("test");
        ck.push("w", &Tensor::from_vec(vec![1.0, 2.0, 3.0]));
        let mut bytes = ck.to_bytes();
        let last = bytes.len() - 1;
        bytes[last] ^= 0x40;
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(DfrError::Integrity(_))));
        assert!(Checkpoint::from_bytes(b"nonsense").is_err());
    }
}
