//! Self-describing binary container for named tensors plus JSON metadata.
//!
//! Layout: 8-byte magic, little-endian `u64` header length, UTF-8 JSON header,
//! then every tensor's values as little-endian `f64` in header order. The
//! header records names, shapes and a SHA-256 of the data section.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::write_atomic;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"XVIEWCK1";

#[derive(Serialize, Deserialize)]
struct Header {
    kind: String,
    meta: serde_json::Value,
    tensors: Vec<(String, Vec<usize>)>,
    data_sha256: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    /// What the file holds, e.g. `embedder` or `training`.
    pub kind: String,
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
}

impl Container {
    pub fn new(kind: impl Into<String>, meta: serde_json::Value) -> Self {
        Container {
            kind: kind.into(),
            meta,
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.push((name.into(), t));
    }

    /// Adds every entry of `named` under `prefix/`.
    pub fn extend_prefixed<'a>(&mut self, prefix: &str, named: impl IntoIterator<Item = (&'a str, &'a Tensor)>) {
        for (n, t) in named {
            self.push(format!("{prefix}/{n}"), t.clone());
        }
    }

    pub fn into_map(self) -> HashMap<String, Tensor> {
        self.tensors.into_iter().collect()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut data = Vec::new();
        for (_, t) in &self.tensors {
            for v in t.data() {
                data.extend_from_slice(&v.to_le_bytes());
            }
        }
        let header = Header {
            kind: self.kind.clone(),
            meta: self.meta.clone(),
            tensors: self.tensors.iter().map(|(n, t)| (n.clone(), t.shape().to_vec())).collect(),
            data_sha256: hex::encode(Sha256::digest(&data)),
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut out = Vec::with_capacity(16 + json.len() + data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&data);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("not a crossview checkpoint (bad magic)"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = &bytes[16..];
        if body.len() < hlen {
            return Err(bad("truncated header"));
        }
        let header: Header =
            serde_json::from_slice(&body[..hlen]).map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
        let data = &body[hlen..];
        if hex::encode(Sha256::digest(data)) != header.data_sha256 {
            return Err(bad("data checksum mismatch"));
        }
        let mut tensors = Vec::with_capacity(header.tensors.len());
        let mut at = 0usize;
        for (name, shape) in header.tensors {
            let n: usize = shape.iter().product();
            let end = at + n * 8;
            if end > data.len() {
                return Err(bad("truncated data"));
            }
            let vals = data[at..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            tensors.push((name, Tensor::new(shape, vals)?));
            at = end;
        }
        if at != data.len() {
            return Err(bad("trailing bytes after tensor data"));
        }
        Ok(Container {
            kind: header.kind,
            meta: header.meta,
            tensors,
        })
    }

    /// Writes atomically (temporary file, then rename).
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Checkpoint(format!(
                "expected a `{kind}` checkpoint, found `{}`",
                self.kind
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Container {
        let mut c = Container::new("test", serde_json::json!({"a": 1, "s": "x"}));
        c.push("w", Tensor::from_fn([2, 3], |i| i as f64 * 0.1 - 0.2));
        c.push("s", Tensor::scalar(f64::MIN_POSITIVE));
        c
    }

    #[test]
    fn bytes_round_trip_is_exact() {
        let c = sample();
        assert_eq!(Container::from_bytes(&c.to_bytes().unwrap()).unwrap(), c);
    }

    #[test]
    fn corruption_is_detected() {
        let mut b = sample().to_bytes().unwrap();
        let last = b.len() - 1;
        b[last] ^= 1;
        assert!(Container::from_bytes(&b).is_err());
        assert!(Container::from_bytes(b"nope").is_err());
    }

    #[test]
    fn file_round_trip_and_missing_path() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.ckpt");
        sample().save(&p).unwrap();
        assert_eq!(Container::load(&p).unwrap(), sample());
        let err = Container::load(&dir.path().join("missing.ckpt")).unwrap_err();
        assert!(err.to_string().contains("missing.ckpt"));
    }
}
