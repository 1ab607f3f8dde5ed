//! The `SKIPREC-CKPT/1` container.
//!
//! ```text
//! SKIPREC-CKPT/1\n
//! u64 little-endian: header length in bytes
//! header: JSON {kind, config, vocab_hash, tensors: [{name, shape, offset, len}]}
//! tensor data: little-endian f64, tensors back to back
//! ```
//!
//! `offset` and `len` count f64 values from the start of the tensor data.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::params::ParamSet;

pub const CHECKPOINT_MAGIC: &str = "SKIPREC-CKPT/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    kind: String,
    config: serde_json::Value,
    vocab_hash: String,
    tensors: Vec<TensorEntry>,
}

/// A named tensor collection with its configuration block.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// `model` for encoders, `baseline` for factor models.
    pub kind: String,
    pub config: serde_json::Value,
    pub vocab_hash: String,
    pub tensors: ParamSet,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut offset = 0;
        for (name, t) in self.tensors.iter() {
            entries.push(TensorEntry {
                name: name.to_string(),
                shape: [t.rows(), t.cols()],
                offset,
                len: t.len(),
            });
            offset += t.len();
        }
        let header = serde_json::to_vec(&Header {
            kind: self.kind.clone(),
            config: self.config.clone(),
            vocab_hash: self.vocab_hash.clone(),
            tensors: entries,
        })?;
        let mut out = Vec::with_capacity(CHECKPOINT_MAGIC.len() + 9 + header.len() + offset * 8);
        out.extend_from_slice(CHECKPOINT_MAGIC.as_bytes());
        out.push(b'\n');
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, t) in self.tensors.iter() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
        let bad = |m: &str| Error::format(path, m.to_string());
        let magic = format!("{CHECKPOINT_MAGIC}\n");
        let rest = bytes
            .strip_prefix(magic.as_bytes())
            .ok_or_else(|| bad("missing SKIPREC-CKPT/1 magic"))?;
        if rest.len() < 8 {
            return Err(bad("truncated header length"));
        }
        let (len_bytes, rest) = rest.split_at(8);
        let header_len = u64::from_le_bytes(len_bytes.try_into().unwrap()) as usize;
        if rest.len() < header_len {
            return Err(bad("truncated header"));
        }
        let (header, data) = rest.split_at(header_len);
        let header: Header =
            serde_json::from_slice(header).map_err(|e| bad(&format!("bad header: {e}")))?;
        if data.len() % 8 != 0 {
            return Err(bad("tensor data is not a whole number of f64 values"));
        }
        let values: Vec<f64> = data
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let mut tensors = ParamSet::new();
        let mut expected = 0;
        for e in &header.tensors {
            if e.offset != expected || e.len != e.shape[0] * e.shape[1] {
                return Err(bad(&format!("inconsistent index entry for {}", e.name)));
            }
            let end = e.offset + e.len;
            if end > values.len() {
                return Err(bad(&format!("tensor {} runs past the end of the file", e.name)));
            }
            if tensors.id(&e.name).is_some() {
                return Err(bad(&format!("duplicate tensor {}", e.name)));
            }
            let m = Matrix::from_vec(e.shape[0], e.shape[1], values[e.offset..end].to_vec());
            tensors.push(e.name.clone(), m);
            expected = end;
        }
        if expected != values.len() {
            return Err(bad("trailing tensor data"));
        }
        Ok(Checkpoint {
            kind: header.kind,
            config: header.config,
            vocab_hash: header.vocab_hash,
            tensors,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        crate::dataset::write_file(path, &self.to_bytes()?)
    }

    pub fn read(path: &Path) -> Result<Checkpoint> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut t = ParamSet::new();
        t.push("a", Matrix::from_vec(2, 2, vec![1.0, -0.5, 0.25, 1e-300]));
        t.push("b", Matrix::from_vec(1, 3, vec![f64::MIN_POSITIVE, 3.0, -0.0]));
        Checkpoint {
            kind: "model".into(),
            config: serde_json::json!({"architecture": "sasrec"}),
            vocab_hash: "abc".into(),
            tensors: t,
        }
    }

    #[test]
    fn layout_starts_with_magic_and_length() {
        let bytes = sample().to_bytes().unwrap();
        assert!(bytes.starts_with(b"SKIPREC-CKPT/1\n"));
        let len = u64::from_le_bytes(bytes[15..23].try_into().unwrap()) as usize;
        assert_eq!(bytes.len(), 23 + len + 7 * 8);
        let first = f64::from_le_bytes(bytes[23 + len..31 + len].try_into().unwrap());
        assert_eq!(first, 1.0);
    }

    #[test]
    fn round_trip_is_exact() {
        let c = sample();
        let back = Checkpoint::from_bytes(&c.to_bytes().unwrap(), Path::new("x")).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes().unwrap(), c.to_bytes().unwrap());
    }

    #[test]
    fn corruption_is_detected() {
        let bytes = sample().to_bytes().unwrap();
        let p = Path::new("x");
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 8], p).is_err());
        assert!(Checkpoint::from_bytes(&bytes[1..], p).is_err());
        let mut extra = bytes.clone();
        extra.extend_from_slice(&[0; 8]);
        assert!(Checkpoint::from_bytes(&extra, p).is_err());
    }
}
