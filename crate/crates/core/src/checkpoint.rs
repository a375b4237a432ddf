//! Single-file tensor checkpoints.
//!
//! Layout:
//!
//! ```text
//! DUALGUIDE-TENSORS 1\n
//! {"dtype":"f64","meta":{..},"tensors":[{"name":..,"shape":[..],"offset":..,"len":..}, ..]}\n
//! <raw little-endian f64 payload>
//! ```
//!
//! `offset` is the byte offset of each tensor within the payload and `len`
//! its element count. Round trips are bit-exact.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &str = "DUALGUIDE-TENSORS 1";

#[derive(Serialize, Deserialize)]
struct Header {
    dtype: String,
    meta: BTreeMap<String, String>,
    tensors: Vec<Entry>,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

/// Named tensors plus free-form string metadata.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
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
                    len: t.numel(),
                };
                offset += t.numel() * 8;
                e
            })
            .collect();
        let header = Header {
            dtype: "f64".into(),
            meta: self.meta.clone(),
            tensors,
        };
        let json = serde_json::to_string(&header).expect("header serialises");
        let mut out = Vec::with_capacity(MAGIC.len() + json.len() + 2 + offset);
        out.extend_from_slice(MAGIC.as_bytes());
        out.push(b'\n');
        out.extend_from_slice(json.as_bytes());
        out.push(b'\n');
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |reason: &str| Error::Checkpoint {
            path: path.to_path_buf(),
            reason: reason.to_string(),
        };
        let nl1 = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| bad("missing magic line"))?;
        if &bytes[..nl1] != MAGIC.as_bytes() {
            return Err(bad("bad magic"));
        }
        let rest = &bytes[nl1 + 1..];
        let nl2 = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| bad("missing header"))?;
        let header: Header = serde_json::from_slice(&rest[..nl2]).map_err(|e| bad(&format!("header: {e}")))?;
        if header.dtype != "f64" {
            return Err(bad(&format!("unsupported dtype {}", header.dtype)));
        }
        let payload = &rest[nl2 + 1..];
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in header.tensors {
            let end = e.offset + e.len * 8;
            if end > payload.len() {
                return Err(bad(&format!("tensor `{}` runs past end of payload", e.name)));
            }
            let data = payload[e.offset..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            let t = Tensor::new(e.shape, data).map_err(|err| bad(&err.to_string()))?;
            tensors.push((e.name, t));
        }
        Ok(Self {
            meta: header.meta,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                fs::create_dir_all(dir)?;
            }
        }
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::Checkpoint {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        Self::from_bytes(&bytes, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            values in proptest::collection::vec(any::<f64>().prop_filter("finite", |v| v.is_finite()), 1..40),
            split in 0usize..40,
        ) {
            let split = split.min(values.len() - 1) + 1;
            let a = Tensor::from_vec(values[..split].to_vec());
            let b = Tensor::new(vec![1, values.len()], values.clone()).unwrap();
            let mut meta = BTreeMap::new();
            meta.insert("kind".to_string(), "test".to_string());
            let ck = Checkpoint { meta, tensors: vec![("a".into(), a), ("b".into(), b)] };
            let back = Checkpoint::from_bytes(&ck.to_bytes(), Path::new("mem")).unwrap();
            for ((_, x), (_, y)) in ck.tensors.iter().zip(&back.tensors) {
                prop_assert_eq!(x.shape(), y.shape());
                let xb: Vec<u64> = x.data().iter().map(|v| v.to_bits()).collect();
                let yb: Vec<u64> = y.data().iter().map(|v| v.to_bits()).collect();
                prop_assert_eq!(xb, yb);
            }
            prop_assert_eq!(back.meta, ck.meta);
        }
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let ck = Checkpoint {
            meta: BTreeMap::new(),
            tensors: vec![("w".into(), Tensor::from_vec(vec![1.0, 2.0]))],
        };
        let mut bytes = ck.to_bytes();
        bytes.truncate(bytes.len() - 3);
        assert!(Checkpoint::from_bytes(&bytes, Path::new("x")).is_err());
    }
}
