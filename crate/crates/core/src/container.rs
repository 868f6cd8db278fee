//! Single-file tensor container: UTF-8 JSON header + little-endian f32 payload.
//!
//! Layout: an 8-byte little-endian header length, the JSON header, then the
//! raw payload. The header maps tensor names to shapes and element offsets
//! and carries an arbitrary `meta` value (encoder config, covariance
//! provenance, ...). Tensor names are kept sorted so the same content always
//! produces byte-identical files.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorEntry {
    pub shape: Vec<usize>,
    /// Offset into the payload in f32 elements (not bytes).
    pub offset: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    meta: Value,
    tensors: BTreeMap<String, TensorEntry>,
}

/// In-memory container contents. Values are held as f64 for computation and
/// truncated to f32 on write, which is the on-disk precision.
#[derive(Debug, Clone, Default)]
pub struct Container {
    pub meta: Value,
    tensors: BTreeMap<String, (Vec<usize>, Vec<f64>)>,
}

impl Container {
    pub fn new(meta: Value) -> Self {
        Self {
            meta,
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, shape: Vec<usize>, data: Vec<f64>) {
        let expected: usize = shape.iter().product();
        assert_eq!(
            data.len(),
            expected,
            "tensor {name} shape/product mismatch"
        );
        self.tensors.insert(name.to_string(), (shape, data));
    }

    pub fn get(&self, name: &str) -> Result<(&[usize], &[f64])> {
        self.tensors
            .get(name)
            .map(|(s, d)| (s.as_slice(), d.as_slice()))
            .ok_or_else(|| Error::Validation(format!("container missing tensor {name:?}")))
    }

    pub fn tensor_names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(|k| k.as_str())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut header = Header {
            meta: self.meta.clone(),
            tensors: BTreeMap::new(),
        };
        let mut offset = 0usize;
        for (name, (shape, data)) in &self.tensors {
            header.tensors.insert(
                name.clone(),
                TensorEntry {
                    shape: shape.clone(),
                    offset,
                },
            );
            offset += data.len();
        }
        let header_json = serde_json::to_vec(&header)
            .map_err(|e| Error::Validation(format!("header serialization failed: {e}")))?;
        let mut out = Vec::with_capacity(8 + header_json.len() + offset * 4);
        out.write_all(&(header_json.len() as u64).to_le_bytes())
            .expect("vec write");
        out.write_all(&header_json).expect("vec write");
        for (_, data) in self.tensors.values() {
            for &v in data {
                out.write_all(&(v as f32).to_le_bytes()).expect("vec write");
            }
        }
        Ok(out)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut bytes = Vec::new();
        file.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Validation(msg) => Error::parse(path, msg),
            other => other,
        })
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(Error::Validation("container shorter than header length".into()));
        }
        let header_len = u64::from_le_bytes(bytes[0..8].try_into().expect("8 bytes")) as usize;
        let payload_start = 8 + header_len;
        if bytes.len() < payload_start {
            return Err(Error::Validation(format!(
                "declared header length {header_len} exceeds file size"
            )));
        }
        let header: Header = serde_json::from_slice(&bytes[8..payload_start])
            .map_err(|e| Error::Validation(format!("bad container header: {e}")))?;
        let payload = &bytes[payload_start..];
        if !payload.len().is_multiple_of(4) {
            return Err(Error::Validation("payload is not a whole number of f32s".into()));
        }
        let n_elems = payload.len() / 4;
        let mut tensors = BTreeMap::new();
        for (name, entry) in header.tensors {
            let count: usize = entry.shape.iter().product();
            let end = entry.offset.checked_add(count).ok_or_else(|| {
                Error::Validation(format!("tensor {name:?} offset overflow"))
            })?;
            if end > n_elems {
                return Err(Error::Validation(format!(
                    "tensor {name:?} extends past payload ({end} > {n_elems})"
                )));
            }
            let mut data = Vec::with_capacity(count);
            for i in entry.offset..end {
                let at = i * 4;
                let v = f32::from_le_bytes(payload[at..at + 4].try_into().expect("4 bytes"));
                if !v.is_finite() {
                    return Err(Error::Validation(format!(
                        "tensor {name:?} contains non-finite value at element {i}"
                    )));
                }
                data.push(v as f64);
            }
            tensors.insert(name, (entry.shape, data));
        }
        Ok(Self {
            meta: header.meta,
            tensors,
        })
    }
}

/// Round every value to f32 precision. Initialization goes through this so
/// that saving and reloading a fresh model is bit-lossless.
pub fn quantize_f32(values: &mut [f64]) {
    for v in values.iter_mut() {
        *v = *v as f32 as f64;
    }
}
