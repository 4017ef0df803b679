//! THW1 tensor container.
//!
//! Layout: the magic `THW1`, a little-endian `u32` header length `L`, `L`
//! bytes of JSON mapping tensor names to `{"shape": [...], "offset": u64}`,
//! then the little-endian `f32` payloads. Offsets count from the first
//! payload byte. The optional `__metadata__` key carries free-form JSON and
//! is not a tensor.

use std::collections::BTreeMap;
use std::path::Path;

use highlighter_core::numerics::Tensor2D;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, FormatError, Result};

pub const MAGIC: &[u8; 4] = b"THW1";
pub const METADATA_KEY: &str = "__metadata__";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Entry {
    shape: Vec<u64>,
    offset: u64,
}

/// Named tensors plus optional metadata.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ThwFile {
    pub tensors: BTreeMap<String, Tensor2D>,
    pub metadata: Option<Value>,
}

impl ThwFile {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = serde_json::Map::new();
        let mut offset = 0u64;
        for (name, t) in &self.tensors {
            let entry = Entry { shape: vec![t.rows() as u64, t.cols() as u64], offset };
            header.insert(name.clone(), serde_json::to_value(entry).expect("plain struct"));
            offset += 4 * t.data().len() as u64;
        }
        if let Some(meta) = &self.metadata {
            header.insert(METADATA_KEY.into(), meta.clone());
        }
        let header = serde_json::to_vec(&Value::Object(header)).expect("json value");
        let mut out = Vec::with_capacity(8 + header.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for t in self.tensors.values() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, FormatError> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(FormatError::BadMagic);
        }
        let len_bytes = bytes.get(4..8).ok_or_else(|| FormatError::Truncated("missing header length".into()))?;
        let header_len = u32::from_le_bytes(len_bytes.try_into().expect("4 bytes")) as usize;
        let header = bytes
            .get(8..8 + header_len)
            .ok_or_else(|| FormatError::Truncated(format!("header of {header_len} bytes")))?;
        let payload = &bytes[8 + header_len..];
        let header: BTreeMap<String, Value> =
            serde_json::from_slice(header).map_err(|e| FormatError::Header(e.to_string()))?;

        let mut file = ThwFile::default();
        for (name, value) in header {
            if name == METADATA_KEY {
                file.metadata = Some(value);
                continue;
            }
            let bad = |reason: String| FormatError::Tensor { tensor: name.clone(), reason };
            let entry: Entry = serde_json::from_value(value).map_err(|e| bad(e.to_string()))?;
            let (rows, cols) = match entry.shape.as_slice() {
                [n] => (1, *n as usize),
                [r, c] => (*r as usize, *c as usize),
                other => return Err(bad(format!("unsupported rank {}", other.len()))),
            };
            let count = rows.checked_mul(cols).ok_or_else(|| bad("shape overflows".into()))?;
            let start = usize::try_from(entry.offset).map_err(|_| bad("offset overflows".into()))?;
            let end = count
                .checked_mul(4)
                .and_then(|n| n.checked_add(start))
                .ok_or_else(|| bad("extent overflows".into()))?;
            let raw = payload.get(start..end).ok_or_else(|| {
                FormatError::Truncated(format!("tensor {name} needs bytes {start}..{end} of {}", payload.len()))
            })?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            let t = Tensor2D::new(rows, cols, data).map_err(|e| bad(e.to_string()))?;
            file.tensors.insert(name, t);
        }
        Ok(file)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|source| Error::Format { path: path.into(), source })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }
}
