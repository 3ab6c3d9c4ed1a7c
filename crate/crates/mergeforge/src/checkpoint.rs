//! Checkpoint storage in the MRG container format.
//!
//! Layout, byte for byte:
//!
//! ```text
//! bytes 0..8    unsigned little-endian u64 N = header length in bytes
//! bytes 8..8+N  UTF-8 JSON object: tensor name ->
//!                 {"dtype":"f32","shape":[...],"offset":o,"length":b}
//!               plus an optional "__meta__" string map
//! bytes 8+N..   concatenated raw little-endian f32 data, no padding
//! ```
//!
//! Offsets are relative to the start of the data section. The writer emits
//! header keys in sorted order and lays tensors out in lexicographic name
//! order, so saving the same model twice produces identical files.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;

use serde::de::{MapAccess, Visitor};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Key under which the header's metadata map is stored.
const META_KEY: &str = "__meta__";

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("header length {header_len} exceeds available {available} bytes")]
    HeaderTruncated { header_len: u64, available: u64 },
    #[error("tensor `{name}`: bytes {offset}..{end} exceed data section of {data_len} bytes")]
    DataTruncated {
        name: String,
        offset: u64,
        end: u64,
        data_len: u64,
    },
    #[error("duplicate tensor name `{0}`")]
    DuplicateTensor(String),
    #[error("tensor `{name}`: unsupported dtype `{dtype}`, only \"f32\" is supported")]
    UnsupportedDtype { name: String, dtype: String },
    #[error("tensor `{name}`: {reason}")]
    InvalidTensor { name: String, reason: String },
}

/// One named flat f32 tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl TensorRecord {
    /// Build a record, checking that the shape is positive and consistent
    /// with the data length.
    pub fn new(
        name: impl Into<String>,
        shape: Vec<usize>,
        data: Vec<f32>,
    ) -> Result<Self, FormatError> {
        let name = name.into();
        if shape.contains(&0) {
            return Err(FormatError::InvalidTensor {
                name,
                reason: "shape entries must be >= 1".into(),
            });
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(FormatError::InvalidTensor {
                name,
                reason: format!(
                    "shape {:?} implies {} elements but data holds {}",
                    shape,
                    expected,
                    data.len()
                ),
            });
        }
        Ok(Self { name, shape, data })
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// One checkpoint: an ordered map of named tensors plus free-form string
/// metadata. Iteration order is always lexicographic by tensor name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ModelParams {
    tensors: BTreeMap<String, TensorRecord>,
    pub meta: BTreeMap<String, String>,
}

impl ModelParams {
    pub fn new() -> Self {
        Self::default()
    }

    /// Insert a tensor, rejecting duplicate names.
    pub fn insert(&mut self, record: TensorRecord) -> Result<(), FormatError> {
        if self.tensors.contains_key(&record.name) {
            return Err(FormatError::DuplicateTensor(record.name));
        }
        self.tensors.insert(record.name.clone(), record);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&TensorRecord> {
        self.tensors.get(name)
    }

    pub fn tensors(&self) -> impl Iterator<Item = &TensorRecord> {
        self.tensors.values()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of parameters across all tensors.
    pub fn total_params(&self) -> usize {
        self.tensors.values().map(|t| t.data.len()).sum()
    }

    /// All parameters concatenated in lexicographic tensor order.
    pub fn flatten(&self) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.total_params());
        for t in self.tensors.values() {
            out.extend_from_slice(&t.data);
        }
        out
    }
}

#[derive(Serialize, Deserialize)]
struct HeaderEntry {
    dtype: String,
    shape: Vec<u64>,
    offset: u64,
    length: u64,
}

/// Header parsed as an ordered list of raw entries so duplicate keys can be
/// detected (serde_json maps silently keep the last duplicate).
struct RawHeader(Vec<(String, serde_json::Value)>);

impl<'de> Deserialize<'de> for RawHeader {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        struct RawVisitor;
        impl<'de> Visitor<'de> for RawVisitor {
            type Value = RawHeader;

            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                write!(f, "a JSON object")
            }

            fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> Result<Self::Value, A::Error> {
                let mut entries = Vec::new();
                while let Some((key, value)) = map.next_entry::<String, serde_json::Value>()? {
                    entries.push((key, value));
                }
                Ok(RawHeader(entries))
            }
        }
        deserializer.deserialize_map(RawVisitor)
    }
}

/// Load a checkpoint from an MRG file, preserving tensor bytes exactly.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ModelParams, FormatError> {
    let bytes = fs::read(path)?;
    decode(&bytes)
}

/// Save a checkpoint; `load_checkpoint` of the result is bit-identical input.
pub fn save_checkpoint(params: &ModelParams, path: impl AsRef<Path>) -> Result<(), FormatError> {
    let bytes = encode(params)?;
    fs::write(path, bytes)?;
    Ok(())
}

/// Decode the MRG container from memory.
pub fn decode(bytes: &[u8]) -> Result<ModelParams, FormatError> {
    if bytes.len() < 8 {
        return Err(FormatError::MalformedHeader(format!(
            "file holds {} bytes, need at least 8 for the header length",
            bytes.len()
        )));
    }
    let header_len = u64::from_le_bytes(bytes[..8].try_into().unwrap());
    let available = (bytes.len() - 8) as u64;
    if header_len > available {
        return Err(FormatError::HeaderTruncated {
            header_len,
            available,
        });
    }
    let header_end = 8 + header_len as usize;
    let header_str = std::str::from_utf8(&bytes[8..header_end])
        .map_err(|e| FormatError::MalformedHeader(format!("header is not UTF-8: {e}")))?;
    let raw: RawHeader = serde_json::from_str(header_str)
        .map_err(|e| FormatError::MalformedHeader(format!("header is not a JSON object: {e}")))?;

    let data = &bytes[header_end..];
    let mut params = ModelParams::new();
    let mut seen = BTreeMap::new();
    for (name, value) in raw.0 {
        if seen.insert(name.clone(), ()).is_some() {
            return Err(FormatError::DuplicateTensor(name));
        }
        if name == META_KEY {
            let meta: BTreeMap<String, String> = serde_json::from_value(value).map_err(|e| {
                FormatError::MalformedHeader(format!("{META_KEY} is not a string map: {e}"))
            })?;
            params.meta = meta;
            continue;
        }
        let entry: HeaderEntry = serde_json::from_value(value).map_err(|e| {
            FormatError::MalformedHeader(format!("entry for `{name}` is malformed: {e}"))
        })?;
        if entry.dtype != "f32" {
            return Err(FormatError::UnsupportedDtype {
                name,
                dtype: entry.dtype,
            });
        }
        let end = entry.offset.checked_add(entry.length).ok_or_else(|| {
            FormatError::MalformedHeader(format!("entry for `{name}` overflows offsets"))
        })?;
        if end > data.len() as u64 {
            return Err(FormatError::DataTruncated {
                name,
                offset: entry.offset,
                end,
                data_len: data.len() as u64,
            });
        }
        let elems: u64 = entry.shape.iter().product();
        if elems * 4 != entry.length {
            return Err(FormatError::InvalidTensor {
                name,
                reason: format!(
                    "shape {:?} implies {} bytes but length is {}",
                    entry.shape,
                    elems * 4,
                    entry.length
                ),
            });
        }
        let slice = &data[entry.offset as usize..end as usize];
        let values: Vec<f32> = slice
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let shape: Vec<usize> = entry.shape.iter().map(|&d| d as usize).collect();
        params.insert(TensorRecord::new(name, shape, values)?)?;
    }
    Ok(params)
}

/// Encode the MRG container into memory.
pub fn encode(params: &ModelParams) -> Result<Vec<u8>, FormatError> {
    // BTreeMap keys serialize in sorted order, independent of serde_json's
    // map backing.
    let mut header: BTreeMap<&str, serde_json::Value> = BTreeMap::new();
    let mut offset = 0u64;
    for tensor in params.tensors.values() {
        let length = (tensor.data.len() * 4) as u64;
        let entry = HeaderEntry {
            dtype: "f32".into(),
            shape: tensor.shape.iter().map(|&d| d as u64).collect(),
            offset,
            length,
        };
        header.insert(&tensor.name, serde_json::to_value(entry).unwrap());
        offset += length;
    }
    if !params.meta.is_empty() {
        header.insert(META_KEY, serde_json::to_value(&params.meta).unwrap());
    }
    let header_json = serde_json::to_string(&header).unwrap();

    let mut out = Vec::with_capacity(8 + header_json.len() + offset as usize);
    out.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    out.extend_from_slice(header_json.as_bytes());
    for tensor in params.tensors.values() {
        for v in &tensor.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}
