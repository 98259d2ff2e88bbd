//! Named-tensor container file format, shared by model weights and
//! direction banks.
//!
//! Layout on disk:
//!
//! ```text
//! [ 8 bytes ]  little-endian u64: header length L
//! [ L bytes ]  UTF-8 JSON header: {"tensors": [...], "metadata": {...}}
//! [ rest    ]  tensor blobs, little-endian f32, row-major, at the
//!              byte offsets declared in the header (relative to the
//!              start of the blob section)
//! ```
//!
//! Each header entry carries `{name, dtype, shape, byte_offset}`. Only
//! `"f32"` is a valid dtype. Writes are canonical: tensors laid out in
//! name order, metadata keys sorted, compact JSON. Writing the same
//! content twice therefore produces byte-identical files.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum ContainerError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("tensor {name}: unsupported dtype {dtype:?} (only \"f32\")")]
    UnsupportedDtype { name: String, dtype: String },
    #[error("tensor {name}: declared shape {shape:?} overflows")]
    ShapeOverflow { name: String, shape: Vec<usize> },
    #[error("tensor {name}: truncated blob (needs bytes {start}..{end}, blob has {blob_len})")]
    TruncatedBlob {
        name: String,
        start: usize,
        end: usize,
        blob_len: usize,
    },
    #[error("duplicate tensor name {0:?} in header")]
    DuplicateTensor(String),
    #[error("blob has {extra} trailing bytes beyond the last declared tensor")]
    TrailingBytes { extra: usize },
    #[error("missing required tensor {0:?}")]
    MissingTensor(String),
    #[error("missing required metadata field {0:?}")]
    MissingMetadata(String),
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    byte_offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    tensors: Vec<TensorEntry>,
    metadata: BTreeMap<String, String>,
}

/// In-memory contents of a container file.
#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub tensors: BTreeMap<String, Tensor>,
    pub metadata: BTreeMap<String, String>,
}

impl Container {
    pub fn new() -> Self {
        Self {
            tensors: BTreeMap::new(),
            metadata: BTreeMap::new(),
        }
    }

    /// Fetch a tensor or fail with the offending name.
    pub fn require(&self, name: &str) -> Result<&Tensor, ContainerError> {
        self.tensors
            .get(name)
            .ok_or_else(|| ContainerError::MissingTensor(name.to_string()))
    }

    /// Fetch a metadata field or fail with the offending key.
    pub fn require_meta(&self, key: &str) -> Result<&str, ContainerError> {
        self.metadata
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| ContainerError::MissingMetadata(key.to_string()))
    }

    pub fn write_to(&self, path: &Path) -> Result<(), ContainerError> {
        let io_err = |source| ContainerError::Io {
            path: path.display().to_string(),
            source,
        };

        // BTreeMap iteration is name-ordered, which fixes the layout.
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut offset = 0usize;
        for (name, tensor) in &self.tensors {
            let n_bytes = tensor.data().len() * 4;
            entries.push(TensorEntry {
                name: name.clone(),
                dtype: "f32".to_string(),
                shape: tensor.shape().to_vec(),
                byte_offset: offset,
            });
            offset += n_bytes;
        }
        let header = Header {
            tensors: entries,
            metadata: self.metadata.clone(),
        };
        let header_json = serde_json::to_string(&header)
            .map_err(|e| ContainerError::MalformedHeader(e.to_string()))?;

        let mut file = fs::File::create(path).map_err(io_err)?;
        file.write_all(&(header_json.len() as u64).to_le_bytes())
            .map_err(io_err)?;
        file.write_all(header_json.as_bytes()).map_err(io_err)?;
        for tensor in self.tensors.values() {
            let mut bytes = Vec::with_capacity(tensor.data().len() * 4);
            for v in tensor.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
            file.write_all(&bytes).map_err(io_err)?;
        }
        Ok(())
    }

    pub fn read_from(path: &Path) -> Result<Self, ContainerError> {
        let bytes = fs::read(path).map_err(|source| ContainerError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&bytes)
    }

    /// Parse the container format from raw bytes.
    pub fn parse(bytes: &[u8]) -> Result<Self, ContainerError> {
        if bytes.len() < 8 {
            return Err(ContainerError::MalformedHeader(
                "file shorter than 8 bytes".into(),
            ));
        }
        let header_len = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        if header_len > bytes.len() - 8 {
            return Err(ContainerError::MalformedHeader(format!(
                "declared header length {header_len} exceeds file size {}",
                bytes.len()
            )));
        }

        let header_text = std::str::from_utf8(&bytes[8..8 + header_len])
            .map_err(|e| ContainerError::MalformedHeader(format!("header not UTF-8: {e}")))?;
        let header: Header = serde_json::from_str(header_text)
            .map_err(|e| ContainerError::MalformedHeader(format!("header not valid JSON: {e}")))?;

        let blob = &bytes[8 + header_len..];

        let mut tensors = BTreeMap::new();
        let mut max_end = 0usize;
        for entry in &header.tensors {
            if entry.dtype != "f32" {
                return Err(ContainerError::UnsupportedDtype {
                    name: entry.name.clone(),
                    dtype: entry.dtype.clone(),
                });
            }
            let n_elems = entry
                .shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| ContainerError::ShapeOverflow {
                    name: entry.name.clone(),
                    shape: entry.shape.clone(),
                })?;
            let start = entry.byte_offset;
            let end =
                start
                    .checked_add(n_elems * 4)
                    .ok_or_else(|| ContainerError::ShapeOverflow {
                        name: entry.name.clone(),
                        shape: entry.shape.clone(),
                    })?;
            if end > blob.len() {
                return Err(ContainerError::TruncatedBlob {
                    name: entry.name.clone(),
                    start,
                    end,
                    blob_len: blob.len(),
                });
            }
            let mut data = Vec::with_capacity(n_elems);
            for chunk in blob[start..end].chunks_exact(4) {
                data.push(f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]));
            }
            let tensor = Tensor::new(entry.shape.clone(), data)
                .map_err(|e| ContainerError::MalformedHeader(e.to_string()))?;
            if tensors.insert(entry.name.clone(), tensor).is_some() {
                return Err(ContainerError::DuplicateTensor(entry.name.clone()));
            }
            max_end = max_end.max(end);
        }
        if blob.len() > max_end {
            return Err(ContainerError::TrailingBytes {
                extra: blob.len() - max_end,
            });
        }

        Ok(Self {
            tensors,
            metadata: header.metadata,
        })
    }
}

impl Default for Container {
    fn default() -> Self {
        Self::new()
    }
}
