//! Checkpoint files: a JSON manifest plus a raw little-endian `f64` blob.
//!
//! ```text
//! <stem>.json  {"format":"GSSM-CKPT-1","tensors":[{"name":..,"rows":..,"cols":..}],"metadata":{..}}
//! <stem>.bin   row-major f64 values of every tensor, in manifest order
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::params::ParamSet;
use crate::tape::Matrix;

pub const FORMAT: &str = "GSSM-CKPT-1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed manifest: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error("unsupported checkpoint format {found:?}, expected {FORMAT:?}")]
    Version { found: String },
    #[error("blob holds {found} bytes, manifest requires {expected}")]
    Truncated { expected: usize, found: usize },
    #[error("tensor {name:?} has an unusable shape {rows}x{cols}")]
    BadShape {
        name: String,
        rows: usize,
        cols: usize,
    },
    #[error("duplicate tensor name {0:?}")]
    Duplicate(String),
    #[error("tensor {0:?} missing from checkpoint")]
    Missing(String),
    #[error("tensor {name:?}: checkpoint shape {found:?}, model expects {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: (usize, usize),
        found: (usize, usize),
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub tensors: Vec<TensorEntry>,
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
}

impl Manifest {
    pub fn parse(text: &str) -> Result<Self, CheckpointError> {
        let m: Manifest = serde_json::from_str(text)?;
        if m.format != FORMAT {
            return Err(CheckpointError::Version { found: m.format });
        }
        Ok(m)
    }

    /// Blob length implied by the tensor list.
    pub fn blob_len(&self) -> Result<usize, CheckpointError> {
        let mut total: usize = 0;
        for t in &self.tensors {
            let bad = || CheckpointError::BadShape {
                name: t.name.clone(),
                rows: t.rows,
                cols: t.cols,
            };
            if t.rows == 0 || t.cols == 0 {
                return Err(bad());
            }
            let bytes = t
                .rows
                .checked_mul(t.cols)
                .and_then(|n| n.checked_mul(8))
                .ok_or_else(bad)?;
            total = total.checked_add(bytes).ok_or_else(bad)?;
        }
        Ok(total)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<(String, Matrix)>,
    pub metadata: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, value: Matrix) {
        self.tensors.push((name.into(), value));
    }

    /// Append every tensor of `params` under `prefix/`.
    pub fn push_params(&mut self, prefix: &str, params: &ParamSet) {
        for (name, value) in params.iter() {
            self.push(format!("{prefix}/{name}"), value.clone());
        }
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, m)| m)
    }

    /// Overwrite `params` from tensors stored under `prefix/`; every
    /// parameter must be present with a matching shape.
    pub fn restore_params(
        &self,
        prefix: &str,
        params: &mut ParamSet,
    ) -> Result<(), CheckpointError> {
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            let key = format!("{prefix}/{}", params.name(id));
            let stored = self
                .get(&key)
                .ok_or_else(|| CheckpointError::Missing(key.clone()))?;
            let target = params.get_mut(id);
            if stored.dim() != target.dim() {
                return Err(CheckpointError::ShapeMismatch {
                    name: key,
                    expected: target.dim(),
                    found: stored.dim(),
                });
            }
            target.assign(stored);
        }
        Ok(())
    }

    pub fn manifest(&self) -> Manifest {
        Manifest {
            format: FORMAT.to_string(),
            tensors: self
                .tensors
                .iter()
                .map(|(name, m)| TensorEntry {
                    name: name.clone(),
                    rows: m.nrows(),
                    cols: m.ncols(),
                })
                .collect(),
            metadata: self.metadata.clone(),
        }
    }

    pub fn encode(&self) -> (String, Vec<u8>) {
        let manifest = serde_json::to_string_pretty(&self.manifest()).expect("manifest serializes");
        let mut blob = Vec::with_capacity(self.tensors.iter().map(|(_, m)| m.len() * 8).sum());
        for (_, m) in &self.tensors {
            for &x in m.iter() {
                blob.extend_from_slice(&x.to_le_bytes());
            }
        }
        (manifest, blob)
    }

    pub fn decode(manifest: &str, blob: &[u8]) -> Result<Self, CheckpointError> {
        let manifest = Manifest::parse(manifest)?;
        let expected = manifest.blob_len()?;
        if blob.len() != expected {
            return Err(CheckpointError::Truncated {
                expected,
                found: blob.len(),
            });
        }
        let mut tensors: Vec<(String, Matrix)> = Vec::with_capacity(manifest.tensors.len());
        let mut words = blob
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")));
        for t in &manifest.tensors {
            if tensors.iter().any(|(n, _)| *n == t.name) {
                return Err(CheckpointError::Duplicate(t.name.clone()));
            }
            let data: Vec<f64> = words.by_ref().take(t.rows * t.cols).collect();
            let m = Matrix::from_shape_vec((t.rows, t.cols), data)
                .expect("length checked against manifest");
            tensors.push((t.name.clone(), m));
        }
        Ok(Self {
            tensors,
            metadata: manifest.metadata,
        })
    }

    /// Write `<stem>.json` and `<stem>.bin`.
    pub fn save(&self, stem: &Path) -> Result<(), CheckpointError> {
        let (manifest, blob) = self.encode();
        let json = stem.with_extension("json");
        let bin = stem.with_extension("bin");
        if let Some(dir) = stem.parent() {
            fs::create_dir_all(dir).map_err(|source| CheckpointError::Io {
                path: dir.to_path_buf(),
                source,
            })?;
        }
        fs::write(&bin, blob).map_err(|source| CheckpointError::Io { path: bin, source })?;
        fs::write(&json, manifest).map_err(|source| CheckpointError::Io { path: json, source })?;
        Ok(())
    }

    pub fn load(stem: &Path) -> Result<Self, CheckpointError> {
        let json = stem.with_extension("json");
        let bin = stem.with_extension("bin");
        let manifest = fs::read_to_string(&json).map_err(|source| CheckpointError::Io {
            path: json.clone(),
            source,
        })?;
        let blob = fs::read(&bin).map_err(|source| CheckpointError::Io { path: bin, source })?;
        Self::decode(&manifest, &blob)
    }
}
