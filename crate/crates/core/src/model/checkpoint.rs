//! Binary checkpoint layout, all integers little-endian u32:
//!
//! ```text
//! "CMCK" | version | config_len | config JSON (UTF-8)
//! tensor_count | per tensor: name_len | name | rank | dims... | f32 data
//! ```
//!
//! Trainable tensors come first in registration order, followed by the
//! running mean and variance of every batch-norm layer.

use std::path::{Path, PathBuf};

use thiserror::Error;

use super::{Model, ModelConfig};
use crate::tensor::{Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"CMCK";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("checkpoint truncated while reading {0}")]
    Truncated(String),
    #[error("invalid config record: {0}")]
    Config(String),
    #[error("checkpoint is missing parameter {0}")]
    MissingTensor(String),
    #[error("checkpoint has unexpected parameter {0}")]
    UnexpectedTensor(String),
    #[error("parameter {name}: checkpoint shape {found:?} does not match config shape {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("parameter {0} holds a non-finite value")]
    NonFinite(String),
    #[error("{0} unread bytes after the last tensor")]
    TrailingBytes(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub tensors: Vec<NamedTensor>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], CheckpointError> {
        if self.bytes.len() - self.pos < n {
            return Err(CheckpointError::Truncated(what.to_string()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

fn running_stats(model_bns: &[(&str, Vec<f64>, Vec<f64>)]) -> Vec<NamedTensor> {
    let mut out = Vec::new();
    for (prefix, mean, var) in model_bns {
        for (suffix, v) in [("running_mean", mean), ("running_var", var)] {
            out.push(NamedTensor {
                name: format!("{prefix}.{suffix}"),
                shape: vec![v.len()],
                data: v.iter().map(|&x| x as f32).collect(),
            });
        }
    }
    out
}

impl Checkpoint {
    pub fn from_model<T: Scalar>(model: &Model<T>) -> Self {
        let mut tensors: Vec<NamedTensor> = model
            .params
            .iter()
            .map(|(_, p)| NamedTensor {
                name: p.name.clone(),
                shape: p.tensor.shape().to_vec(),
                data: p.tensor.data().iter().map(|v| v.as_f64() as f32).collect(),
            })
            .collect();
        let bns: Vec<_> = model
            .batch_norms()
            .into_iter()
            .map(|(n, bn)| (n, bn.running_mean.clone(), bn.running_var.clone()))
            .collect();
        tensors.extend(running_stats(&bns));
        Self {
            config: model.config.clone(),
            tensors,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        let put = |out: &mut Vec<u8>, v: usize| out.extend_from_slice(&(v as u32).to_le_bytes());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let config = serde_json::to_vec(&self.config).expect("config serializes");
        put(&mut out, config.len());
        out.extend_from_slice(&config);
        put(&mut out, self.tensors.len());
        for t in &self.tensors {
            put(&mut out, t.name.len());
            out.extend_from_slice(t.name.as_bytes());
            put(&mut out, t.shape.len());
            for &d in &t.shape {
                put(&mut out, d);
            }
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic").map_err(|_| CheckpointError::BadMagic)? != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(CheckpointError::UnsupportedVersion(version));
        }
        let len = r.u32("config length")? as usize;
        let config: ModelConfig = serde_json::from_slice(r.take(len, "config")?)
            .map_err(|e| CheckpointError::Config(e.to_string()))?;
        config
            .validate()
            .map_err(|e| CheckpointError::Config(e.to_string()))?;
        let count = r.u32("tensor count")? as usize;
        let mut tensors = Vec::with_capacity(count.min(1024));
        for i in 0..count {
            let what = format!("tensor {i}");
            let n = r.u32(&what)? as usize;
            let name = String::from_utf8(r.take(n, &what)?.to_vec())
                .map_err(|_| CheckpointError::Config(format!("{what} name is not UTF-8")))?;
            let rank = r.u32(&name)? as usize;
            let shape = (0..rank)
                .map(|_| r.u32(&name).map(|d| d as usize))
                .collect::<Result<Vec<_>, _>>()?;
            let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let numel = numel.ok_or_else(|| CheckpointError::Truncated(name.clone()))?;
            let raw = r.take(numel.checked_mul(4).ok_or_else(|| CheckpointError::Truncated(name.clone()))?, &name)?;
            let data: Vec<f32> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push(NamedTensor { name, shape, data });
        }
        if r.pos != bytes.len() {
            return Err(CheckpointError::TrailingBytes(bytes.len() - r.pos));
        }
        Ok(Self { config, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CheckpointError> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }

    /// Rebuilds the model described by the config record and fills in every
    /// tensor, checking names and shapes against a fresh instance.
    pub fn to_model<T: Scalar>(&self) -> Result<Model<T>, CheckpointError> {
        let mut model =
            Model::<T>::new(self.config.clone(), 0).map_err(|e| CheckpointError::Config(e.to_string()))?;
        let template = Checkpoint::from_model(&model);
        let find = |name: &str| self.tensors.iter().find(|t| t.name == name);
        for t in &self.tensors {
            if !template.tensors.iter().any(|x| x.name == t.name) {
                return Err(CheckpointError::UnexpectedTensor(t.name.clone()));
            }
        }
        for want in &template.tensors {
            let got = find(&want.name).ok_or_else(|| CheckpointError::MissingTensor(want.name.clone()))?;
            if got.shape != want.shape {
                return Err(CheckpointError::ShapeMismatch {
                    name: want.name.clone(),
                    expected: want.shape.clone(),
                    found: got.shape.clone(),
                });
            }
            if got.data.iter().any(|v| !v.is_finite()) {
                return Err(CheckpointError::NonFinite(want.name.clone()));
            }
        }
        let ids: Vec<_> = model.params.ids().collect();
        for id in ids {
            let p = model.params.get_mut(id);
            let src = find(&p.name).expect("checked above");
            let values: Vec<T> = src.data.iter().map(|&v| T::from_f64(v as f64)).collect();
            p.tensor = Tensor::new(src.shape.clone(), values)
                .map_err(|_| CheckpointError::NonFinite(p.name.clone()))?
                .with_grad();
        }
        for (prefix, bn) in model.batch_norms_mut() {
            let get = |s: &str| -> Vec<f64> {
                find(&format!("{prefix}.{s}"))
                    .expect("checked above")
                    .data
                    .iter()
                    .map(|&v| v as f64)
                    .collect()
            };
            bn.running_mean = get("running_mean");
            bn.running_var = get("running_var");
        }
        Ok(model)
    }
}
