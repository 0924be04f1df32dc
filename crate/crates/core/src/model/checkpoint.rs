//! Binary checkpoint container.
//!
//! ```text
//! "HRSG" | version u32 | config len u32 | config utf-8 | tensor count u32
//! per tensor: name len u32 | name utf-8 | ndim u32 | extents u32 * ndim | f32 payload
//! ```
//! All integers and floats are little-endian. The config text is the
//! `[model]` section optionally followed by other sections (training state,
//! normalization); tensors named `optim.*` carry optimizer state and are
//! ignored when building a model.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use super::config::ModelConfig;
use super::network::{build_model, Model};
use crate::error::{Error, Result};
use crate::keyval::Document;
use crate::nn::Parameterized;
use crate::tensor::Float;

pub const MAGIC: &[u8; 4] = b"HRSG";
pub const VERSION: u32 = 1;
pub const OPTIM_PREFIX: &str = "optim.";
const MAX_NDIM: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct StoredTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_text: String,
    pub tensors: Vec<StoredTensor>,
}

fn fmt_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(fmt_err(format!("truncated checkpoint while reading {what} at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let len = self.u32(what)? as usize;
        let bytes = self.take(len, what)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| fmt_err(format!("{what} is not valid UTF-8")))
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&u32::try_from(v).expect("length fits u32").to_le_bytes());
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let payload: usize = self.tensors.iter().map(|t| t.data.len() * 4 + t.name.len() + 32).sum();
        let mut out = Vec::with_capacity(payload + self.config_text.len() + 16);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_u32(&mut out, self.config_text.len());
        out.extend_from_slice(self.config_text.as_bytes());
        put_u32(&mut out, self.tensors.len());
        for t in &self.tensors {
            put_u32(&mut out, t.name.len());
            out.extend_from_slice(t.name.as_bytes());
            put_u32(&mut out, t.shape.len());
            for &d in &t.shape {
                put_u32(&mut out, d);
            }
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Parses a container. Never allocates more than the input can back.
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(fmt_err("bad magic: not an HRSG checkpoint"));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(fmt_err(format!("unsupported checkpoint version {version} (expected {VERSION})")));
        }
        let config_text = r.string("config")?;
        let count = r.u32("tensor count")? as usize;
        // Smallest possible tensor record is 8 bytes.
        if count > r.remaining() / 8 {
            return Err(fmt_err(format!("tensor count {count} exceeds the remaining data")));
        }
        let mut tensors = Vec::with_capacity(count);
        for i in 0..count {
            let name = r.string(&format!("name of tensor {i}"))?;
            let ndim = r.u32(&format!("ndim of '{name}'"))? as usize;
            if ndim == 0 || ndim > MAX_NDIM {
                return Err(fmt_err(format!("tensor '{name}' has unsupported rank {ndim}")));
            }
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u32(&format!("extents of '{name}'"))? as usize);
            }
            let bytes_needed = shape
                .iter()
                .try_fold(4usize, |acc, &d| acc.checked_mul(d))
                .filter(|&n| n <= r.remaining())
                .ok_or_else(|| fmt_err(format!("truncated checkpoint: payload of '{name}' {shape:?} is incomplete")))?;
            let data = r
                .take(bytes_needed, &name)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            if tensors.iter().any(|t: &StoredTensor| t.name == name) {
                return Err(fmt_err(format!("duplicate tensor '{name}'")));
            }
            tensors.push(StoredTensor { name, shape, data });
        }
        if r.remaining() != 0 {
            return Err(fmt_err(format!("{} trailing bytes after the last tensor", r.remaining())));
        }
        Ok(Checkpoint { config_text, tensors })
    }

    /// Captures a model. `extra_text` is appended after the `[model]` section.
    pub fn from_model<T: Float>(model: &mut Model<T>, extra_text: &str) -> Self {
        let mut config_text = model.config().to_text();
        config_text.push_str(extra_text);
        let tensors = model
            .tensors()
            .into_iter()
            .map(|(name, shape, values)| StoredTensor {
                name,
                shape,
                data: values.into_iter().map(|v| v.to_f64_lossy() as f32).collect(),
            })
            .collect();
        Checkpoint { config_text, tensors }
    }

    /// The stored `[model]` section. Other sections are left unread.
    pub fn model_config(&self) -> Result<ModelConfig> {
        let mut doc = Document::parse(&self.config_text)?;
        ModelConfig::from_document(&mut doc)
    }

    pub fn tensor(&self, name: &str) -> Option<&StoredTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    /// Builds a model from the stored config, or from `expect` when given,
    /// and fills it from the stored tensors. Any disagreement between the
    /// config's registry and the stored tensors is an integrity error naming
    /// the first offending tensor in registry order.
    pub fn to_model<T: Float>(&self, expect: Option<&ModelConfig>) -> Result<Model<T>> {
        let config = match expect {
            Some(c) => c.clone(),
            None => self.model_config()?,
        };
        let mut model: Model<T> = build_model(&config, 0)?;
        let stored: HashMap<&str, &StoredTensor> = self
            .tensors
            .iter()
            .filter(|t| !t.name.starts_with(OPTIM_PREFIX))
            .map(|t| (t.name.as_str(), t))
            .collect();
        let mut first_err: Option<Error> = None;
        let mut used = 0usize;
        model.visit_params("", &mut |p| {
            if first_err.is_some() {
                return;
            }
            match stored.get(p.name.as_str()) {
                None => first_err = Some(Error::Integrity(format!("tensor '{}' missing from checkpoint", p.name))),
                Some(t) if t.shape != p.shape => {
                    first_err = Some(Error::Integrity(format!(
                        "tensor '{}' has shape {:?} in checkpoint but the config requires {:?}",
                        p.name, t.shape, p.shape
                    )))
                }
                Some(t) => {
                    used += 1;
                    for (d, &s) in p.value.iter_mut().zip(&t.data) {
                        *d = T::from_f64_lossy(s as f64);
                    }
                }
            }
        });
        if let Some(e) = first_err {
            return Err(e);
        }
        if used != stored.len() {
            let mut names = Vec::new();
            model.visit_params("", &mut |p| names.push(p.name));
            let extra = self
                .tensors
                .iter()
                .find(|t| !t.name.starts_with(OPTIM_PREFIX) && !names.contains(&t.name))
                .map(|t| t.name.clone())
                .unwrap_or_default();
            return Err(Error::Integrity(format!("tensor '{extra}' in checkpoint is not part of the model")));
        }
        Ok(model)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}

pub fn save_checkpoint<T: Float>(model: &mut Model<T>, path: &Path) -> Result<()> {
    Checkpoint::from_model(model, "").write(path)
}

pub fn load_checkpoint<T: Float>(path: &Path) -> Result<Model<T>> {
    Checkpoint::read(path)?.to_model(None)
}

/// Loads a checkpoint into a model built from `config` rather than the stored one.
pub fn load_checkpoint_as<T: Float>(path: &Path, config: &ModelConfig) -> Result<Model<T>> {
    Checkpoint::read(path)?.to_model(Some(config))
}
