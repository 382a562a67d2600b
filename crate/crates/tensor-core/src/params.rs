//! Named parameter collections and their on-disk checkpoint format.
//!
//! A checkpoint is a directory holding `manifest.json` plus one raw
//! little-endian f64 file per tensor, named after the tensor.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, TensorError};
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;
pub const DTYPE: &str = "f64-le";
const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ModelParams {
    tensors: BTreeMap<String, Tensor>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    dtype: String,
    tensors: Vec<TensorEntry>,
    config: serde_json::Value,
}

fn valid_name(name: &str) -> bool {
    !name.is_empty()
        && !name.starts_with('.')
        && name != MANIFEST
        && name
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '.' | '_' | '-'))
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TensorError + '_ {
    move |source| TensorError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn ck_err(path: &Path, msg: impl Into<String>) -> TensorError {
    TensorError::Checkpoint {
        path: path.display().to_string(),
        msg: msg.into(),
    }
}

impl ModelParams {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, t: Tensor) -> Result<()> {
        if !valid_name(name) {
            return Err(TensorError::invalid("params", format!("bad tensor name {name:?}")));
        }
        self.tensors.insert(name.to_string(), t.with_grad(false));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| TensorError::invalid("params", format!("missing tensor {name:?}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| TensorError::invalid("params", format!("missing tensor {name:?}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.values().all(Tensor::is_finite)
    }

    /// Puts every tensor on the tape, differentiable when `requires_grad`.
    pub fn bind(&self, tape: &mut Tape, requires_grad: bool) -> BoundParams {
        let vars = self
            .tensors
            .iter()
            .map(|(k, t)| (k.clone(), tape.leaf(t.clone().with_grad(requires_grad))))
            .collect();
        BoundParams { vars }
    }

    pub fn save(&self, dir: &Path, config: &serde_json::Value) -> Result<()> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let mut entries = Vec::with_capacity(self.tensors.len());
        for (name, t) in &self.tensors {
            let path = dir.join(name);
            fs::write(&path, encode(t.data())).map_err(io_err(&path))?;
            entries.push(TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
            });
        }
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            dtype: DTYPE.to_string(),
            tensors: entries,
            config: config.clone(),
        };
        let path = dir.join(MANIFEST);
        let text = serde_json::to_string_pretty(&manifest).map_err(|e| ck_err(&path, e.to_string()))?;
        fs::write(&path, text + "\n").map_err(io_err(&path))
    }

    /// Loads a checkpoint, returning the parameters and the echoed config.
    pub fn load(dir: &Path) -> Result<(Self, serde_json::Value)> {
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| ck_err(&path, e.to_string()))?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(ck_err(&path, format!("unsupported format version {}", manifest.format_version)));
        }
        if manifest.dtype != DTYPE {
            return Err(ck_err(&path, format!("unsupported dtype {}", manifest.dtype)));
        }
        let mut params = ModelParams::new();
        for e in manifest.tensors {
            if !valid_name(&e.name) {
                return Err(ck_err(&path, format!("bad tensor name {:?}", e.name)));
            }
            let tp = dir.join(&e.name);
            let bytes = fs::read(&tp).map_err(io_err(&tp))?;
            let n: usize = e.shape.iter().product();
            if bytes.len() != n * 8 {
                return Err(ck_err(&tp, format!("expected {} bytes, found {}", n * 8, bytes.len())));
            }
            params.insert(&e.name, Tensor::new(e.shape, decode(&bytes))?)?;
        }
        Ok((params, manifest.config))
    }
}

fn encode(data: &[f64]) -> Vec<u8> {
    data.iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn decode(bytes: &[u8]) -> Vec<f64> {
    bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect()
}

/// Tape handles for a bound [`ModelParams`].
#[derive(Clone, Debug)]
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    /// Wraps existing tape handles, for callers that create the leaves themselves.
    pub fn from_vars(vars: impl IntoIterator<Item = (String, Var)>) -> Self {
        BoundParams {
            vars: vars.into_iter().collect(),
        }
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| TensorError::invalid("params", format!("missing tensor {name:?}")))
    }

    /// Gradients keyed by parameter name.
    pub fn grads(&self, grads: &Gradients) -> BTreeMap<String, Tensor> {
        self.vars
            .iter()
            .filter_map(|(k, v)| grads.get(*v).map(|g| (k.clone(), g.clone())))
            .collect()
    }
}
