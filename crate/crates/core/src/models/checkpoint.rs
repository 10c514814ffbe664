//! Versioned JSON checkpoints. Parameters are stored as base64 of
//! little-endian 64-bit floats, so a save/load round trip is bit-exact.

use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::ctc::Vocab;
use crate::error::{Error, Result};
use crate::nn::ParamStore;

use super::{Config, Method, Model};

const FORMAT: &str = "nar-checkpoint";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredParam {
    pub name: String,
    pub shape: [usize; 2],
    pub dtype: String,
    pub data: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub method: Method,
    pub vocab_size: usize,
    pub feat_dim: usize,
    pub trained_steps: u64,
    pub config: Config,
    pub params: Vec<StoredParam>,
}

fn encode(values: &Array2<f64>) -> String {
    let mut bytes = Vec::with_capacity(values.len() * 8);
    for v in values.iter() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    B64.encode(bytes)
}

fn decode(p: &StoredParam) -> Result<Array2<f64>> {
    if p.dtype != "f64" {
        return Err(Error::Checkpoint(format!("{}: unsupported dtype {}", p.name, p.dtype)));
    }
    let bytes = B64
        .decode(&p.data)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", p.name)))?;
    let [rows, cols] = p.shape;
    if bytes.len() != rows * cols * 8 {
        return Err(Error::Checkpoint(format!(
            "{}: {} bytes for shape {rows}x{cols}",
            p.name,
            bytes.len()
        )));
    }
    let values = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Array2::from_shape_vec((rows, cols), values).map_err(|e| Error::Checkpoint(e.to_string()))
}

impl Checkpoint {
    pub fn from_model(model: &Model, trained_steps: u64) -> Self {
        Checkpoint {
            format: FORMAT.into(),
            version: VERSION,
            method: model.method,
            vocab_size: model.vocab.size,
            feat_dim: model.feat_dim,
            trained_steps,
            config: model.config.clone(),
            params: model
                .store
                .iter()
                .map(|(name, v)| StoredParam {
                    name: name.to_string(),
                    shape: [v.nrows(), v.ncols()],
                    dtype: "f64".into(),
                    data: encode(v),
                })
                .collect(),
        }
    }

    /// Rebuilds the model and fills in every stored parameter.
    pub fn into_model(self) -> Result<Model> {
        if self.format != FORMAT {
            return Err(Error::Checkpoint(format!("unknown format {:?}", self.format)));
        }
        if self.version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {}", self.version)));
        }
        let mut model = Model::new(self.method, self.config, Vocab::new(self.vocab_size)?, self.feat_dim)?;
        if self.params.len() != model.store.len() {
            return Err(Error::Checkpoint(format!(
                "{} stored parameters, model has {}",
                self.params.len(),
                model.store.len()
            )));
        }
        for p in &self.params {
            model
                .store
                .set(&p.name, decode(p)?)
                .map_err(|e| Error::Checkpoint(e.to_string()))?;
        }
        Ok(model)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string(self).map_err(|e| Error::json("checkpoint", e))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()? + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))
    }
}

/// Element-wise mean of parameter stores with identical names and shapes.
pub fn average_checkpoints(stores: &[ParamStore]) -> Result<ParamStore> {
    let Some(first) = stores.first() else {
        return Err(Error::invalid("nothing to average"));
    };
    let mut out = first.clone();
    for other in &stores[1..] {
        if other.len() != first.len() {
            return Err(Error::shape("checkpoints differ in parameter count"));
        }
        for id in first.ids() {
            let (a, b) = (first.value(id), other.value(id));
            if first.name(id) != other.name(id) || a.raw_dim() != b.raw_dim() {
                return Err(Error::shape(format!("parameter {} differs between checkpoints", first.name(id))));
            }
            *out.value_mut(id) += b;
        }
    }
    let n = stores.len() as f64;
    for id in first.ids() {
        out.value_mut(id).mapv_inplace(|v| v / n);
    }
    Ok(out)
}
