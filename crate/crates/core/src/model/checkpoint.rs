//! JSON checkpoint container.
//!
//! ```text
//! {
//!   "format": "pesd-checkpoint",
//!   "version": 1,
//!   "config": { ...model configuration... },
//!   "scaler": { "mean": [...], "std": [...] } | null,
//!   "channel_names": [...],
//!   "freq": "1h" | null,
//!   "params": [ { "name": "patch.w", "shape": [16, 64], "data": [...] }, ... ]
//! }
//! ```
//!
//! `data` is row-major. Floats are written in shortest round-trip form, so
//! a save/load cycle is bit-exact.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig};
use crate::data::Scaler;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const CHECKPOINT_FORMAT: &str = "pesd-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ParamRecord {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    version: u32,
    config: ModelConfig,
    scaler: Option<Scaler>,
    #[serde(default)]
    channel_names: Vec<String>,
    freq: Option<String>,
    params: Vec<ParamRecord>,
}

/// A model plus the data-side context needed to apply it.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub scaler: Option<Scaler>,
    pub channel_names: Vec<String>,
    pub freq: Option<String>,
}

impl Checkpoint {
    pub fn new(model: Model) -> Self {
        Checkpoint {
            model,
            scaler: None,
            channel_names: Vec::new(),
            freq: None,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let file = CheckpointFile {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config: self.model.config.clone(),
            scaler: self.scaler.clone(),
            channel_names: self.channel_names.clone(),
            freq: self.freq.clone(),
            params: self
                .model
                .params
                .iter()
                .map(|(name, t)| ParamRecord {
                    name: name.to_string(),
                    shape: t.shape().to_vec(),
                    data: t.data().to_vec(),
                })
                .collect(),
        };
        Ok(serde_json::to_string(&file)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let file: CheckpointFile = serde_json::from_str(s)?;
        if file.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!("unknown format '{}'", file.format)));
        }
        if file.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported version {} (expected {CHECKPOINT_VERSION})",
                file.version
            )));
        }
        file.config.validate()?;
        // The freshly initialized model fixes which names and shapes are
        // expected; the file must provide exactly those.
        let template = Model::new(file.config.clone(), 0)?;
        let mut params = ParamStore::new();
        for rec in file.params {
            let want = template.params.get(&rec.name)?;
            if want.shape() != rec.shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "parameter '{}' has shape {:?}, expected {:?}",
                    rec.name,
                    rec.shape,
                    want.shape()
                )));
            }
            let t = Tensor::new(rec.shape, rec.data).map_err(|e| Error::Checkpoint(format!("{}: {e}", rec.name)))?;
            params.insert(rec.name, t);
        }
        if let Some(missing) = template.params.names().iter().find(|n| !params.contains(n)) {
            return Err(Error::Checkpoint(format!("missing parameter '{missing}'")));
        }
        Ok(Checkpoint {
            model: Model {
                config: file.config,
                params,
            },
            scaler: file.scaler,
            channel_names: file.channel_names,
            freq: file.freq,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}
