//! JSON checkpoints: the config plus every named parameter tensor.
//!
//! Floats are written in shortest round-trip form, so a restored model is
//! bit-identical to the saved one.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sparsegrad::Tensor64;

use crate::config::ExperimentConfig;
use crate::data::Dataset;
use crate::error::{ExperimentError, Result};
use crate::model::{build_model, Model};

pub const CHECKPOINT_FORMAT: &str = "sparsegrad-checkpoint/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Running `(mean, variance)` of one channel layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct Checkpoint {
    pub format: String,
    pub config: ExperimentConfig,
    pub tensors: Vec<NamedTensor>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub running_stats: Vec<LayerStats>,
}

impl Checkpoint {
    pub fn from_model(config: &ExperimentConfig, model: &Model) -> Self {
        let tensors = model
            .params()
            .named()
            .map(|(name, t)| NamedTensor { name: name.to_string(), shape: t.shape().to_vec(), data: t.data().to_vec() })
            .collect();
        let running_stats = match model {
            Model::Channel(net) => {
                net.running_stats().into_iter().map(|(mean, var)| LayerStats { mean, var }).collect()
            }
            _ => Vec::new(),
        };
        Checkpoint { format: CHECKPOINT_FORMAT.to_string(), config: config.clone(), tensors, running_stats }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string(self)? + "\n").map_err(|e| ExperimentError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| ExperimentError::io(path, e))?;
        let c: Checkpoint = serde_json::from_str(&text)?;
        if c.format != CHECKPOINT_FORMAT {
            return Err(ExperimentError::Config(format!("unsupported checkpoint format `{}`", c.format)));
        }
        Ok(c)
    }

    /// Rebuild the model for `data` and load the saved values into it.
    pub fn restore(&self, data: &Dataset) -> Result<Model> {
        let mut model = build_model(&self.config, data)?;
        let params = model.params_mut();
        if params.len() != self.tensors.len() {
            return Err(ExperimentError::Config(format!(
                "checkpoint has {} tensors, model has {}",
                self.tensors.len(),
                params.len()
            )));
        }
        for t in &self.tensors {
            let id = params
                .find(&t.name)
                .ok_or_else(|| ExperimentError::Config(format!("model has no parameter `{}`", t.name)))?;
            params.set(id, Tensor64::new(t.shape.clone(), t.data.clone())?)?;
        }
        if let Model::Channel(net) = &mut model {
            net.set_running_stats(self.running_stats.iter().map(|s| (s.mean.clone(), s.var.clone())).collect())?;
        }
        Ok(model)
    }
}
