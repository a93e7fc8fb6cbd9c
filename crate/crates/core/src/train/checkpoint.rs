use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::autodiff::Tensor;
use crate::models::{Model, ModelConfig};
use crate::rollout::RolloutConfig;

pub const CHECKPOINT_FORMAT: u32 = 1;
pub const CHECKPOINT_FILE: &str = "checkpoint.json";

/// Named parameter tensors with everything needed to rebuild the predictor.
/// Floats are written with shortest round-trip formatting, so loading gives
/// bit-identical parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: u32,
    pub model: ModelConfig,
    pub rollout: RolloutConfig,
    pub epoch: usize,
    pub valid_mse: f64,
    pub tensors: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn new(model: &Model, rollout: &RolloutConfig, epoch: usize, valid_mse: f64) -> Self {
        Self {
            format: CHECKPOINT_FORMAT,
            model: model.config().clone(),
            rollout: rollout.clone(),
            epoch,
            valid_mse,
            tensors: model.named_tensors(),
        }
    }

    pub fn to_model(&self) -> Result<Model, TrainError> {
        Ok(Model::from_named_tensors(self.model.clone(), &self.tensors)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), TrainError> {
        let json = serde_json::to_string(self)?;
        fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, TrainError> {
        let text = fs::read_to_string(path)?;
        let ck: Checkpoint = serde_json::from_str(&text)?;
        if ck.format != CHECKPOINT_FORMAT {
            return Err(TrainError::Config(format!("unsupported checkpoint format {}", ck.format)));
        }
        Ok(ck)
    }
}
