//! Checkpoint files: a textual key-to-array map of every parameter plus the
//! optimizer moments, step count, and random-stream states. Loading one into
//! a trainer built from the same configuration resumes bit-exactly (JSON
//! round-trips `f64` losslessly).

use std::path::Path;

use pinda_core::train::TrainState;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointFile {
    pub version: u32,
    /// Hash of the experiment configuration that produced this state.
    pub config_hash: String,
    pub seed: u64,
    pub step: u64,
    pub epoch: usize,
    pub loss_history: Vec<f64>,
    /// Parameter name to flat values, in canonical registration order.
    pub params: Vec<(String, Vec<f64>)>,
    pub adam_m: Vec<Vec<f64>>,
    pub adam_v: Vec<Vec<f64>>,
    pub rng_shuffle: [u64; 4],
    pub rng_augpick: [u64; 4],
    pub rng_noise: [u64; 4],
}

impl CheckpointFile {
    pub fn from_state(state: TrainState, config_hash: String, seed: u64) -> Self {
        CheckpointFile {
            version: CHECKPOINT_VERSION,
            config_hash,
            seed,
            step: state.step,
            epoch: state.epoch,
            loss_history: state.loss_history,
            params: state.params,
            adam_m: state.adam_m,
            adam_v: state.adam_v,
            rng_shuffle: state.rng_shuffle,
            rng_augpick: state.rng_augpick,
            rng_noise: state.rng_noise,
        }
    }

    pub fn into_state(self) -> TrainState {
        TrainState {
            step: self.step,
            epoch: self.epoch,
            loss_history: self.loss_history,
            params: self.params,
            adam_m: self.adam_m,
            adam_v: self.adam_v,
            rng_shuffle: self.rng_shuffle,
            rng_augpick: self.rng_augpick,
            rng_noise: self.rng_noise,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string(self)
            .map_err(|e| CliError::Checkpoint(e.to_string()))?;
        std::fs::write(path, json)
            .map_err(|e| CliError::Checkpoint(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Checkpoint(format!("{}: {e}", path.display())))?;
        let file: CheckpointFile = serde_json::from_str(&text)
            .map_err(|e| CliError::Checkpoint(format!("{}: {e}", path.display())))?;
        if file.version != CHECKPOINT_VERSION {
            return Err(CliError::Checkpoint(format!(
                "unsupported checkpoint version {} (expected {CHECKPOINT_VERSION})",
                file.version
            )));
        }
        Ok(file)
    }
}
