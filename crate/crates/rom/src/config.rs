//! JSON configuration files. Missing keys take their defaults.

use std::path::Path;

use rom_core::model::ModelConfig;
use rom_core::optim::AdamConfig;
use rom_core::train::TrainConfig;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Model and optimization settings of a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    /// Desk-scale widths; the learning rate is raised to 1e-3 for the short
    /// runs this scale allows.
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::desk(),
            train: TrainConfig {
                adam: AdamConfig {
                    learning_rate: 1e-3,
                    ..AdamConfig::default()
                },
                ..TrainConfig::default()
            },
        }
    }
}

pub fn load_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

/// Reads `path`, or returns the default when no file is given.
pub fn load_or_default<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    path.map_or_else(|| Ok(T::default()), load_json)
}
