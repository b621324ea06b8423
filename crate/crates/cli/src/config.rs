//! Merged run configuration for the gen-data/train/eval commands.

use icam_core::baselines::BaselineTrainConfig;
use icam_core::nets::ModelConfig;
use icam_core::synthdata::PhantomConfig;
use icam_core::trainer::TrainConfig;
use icam_core::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

/// One configuration file drives a whole run: dataset generation, model
/// shape, both training phases, and the baseline classifier. Every section
/// falls back to its module's defaults; unknown keys are rejected. TOML and
/// JSON are accepted (decided by file extension).
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Master seed for dataset generation and evaluation-time sampling
    /// (model initialization and training draws have their own seeds in the
    /// `model` and `train` sections).
    pub seed: u64,
    pub data: PhantomConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub baseline: BaselineTrainConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)?;
        let is_toml = path.extension().and_then(|e| e.to_str()) == Some("toml");
        let config: RunConfig = if is_toml {
            toml::from_str(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        } else {
            serde_json::from_str(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        };
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.baseline.validate()?;
        if self.model.image_height != self.data.image_size
            || self.model.image_width != self.data.image_size
        {
            return Err(Error::Config(format!(
                "model expects {}×{} inputs but the data section generates {}×{} images",
                self.model.image_height,
                self.model.image_width,
                self.data.image_size,
                self.data.image_size
            )));
        }
        Ok(())
    }

    /// Hash of the canonical JSON form, recorded in run manifests.
    pub fn sha256(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }
}
