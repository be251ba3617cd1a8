//! One TOML file configures every stage; absent keys fall back to the
//! documented defaults, so an empty file is a valid configuration.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::VehicleParams;
use crate::features::FeatureConfig;
use crate::metrics::MetricsConfig;
use crate::mpc::PlannerConfig;
use crate::potential::PotentialConfig;
use crate::scene::ExtractConfig;
use crate::synthetic::GeneratorConfig;
use crate::training::{EvalConfig, SampleConfig, TrainingConfig};
use crate::transformer::ModelConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config io: {0}")]
    Io(#[from] std::io::Error),
    #[error("config parse: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("config serialize: {0}")]
    Serialize(#[from] toml::ser::Error),
    #[error("config invalid: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct AppConfig {
    pub model: ModelConfig,
    pub training: TrainingConfig,
    pub samples: SampleConfig,
    pub eval: EvalConfig,
    pub generator: GeneratorConfig,
    pub features: FeatureConfig,
    pub potential: PotentialConfig,
    pub planner: PlannerConfig,
    pub vehicle: VehicleParams,
    pub metrics: MetricsConfig,
    pub extract: ExtractConfig,
}

impl AppConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)?;
        let cfg: AppConfig = toml::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.model
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.potential
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String, ConfigError> {
        Ok(toml::to_string_pretty(self)?)
    }
}
