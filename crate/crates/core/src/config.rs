//! TOML run configuration.
//!
//! ```toml
//! [train]
//! learning_rate = 1e-4
//! max_epochs = 100
//! variant = "full"
//!
//! [train.loss_weights]
//! alpha = 0.05
//!
//! [probe]
//! epochs = 100
//!
//! [synth]
//! d = 64
//! d_c = 8
//! ```
//!
//! Every field is optional and defaults to the library default; unknown
//! fields are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synthgen::BenchmarkConfig;
use crate::trainer::{ProbeConfig, TrainConfig};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub probe: ProbeConfig,
    pub synth: BenchmarkConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }
}
