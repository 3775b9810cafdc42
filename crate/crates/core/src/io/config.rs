//! Run configuration: one TOML file with every tunable of a run.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::NetworkConfig;
use crate::deliberation::{DeliberationConfig, MixerConfig};
use crate::error::{CoreError, Result};
use crate::observer::ObserverConfig;
use crate::train::TrainSettings;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SessionConfig {
    /// Ticks per session.
    pub ticks: usize,
    pub tick_ms: u64,
    /// Trained primitive whose initial context starts the session; empty
    /// for the network's zero state.
    pub start_primitive: String,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            ticks: 2000,
            tick_ms: 100,
            start_primitive: "Head".into(),
        }
    }
}

/// Relative paths resolve against the configuration file's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    pub primitives: PathBuf,
    pub model: PathBuf,
    pub observer: PathBuf,
    /// Directory for reports, session logs and analysis output.
    pub output: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            primitives: "data/primitives".into(),
            model: "runs/model.ckpt".into(),
            observer: "runs/observer.ckpt".into(),
            output: "runs".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub network: NetworkConfig,
    pub train: TrainSettings,
    pub mixer: MixerConfig,
    pub deliberation: DeliberationConfig,
    pub observer: ObserverConfig,
    pub session: SessionConfig,
    pub paths: PathsConfig,
    #[serde(skip)]
    base_dir: PathBuf,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.train.validate()?;
        self.mixer.validate()?;
        self.deliberation.validate()?;
        self.observer.validate()?;
        if self.session.ticks == 0 || self.session.tick_ms == 0 {
            return Err(CoreError::Config("session ticks and tick_ms must be >= 1".into()));
        }
        if self.network.dof != 2 {
            return Err(CoreError::Config("the workspace has exactly 2 degrees of freedom".into()));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    /// Resolves a configured path against the configuration's directory.
    pub fn resolve(&self, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.base_dir.join(path)
        }
    }

    pub fn with_base_dir(mut self, dir: &Path) -> Self {
        self.base_dir = dir.to_path_buf();
        self
    }

    /// Hex SHA-256 of the canonical TOML rendering.
    pub fn hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_toml()?.as_bytes())))
    }
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CoreError::Config(format!("cannot read {}: {e}", path.display())))?;
    let cfg = RunConfig::from_toml(&text)?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let cfg = cfg.with_base_dir(&base);
    let primitives = cfg.resolve(&cfg.paths.primitives);
    if !primitives.is_dir() {
        return Err(CoreError::Config(format!(
            "primitive directory {} does not exist",
            primitives.display()
        )));
    }
    Ok(cfg)
}

pub fn save_config(cfg: &RunConfig, path: &Path) -> Result<()> {
    std::fs::write(path, cfg.to_toml()?)?;
    Ok(())
}
