//! Dataset, configuration and log persistence.

pub mod config;
pub mod demo;
pub mod primitives;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

pub use config::{load_config, save_config, PathsConfig, RunConfig, SessionConfig};
pub use demo::{macaw_primitives, DEMO_STEPS};
pub use primitives::{
    encode_primitives, load_primitives, save_primitives, Primitive, PrimitiveSet, CATEGORIES,
    SAMPLING_MS,
};

pub const FORMAT_VERSION: u32 = 1;

/// Sidecar written next to every persisted CSV.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArtifactMeta {
    pub format_version: u32,
    pub kind: String,
    pub config_hash: String,
}

impl ArtifactMeta {
    pub fn new(kind: &str, config_hash: &str) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            kind: kind.to_string(),
            config_hash: config_hash.to_string(),
        }
    }
}

pub fn meta_path(artifact: &Path) -> PathBuf {
    let mut name = artifact.file_name().unwrap_or_default().to_os_string();
    name.push(".meta.toml");
    artifact.with_file_name(name)
}

pub fn write_meta(artifact: &Path, meta: &ArtifactMeta) -> Result<()> {
    std::fs::write(meta_path(artifact), toml::to_string(meta)?)?;
    Ok(())
}

pub fn read_meta(artifact: &Path) -> Result<ArtifactMeta> {
    let meta: ArtifactMeta = toml::from_str(&std::fs::read_to_string(meta_path(artifact))?)?;
    if meta.format_version != FORMAT_VERSION {
        return Err(CoreError::Version {
            found: meta.format_version,
            expected: FORMAT_VERSION,
        });
    }
    Ok(meta)
}
