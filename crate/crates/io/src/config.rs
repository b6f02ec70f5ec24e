//! JSON configuration files.

use std::path::Path;

use hnfnet::network::{CascadeConfig, NetConfig};
use hnfnet::PipelineConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{IoError, IoResult};
use crate::fsutil::read_json;

/// `{ "single": NetConfig?, "cascade": CascadeConfig?, "pipeline": PipelineConfig? }`
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    #[serde(default)]
    pub single: Option<NetConfig>,
    #[serde(default)]
    pub cascade: Option<CascadeConfig>,
    #[serde(default)]
    pub pipeline: PipelineConfig,
}

/// Which network a weight file belongs to.
#[derive(Debug, Clone, PartialEq)]
pub enum ModelConfig {
    Single(NetConfig),
    Cascade(CascadeConfig),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Family {
    Single,
    Cascade,
}

impl Family {
    pub fn name(self) -> &'static str {
        match self {
            Family::Single => "single",
            Family::Cascade => "cascade",
        }
    }
}

impl ModelConfig {
    pub fn family(&self) -> Family {
        match self {
            ModelConfig::Single(_) => Family::Single,
            ModelConfig::Cascade(_) => Family::Cascade,
        }
    }

    /// Hex SHA-256 of the compact JSON encoding.
    pub fn hash(&self) -> String {
        let bytes = match self {
            ModelConfig::Single(c) => serde_json::to_vec(c),
            ModelConfig::Cascade(c) => serde_json::to_vec(c),
        }
        .expect("configs serialize");
        Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
    }
}

impl ConfigFile {
    pub fn read(path: &Path) -> IoResult<Self> {
        let cfg: ConfigFile = read_json(path)?;
        if cfg.single.is_none() && cfg.cascade.is_none() {
            return Err(IoError::format(path, "config needs a `single` or `cascade` section"));
        }
        if let Some(s) = &cfg.single {
            s.validate()?;
        }
        if let Some(c) = &cfg.cascade {
            c.validate()?;
        }
        Ok(cfg)
    }

    /// The section for `family`, or the only section present when `None`.
    pub fn model(&self, family: Option<Family>, path: &Path) -> IoResult<ModelConfig> {
        match (family, &self.single, &self.cascade) {
            (Some(Family::Single) | None, Some(s), None) | (Some(Family::Single), Some(s), Some(_)) => {
                Ok(ModelConfig::Single(s.clone()))
            }
            (Some(Family::Cascade) | None, None, Some(c)) | (Some(Family::Cascade), Some(_), Some(c)) => {
                Ok(ModelConfig::Cascade(c.clone()))
            }
            (None, Some(_), Some(_)) => Err(IoError::Usage(format!(
                "{} has both single and cascade sections; pass --family",
                path.display()
            ))),
            (Some(f), _, _) => Err(IoError::format(path, format!("config has no `{}` section", f.name()))),
            (None, None, None) => unreachable!("checked on read"),
        }
    }
}
