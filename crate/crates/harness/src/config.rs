//! Run configuration, read from TOML or JSON.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tta_core::fusion::FusionConfig;
use tta_core::imaging::VisibilityConfig;
use tta_core::mean_teacher::MtConfig;
use tta_core::pipeline::{ChannelRole, ChannelSpec, EnsembleSchedule, PipelineConfig};

use crate::error::{read_string, HarnessError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelEntry {
    pub name: String,
    pub role: ChannelRole,
}

fn default_classes() -> usize {
    1
}

fn default_true() -> bool {
    true
}

fn default_max_dets() -> usize {
    tta_core::evaluation::DEFAULT_MAX_DETS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub manifest: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub discriminator: Option<PathBuf>,
    #[serde(default = "default_classes")]
    pub num_classes: usize,
    #[serde(default = "default_true")]
    pub night_routing: bool,
    #[serde(default)]
    pub seed: u64,
    pub channels: Vec<ChannelEntry>,
    #[serde(default)]
    pub fusion: FusionConfig,
    #[serde(default)]
    pub visibility: VisibilityConfig,
    #[serde(default)]
    pub mean_teacher: MtConfig,
    #[serde(default)]
    pub schedule: EnsembleSchedule,
    #[serde(default = "default_max_dets")]
    pub max_dets: usize,
}

impl RunConfig {
    /// Reads `path`; `.json` files are JSON, anything else TOML. Relative
    /// paths are resolved against the config file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = read_string(path)?;
        let mut cfg: RunConfig = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| HarnessError::Parse { path: path.into(), line: e.line(), message: e.to_string() })?
        } else {
            toml::from_str(&text).map_err(|e| HarnessError::config(path, e.message().to_string()))?
        };
        let root = path.parent().unwrap_or(Path::new(""));
        cfg.manifest = root.join(&cfg.manifest);
        cfg.discriminator = cfg.discriminator.map(|d| root.join(d));
        Ok(cfg)
    }

    pub fn pipeline_config(&self) -> PipelineConfig {
        PipelineConfig {
            num_classes: self.num_classes,
            night_routing: self.night_routing,
            seed: self.seed,
            fusion: self.fusion,
            visibility: self.visibility,
            mean_teacher: self.mean_teacher,
            schedule: self.schedule,
        }
    }

    /// Channel specs with ids assigned in declaration order.
    pub fn channel_specs(&self) -> Result<Vec<ChannelSpec>> {
        if self.channels.len() > u16::MAX as usize {
            return Err(HarnessError::Invalid("too many channels".into()));
        }
        Ok(self.channels.iter().enumerate().map(|(i, c)| ChannelSpec::new(i as u16, c.name.clone(), c.role)).collect())
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }
}
