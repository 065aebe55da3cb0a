use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Result, SifmError};
use crate::fusion::FusionConfig;
use crate::icegrid::SynthConfig;
use crate::spatialcodec::CodecConfig;
use crate::trainer::{ModelConfig, TrainConfig};

/// File locations used when the command line does not name them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub data: PathBuf,
    pub checkpoint: PathBuf,
    pub out_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self { data: "data.sicg".into(), checkpoint: "model.sifm".into(), out_dir: "out".into() }
    }
}

/// Everything a command may need, read from one TOML document with the
/// sections `[synth]`, `[codec]`, `[fusion]`, `[train]` and `[paths]`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub synth: SynthConfig,
    pub codec: CodecConfig,
    pub fusion: FusionConfig,
    pub train: TrainConfig,
    pub paths: PathsConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| SifmError::Config(e.message().trim().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| SifmError::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.codec.validate()?;
        self.fusion.validate(self.codec.token_dim)?;
        self.train.validate()
    }

    /// Overrides both the data and the training seed.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.synth.rng_seed = seed;
        self.train.rng_seed = seed;
        self
    }

    /// Model for grids of the given size.
    pub fn model(&self, height: usize, width: usize) -> Result<ModelConfig> {
        let mut m = ModelConfig::new(height, width, self.codec.clone(), self.fusion.clone());
        m.mode = self.train.granularity_mode;
        m.validate()?;
        Ok(m)
    }
}
