use serde::{Deserialize, Serialize};

use crate::error::{Result, SifmError};
use crate::fusion::FusionConfig;
use crate::icegrid::Granularity;
use crate::spatialcodec::CodecConfig;

/// Which granularities a model sees and predicts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GranularityMode {
    Multi,
    DailyOnly,
    WeeklyOnly,
    MonthlyOnly,
}

impl GranularityMode {
    pub const ALL: [GranularityMode; 4] =
        [GranularityMode::Multi, GranularityMode::DailyOnly, GranularityMode::WeeklyOnly, GranularityMode::MonthlyOnly];

    pub fn active(self) -> &'static [Granularity] {
        match self {
            GranularityMode::Multi => &Granularity::ALL,
            GranularityMode::DailyOnly => &[Granularity::Daily],
            GranularityMode::WeeklyOnly => &[Granularity::Weekly],
            GranularityMode::MonthlyOnly => &[Granularity::Monthly],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            GranularityMode::Multi => "multi",
            GranularityMode::DailyOnly => "daily_only",
            GranularityMode::WeeklyOnly => "weekly_only",
            GranularityMode::MonthlyOnly => "monthly_only",
        }
    }
}

/// Architecture of one forecasting model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub height: usize,
    pub width: usize,
    pub mode: GranularityMode,
    pub codec: CodecConfig,
    pub fusion: FusionConfig,
}

impl ModelConfig {
    pub fn new(height: usize, width: usize, codec: CodecConfig, fusion: FusionConfig) -> Self {
        Self { height, width, mode: GranularityMode::Multi, codec, fusion }
    }

    pub fn validate(&self) -> Result<()> {
        self.codec.validate()?;
        self.codec.validate_grid(self.height, self.width)?;
        self.fusion.validate(self.codec.token_dim)
    }

    /// The tiny configuration used for end-to-end gradient checks: 8×8
    /// grids, 8-wide tokens, 16-wide fusion. A window of 2 keeps one shifted
    /// (masked) stage in the 8×8 pipeline.
    pub fn micro() -> Self {
        Self::new(
            8,
            8,
            CodecConfig { attn_window: 2, token_dim: 8, ..CodecConfig::default() },
            FusionConfig { d_model: 16, num_heads: 4, ..FusionConfig::default() },
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub rng_seed: u64,
    pub granularity_mode: GranularityMode,
    pub early_stop_patience: usize,
    /// Days between consecutive sample anchors.
    pub anchor_stride: usize,
    /// Use at most this many training anchors per epoch (0 = all), drawn
    /// afresh each epoch from the shuffled training set.
    pub max_train_samples: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 4,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            rng_seed: 42,
            granularity_mode: GranularityMode::Multi,
            early_stop_patience: 10,
            anchor_stride: crate::icegrid::ANCHOR_STRIDE,
            max_train_samples: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, why: &str| Err(SifmError::Config(format!("train.{field} {why}")));
        if self.epochs == 0 {
            return bad("epochs", "must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be at least 1");
        }
        if !(self.lr > 0.0) {
            return bad("lr", "must be positive");
        }
        if !(self.beta1 > 0.0 && self.beta1 < 1.0) {
            return bad("beta1", "must lie in (0, 1)");
        }
        if !(self.beta2 > 0.0 && self.beta2 < 1.0) {
            return bad("beta2", "must lie in (0, 1)");
        }
        if !(self.eps >= 0.0) {
            return bad("eps", "must be non-negative");
        }
        if self.early_stop_patience == 0 {
            return bad("early_stop_patience", "must be at least 1");
        }
        if self.anchor_stride == 0 {
            return bad("anchor_stride", "must be at least 1");
        }
        Ok(())
    }
}
