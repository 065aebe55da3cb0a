//! Multi-granularity fusion of spatial tokens.
//!
//! Each granularity's token sequence is flattened into one variate token;
//! attention runs across the variates. Two alternative backbones (attention
//! over temporal tokens, and an MLP mixer) share the same inputs and outputs.

mod attention;
mod backbone;


use serde::{Deserialize, Serialize};

use crate::error::{Result, SifmError};
use crate::icegrid::Granularity;

pub use attention::{encoder_layer, self_attention};
pub use backbone::{
    embed_variate, fuse_variates, fusion_forward, fusion_param_specs, mixer_fusion, predict_head, sequential_skip,
    temporal_fusion, SkipOutput,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backbone {
    Variate,
    Temporal,
    Mixer,
}

impl Backbone {
    pub const ALL: [Backbone; 3] = [Backbone::Variate, Backbone::Temporal, Backbone::Mixer];

    pub fn name(self) -> &'static str {
        match self {
            Backbone::Variate => "variate",
            Backbone::Temporal => "temporal",
            Backbone::Mixer => "mixer",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionConfig {
    pub d_model: usize,
    /// Use `7 · token_dim` (the daily sequence width) as the model width
    /// instead of `d_model`.
    pub align_to_daily: bool,
    pub num_layers: usize,
    pub num_heads: usize,
    /// FFN hidden width; 0 means `4 · width`.
    pub ffn_hidden: usize,
    pub backbone: Backbone,
    pub ln_eps: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            d_model: 128,
            align_to_daily: false,
            num_layers: 2,
            num_heads: 4,
            ffn_hidden: 0,
            backbone: Backbone::Variate,
            ln_eps: 1e-5,
        }
    }
}

impl FusionConfig {
    pub fn width(&self, token_dim: usize) -> usize {
        if self.align_to_daily {
            Granularity::Daily.steps() * token_dim
        } else {
            self.d_model
        }
    }

    pub fn ffn_width(&self, token_dim: usize) -> usize {
        if self.ffn_hidden == 0 {
            4 * self.width(token_dim)
        } else {
            self.ffn_hidden
        }
    }

    pub fn validate(&self, token_dim: usize) -> Result<()> {
        let bad = |field: &str, why: String| Err(SifmError::Config(format!("fusion.{field} {why}")));
        let d = self.width(token_dim);
        if d == 0 {
            return bad("d_model", "must be positive".into());
        }
        if self.num_heads == 0 || !d.is_multiple_of(self.num_heads) {
            return bad("num_heads", format!("({}) must divide model width {d}", self.num_heads));
        }
        if !(self.ln_eps > 0.0) {
            return bad("ln_eps", "must be positive".into());
        }
        Ok(())
    }
}
