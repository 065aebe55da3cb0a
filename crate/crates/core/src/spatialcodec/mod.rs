//! Shared spatial encoder/decoder: one token per sea-ice frame and back.
//!
//! Feature maps live on the tape as `[frames, h, w, channels]`, so a whole
//! stack of frames goes through each layer in one call.

mod codec;
mod layers;
mod window;

#[cfg(test)]
mod tests;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SifmError};

pub use codec::{
    codec_param_specs, decode_frame, decode_frames, encode_frame, encode_frames, Encoded, SkipFeature, SpatialToken,
};
pub use layers::{decoder_head, patch_expand, patch_merge, patch_partition};
pub use window::{
    relative_position_index, shift_region_mask, stage_window, swin_block_pair, window_attention, window_partition_index,
    BlockPairOutput,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CodecConfig {
    pub patch_size: usize,
    pub stem_channels: usize,
    pub num_merge_stages: usize,
    pub attn_window: usize,
    /// Attention heads at the stem and after each merge stage.
    pub heads_per_stage: Vec<usize>,
    pub mlp_ratio: usize,
    pub token_dim: usize,
    pub ln_eps: f64,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            patch_size: 2,
            stem_channels: 32,
            num_merge_stages: 2,
            attn_window: 4,
            heads_per_stage: vec![2, 4, 8],
            mlp_ratio: 4,
            token_dim: 64,
            ln_eps: 1e-5,
        }
    }
}

impl CodecConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, why: String| Err(SifmError::Config(format!("codec.{field} {why}")));
        if self.patch_size != 2 {
            return bad("patch_size", format!("must be 2, got {}", self.patch_size));
        }
        if self.stem_channels == 0 {
            return bad("stem_channels", "must be positive".into());
        }
        if self.attn_window == 0 {
            return bad("attn_window", "must be positive".into());
        }
        if self.token_dim == 0 {
            return bad("token_dim", "must be at least 1".into());
        }
        if self.mlp_ratio == 0 {
            return bad("mlp_ratio", "must be positive".into());
        }
        if !(self.ln_eps > 0.0) {
            return bad("ln_eps", "must be positive".into());
        }
        if self.heads_per_stage.len() != self.num_merge_stages + 1 {
            return bad(
                "heads_per_stage",
                format!("needs {} entries for {} merge stages", self.num_merge_stages + 1, self.num_merge_stages),
            );
        }
        for (s, &h) in self.heads_per_stage.iter().enumerate() {
            let c = self.channels(s);
            if h == 0 || !c.is_multiple_of(h) {
                return bad("heads_per_stage", format!("entry {s} ({h}) must divide {c} channels"));
            }
        }
        Ok(())
    }

    /// Channels of the feature map after `stage` merges.
    pub fn channels(&self, stage: usize) -> usize {
        self.stem_channels << stage
    }

    /// `(h, w, c)` of the feature map after `stage` merges.
    pub fn stage_shape(&self, height: usize, width: usize, stage: usize) -> (usize, usize, usize) {
        let f = self.patch_size << stage;
        (height / f, width / f, self.channels(stage))
    }

    pub fn bottleneck_shape(&self, height: usize, width: usize) -> (usize, usize, usize) {
        self.stage_shape(height, width, self.num_merge_stages)
    }

    /// Checks that a `height × width` grid passes through every stage.
    pub fn validate_grid(&self, height: usize, width: usize) -> Result<()> {
        self.validate()?;
        let f = self.patch_size << self.num_merge_stages;
        if height == 0 || width == 0 || !height.is_multiple_of(f) || !width.is_multiple_of(f) {
            return Err(SifmError::Dimension(format!(
                "grid {height}x{width} must be a positive multiple of {f} in both axes for {} merge stages",
                self.num_merge_stages
            )));
        }
        for s in 0..=self.num_merge_stages {
            let (h, w, _) = self.stage_shape(height, width, s);
            stage_window(self.attn_window, h, w)?;
        }
        Ok(())
    }
}
