use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::SicSeries;
use crate::error::{Result, SifmError};

/// Parameters of the synthetic pan-Arctic-like generator: a latitude-like
/// gradient, an annual cycle, a linear trend and white noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub height: usize,
    pub width: usize,
    pub num_days: usize,
    pub seasonal_amplitude: f64,
    pub period_days: f64,
    /// Signed change per day; negative values give a declining ice cover.
    pub linear_trend_per_day: f64,
    pub noise_std: f64,
    pub spatial_gradient_strength: f64,
    pub rng_seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            num_days: 3650,
            seasonal_amplitude: 0.3,
            period_days: 365.0,
            linear_trend_per_day: -2e-5,
            noise_std: 0.05,
            spatial_gradient_strength: 1.0,
            rng_seed: 42,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, why: &str| Err(SifmError::Config(format!("synth.{field} {why}")));
        if self.height == 0 {
            return bad("height", "must be positive");
        }
        if self.width == 0 {
            return bad("width", "must be positive");
        }
        if self.num_days == 0 {
            return bad("num_days", "must be at least 1");
        }
        if !(self.seasonal_amplitude >= 0.0) {
            return bad("seasonal_amplitude", "must be non-negative");
        }
        if !(self.period_days >= 2.0) {
            return bad("period_days", "must be at least 2");
        }
        if !self.linear_trend_per_day.is_finite() {
            return bad("linear_trend_per_day", "must be finite");
        }
        if !(self.noise_std >= 0.0) {
            return bad("noise_std", "must be non-negative");
        }
        if !(self.spatial_gradient_strength >= 0.0) {
            return bad("spatial_gradient_strength", "must be non-negative");
        }
        Ok(())
    }

    /// Noise-free value before clamping at row `y` and day `t`.
    pub fn base(&self, y: usize) -> f64 {
        let lat = if self.height > 1 { y as f64 / (self.height - 1) as f64 } else { 0.5 };
        0.5 + self.spatial_gradient_strength * (0.5 - lat)
    }

    pub fn signal(&self, y: usize, t: i64) -> f64 {
        let phase = 2.0 * std::f64::consts::PI * t as f64 / self.period_days;
        self.base(y) + self.seasonal_amplitude * phase.cos() + self.linear_trend_per_day * t as f64
    }
}

/// Deterministic synthetic series for days `0..num_days`.
pub fn synth_generate(cfg: &SynthConfig) -> Result<SicSeries> {
    cfg.validate()?;
    let (h, w) = (cfg.height, cfg.width);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let noise = Normal::new(0.0, cfg.noise_std).map_err(|e| SifmError::Config(format!("synth.noise_std: {e}")))?;
    let mut data = Vec::with_capacity(cfg.num_days * h * w);
    for t in 0..cfg.num_days as i64 {
        for y in 0..h {
            let s = cfg.signal(y, t);
            for _ in 0..w {
                let eps = if cfg.noise_std > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                data.push((s + eps).clamp(0.0, 1.0) as f32);
            }
        }
    }
    SicSeries::new(h, w, 0, data, None)
}
