//! Sea-ice concentration grids and series, the SICG file format, synthetic
//! data, and daily-to-weekly-to-monthly aggregation.

mod aggregate;
mod format;
mod sample;
mod synth;

pub use aggregate::{aggregate, aggregate_monthly, aggregate_weekly};
pub use format::{load_grid_file, read_series, save_grid_file, write_series, SICG_MAGIC, SICG_VERSION};
pub use sample::{
    chronological_split, make_inputs, make_sample, valid_anchors, GranularSet, MultiGranularitySample, SampleSplit, ANCHOR_STRIDE,
};
pub use synth::{synth_generate, SynthConfig};

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Result, SifmError};

/// Temporal resolution of a sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    Daily,
    Weekly,
    Monthly,
}

impl Granularity {
    pub const ALL: [Granularity; 3] = [Granularity::Daily, Granularity::Weekly, Granularity::Monthly];

    /// Days averaged into one step.
    pub fn block_days(self) -> usize {
        match self {
            Granularity::Daily => 1,
            Granularity::Weekly => 7,
            Granularity::Monthly => 30,
        }
    }

    /// Input length, which equals the number of forecast lead steps.
    pub fn steps(self) -> usize {
        match self {
            Granularity::Daily => 7,
            Granularity::Weekly => 8,
            Granularity::Monthly => 6,
        }
    }

    /// Days spanned by one input (or target) window.
    pub fn span_days(self) -> usize {
        self.block_days() * self.steps()
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Granularity::Daily => "daily",
            Granularity::Weekly => "weekly",
            Granularity::Monthly => "monthly",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|g| g.name() == s)
    }
}

/// Largest window any sample needs on either side of its anchor.
pub const MAX_SPAN_DAYS: usize = 180;

/// One H×W concentration field, stored as fractions in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SicGrid {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl SicGrid {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || values.len() != height * width {
            return dim_err(format!("grid {height}x{width} given {} values", values.len()));
        }
        Ok(Self { height, width, values })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self { height, width, values: vec![value; height * width] }
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.width + x]
    }

    /// Copy with every value clamped into `[0, 1]`.
    pub fn clamped(&self) -> Self {
        Self { values: self.values.iter().map(|v| v.clamp(0.0, 1.0)).collect(), ..*self }
    }

    pub fn in_unit_range(&self) -> bool {
        self.values.iter().all(|v| (0.0..=1.0).contains(v))
    }
}

/// Daily concentration frames for a contiguous run of days starting at `t0`.
#[derive(Debug, Clone, PartialEq)]
pub struct SicSeries {
    height: usize,
    width: usize,
    t0: i64,
    data: Vec<f32>,
    mask: Option<Vec<bool>>,
}

impl SicSeries {
    /// `data` holds `days * height * width` values, frame-major, row-major.
    pub fn new(height: usize, width: usize, t0: i64, data: Vec<f32>, mask: Option<Vec<bool>>) -> Result<Self> {
        let cells = height * width;
        if cells == 0 || data.is_empty() || !data.len().is_multiple_of(cells) {
            return dim_err(format!("series of {height}x{width} frames given {} values", data.len()));
        }
        if let Some(m) = &mask {
            if m.len() != cells {
                return dim_err(format!("mask of {} cells for {height}x{width} frames", m.len()));
            }
        }
        if let Some(i) = data.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(SifmError::Domain(format!("value {} at index {i} outside [0, 1]", data[i])));
        }
        Ok(Self { height, width, t0, data, mask })
    }

    pub fn from_grids(t0: i64, grids: &[SicGrid], mask: Option<Vec<bool>>) -> Result<Self> {
        let first = grids.first().ok_or_else(|| SifmError::Dimension("series needs at least one frame".into()))?;
        let (h, w) = (first.height, first.width);
        let mut data = Vec::with_capacity(grids.len() * h * w);
        for g in grids {
            if (g.height, g.width) != (h, w) {
                return dim_err(format!("frame {}x{} in a {h}x{w} series", g.height, g.width));
            }
            data.extend(g.values.iter().map(|&v| v as f32));
        }
        Self::new(h, w, t0, data, mask)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn cells(&self) -> usize {
        self.height * self.width
    }

    pub fn t0(&self) -> i64 {
        self.t0
    }

    pub fn num_days(&self) -> usize {
        self.data.len() / self.cells()
    }

    /// Last covered day index.
    pub fn t_end(&self) -> i64 {
        self.t0 + self.num_days() as i64 - 1
    }

    pub fn mask(&self) -> Option<&[bool]> {
        self.mask.as_deref()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn covers(&self, from: i64, to: i64) -> bool {
        from >= self.t0 && to <= self.t_end()
    }

    /// Frame of absolute day `t`.
    pub fn frame(&self, t: i64) -> Result<&[f32]> {
        if !self.covers(t, t) {
            return Err(SifmError::Range(format!("day {t} outside series [{}, {}]", self.t0, self.t_end())));
        }
        let i = (t - self.t0) as usize;
        Ok(&self.data[i * self.cells()..(i + 1) * self.cells()])
    }

    pub fn grid(&self, t: i64) -> Result<SicGrid> {
        Ok(SicGrid { height: self.height, width: self.width, values: self.frame(t)?.iter().map(|&v| f64::from(v)).collect() })
    }
}
