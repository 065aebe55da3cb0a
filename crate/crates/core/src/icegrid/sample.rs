use super::{aggregate, Granularity, SicGrid, SicSeries, MAX_SPAN_DAYS};
use crate::error::{Result, SifmError};

/// Days between consecutive sample anchors.
pub const ANCHOR_STRIDE: usize = 7;

/// One grid sequence per granularity (7 daily, 8 weekly, 6 monthly).
#[derive(Debug, Clone, PartialEq)]
pub struct GranularSet {
    pub daily: Vec<SicGrid>,
    pub weekly: Vec<SicGrid>,
    pub monthly: Vec<SicGrid>,
}

impl GranularSet {
    pub fn get(&self, g: Granularity) -> &[SicGrid] {
        match g {
            Granularity::Daily => &self.daily,
            Granularity::Weekly => &self.weekly,
            Granularity::Monthly => &self.monthly,
        }
    }

    pub fn get_mut(&mut self, g: Granularity) -> &mut Vec<SicGrid> {
        match g {
            Granularity::Daily => &mut self.daily,
            Granularity::Weekly => &mut self.weekly,
            Granularity::Monthly => &mut self.monthly,
        }
    }

    pub fn from_fn(mut f: impl FnMut(Granularity) -> Result<Vec<SicGrid>>) -> Result<Self> {
        Ok(Self { daily: f(Granularity::Daily)?, weekly: f(Granularity::Weekly)?, monthly: f(Granularity::Monthly)? })
    }

    pub fn grid_count(&self) -> usize {
        self.daily.len() + self.weekly.len() + self.monthly.len()
    }
}

/// Paired input and target windows of all granularities at one anchor day.
///
/// Every input window ends at `anchor_t`; every target window starts the
/// day after.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiGranularitySample {
    pub anchor_t: i64,
    pub inputs: GranularSet,
    pub targets: GranularSet,
}

fn window(series: &SicSeries, g: Granularity, end_t: i64) -> Result<Vec<SicGrid>> {
    aggregate(series, end_t, g.block_days(), g.steps())
}

/// Input windows only, for forecasting past the end of a series.
pub fn make_inputs(series: &SicSeries, anchor_t: i64) -> Result<GranularSet> {
    let first = anchor_t - MAX_SPAN_DAYS as i64 + 1;
    if !series.covers(first, anchor_t) {
        return Err(SifmError::Range(format!(
            "inputs at anchor {anchor_t} need days [{first}, {anchor_t}], series covers [{}, {}]",
            series.t0(),
            series.t_end()
        )));
    }
    GranularSet::from_fn(|g| window(series, g, anchor_t))
}

pub fn make_sample(series: &SicSeries, anchor_t: i64) -> Result<MultiGranularitySample> {
    let first = anchor_t - MAX_SPAN_DAYS as i64 + 1;
    let last = anchor_t + MAX_SPAN_DAYS as i64;
    if !series.covers(first, last) {
        return Err(SifmError::Range(format!(
            "sample at anchor {anchor_t} needs days [{first}, {last}], series covers [{}, {}]",
            series.t0(),
            series.t_end()
        )));
    }
    Ok(MultiGranularitySample {
        anchor_t,
        inputs: make_inputs(series, anchor_t)?,
        targets: GranularSet::from_fn(|g| window(series, g, anchor_t + g.span_days() as i64))?,
    })
}

/// Every anchor with full input and target coverage, stepping by `stride`
/// from the earliest one.
pub fn valid_anchors(series: &SicSeries, stride: usize) -> Vec<i64> {
    let lo = series.t0() + MAX_SPAN_DAYS as i64 - 1;
    let hi = series.t_end() - MAX_SPAN_DAYS as i64;
    if hi < lo {
        return Vec::new();
    }
    (lo..=hi).step_by(stride.max(1)).collect()
}

/// Chronological train / validation / test partition of sample anchors.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleSplit {
    pub train: Vec<i64>,
    pub val: Vec<i64>,
    pub test: Vec<i64>,
}

/// Splits the stride-spaced anchors of `series` 70/10/20 in time order.
/// With at least three anchors every part is non-empty.
pub fn chronological_split(series: &SicSeries, stride: usize) -> Result<SampleSplit> {
    let anchors = valid_anchors(series, stride);
    let n = anchors.len();
    if n < 3 {
        return Err(SifmError::Range(format!(
            "series of {} days yields {n} sample anchors, at least 3 are needed",
            series.num_days()
        )));
    }
    let n_val = ((n as f64 * 0.1).round() as usize).max(1);
    let n_test = ((n as f64 * 0.2).round() as usize).max(1);
    let n_train = n - n_val - n_test;
    if n_train == 0 {
        return Err(SifmError::Range(format!("{n} anchors leave nothing to train on")));
    }
    Ok(SampleSplit {
        train: anchors[..n_train].to_vec(),
        val: anchors[n_train..n_train + n_val].to_vec(),
        test: anchors[n_train + n_val..].to_vec(),
    })
}
