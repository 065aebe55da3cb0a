use super::{Granularity, SicGrid, SicSeries};
use crate::error::{Result, SifmError};

/// `count` consecutive `block_days`-day means tiled backward from `end_t`,
/// returned oldest first. Accumulation is in f64.
pub fn aggregate(series: &SicSeries, end_t: i64, block_days: usize, count: usize) -> Result<Vec<SicGrid>> {
    if block_days == 0 || count == 0 {
        return Err(SifmError::Range("aggregation needs positive block length and count".into()));
    }
    let span = (block_days * count) as i64;
    let start = end_t - span + 1;
    if !series.covers(start, end_t) {
        return Err(SifmError::Range(format!(
            "{count} blocks of {block_days} days ending at {end_t} need days [{start}, {end_t}], series covers [{}, {}]",
            series.t0(),
            series.t_end()
        )));
    }
    let cells = series.cells();
    let inv = 1.0 / block_days as f64;
    let mut out = Vec::with_capacity(count);
    for k in 0..count {
        let block_start = start + (k * block_days) as i64;
        let mut acc = vec![0.0f64; cells];
        for t in block_start..block_start + block_days as i64 {
            for (a, &v) in acc.iter_mut().zip(series.frame(t)?) {
                *a += f64::from(v);
            }
        }
        acc.iter_mut().for_each(|a| *a *= inv);
        out.push(SicGrid { height: series.height(), width: series.width(), values: acc });
    }
    Ok(out)
}

/// 7-day means ending at `end_t`.
pub fn aggregate_weekly(series: &SicSeries, end_t: i64, count: usize) -> Result<Vec<SicGrid>> {
    aggregate(series, end_t, Granularity::Weekly.block_days(), count)
}

/// 30-day means ending at `end_t`.
pub fn aggregate_monthly(series: &SicSeries, end_t: i64, count: usize) -> Result<Vec<SicGrid>> {
    aggregate(series, end_t, Granularity::Monthly.block_days(), count)
}
