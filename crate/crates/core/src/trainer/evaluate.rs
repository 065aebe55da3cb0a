use rayon::prelude::*;

use super::config::{GranularityMode, ModelConfig};
use super::model::{persistence_forecast, predict};
use crate::error::{Result, SifmError};
use crate::gradcore::ParamStore;
use crate::icegrid::{make_sample, GranularSet, Granularity, MultiGranularitySample, SicSeries};
use crate::metrics::{evaluate_forecast, MetricReport};

/// Mean of `prediction - truth` over every lead and anchor of one
/// granularity.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualMap {
    pub granularity: Granularity,
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub reports: Vec<MetricReport>,
    pub residuals: Vec<ResidualMap>,
}

impl Evaluation {
    /// Aggregate RMSE of one granularity.
    pub fn rmse(&self, g: Granularity) -> Option<f64> {
        self.reports.iter().find(|r| r.granularity == g && r.lead == -1).map(|r| r.rmse)
    }
}

/// Scores `forecaster` on every anchor. Anchors are processed in parallel
/// and merged in the given order.
pub fn evaluate_with<F>(series: &SicSeries, anchors: &[i64], mode: GranularityMode, forecaster: F) -> Result<Evaluation>
where
    F: Fn(&MultiGranularitySample) -> Result<GranularSet> + Sync,
{
    if anchors.is_empty() {
        return Err(SifmError::Range("no anchors to evaluate".into()));
    }
    let pairs: Vec<(GranularSet, GranularSet)> = anchors
        .par_iter()
        .map(|&a| {
            let sample = make_sample(series, a)?;
            let pred = forecaster(&sample)?;
            Ok((pred, sample.targets))
        })
        .collect::<Result<_>>()?;
    let (preds, truths): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
    let active = mode.active();
    let reports = evaluate_forecast(&preds, &truths, active, series.mask())?;

    let cells = series.cells();
    let mut residuals = Vec::with_capacity(active.len());
    for &g in active {
        let mut sum = vec![0.0; cells];
        let mut count = 0usize;
        for (p, t) in preds.iter().zip(&truths) {
            for (pg, tg) in p.get(g).iter().zip(t.get(g)) {
                for ((s, a), b) in sum.iter_mut().zip(&pg.values).zip(&tg.values) {
                    *s += a - b;
                }
                count += 1;
            }
        }
        sum.iter_mut().for_each(|s| *s /= count as f64);
        residuals.push(ResidualMap { granularity: g, height: series.height(), width: series.width(), values: sum });
    }
    Ok(Evaluation { reports, residuals })
}

pub fn evaluate_model(store: &ParamStore<f32>, cfg: &ModelConfig, series: &SicSeries, anchors: &[i64]) -> Result<Evaluation> {
    evaluate_with(series, anchors, cfg.mode, |s| predict(store, cfg, &s.inputs))
}

pub fn evaluate_persistence(series: &SicSeries, anchors: &[i64], mode: GranularityMode) -> Result<Evaluation> {
    evaluate_with(series, anchors, mode, |s| Ok(persistence_forecast(&s.inputs, mode)))
}

/// Scores the targets against themselves: zero error everywhere.
pub fn evaluate_oracle(series: &SicSeries, anchors: &[i64], mode: GranularityMode) -> Result<Evaluation> {
    evaluate_with(series, anchors, mode, |s| Ok(s.targets.clone()))
}
