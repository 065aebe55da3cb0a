//! Forecast verification over gridded SIC: RMSE, MAE, R², NSE, integrated
//! ice-edge error and sea-ice-extent difference.
//!
//! Every metric takes an optional ocean mask; only cells whose mask entry is
//! `true` contribute.

use std::io::Write;

use serde::Serialize;

use crate::error::{dim_err, Result, SifmError};
use crate::icegrid::{GranularSet, Granularity};

/// Concentration above which a cell counts as ice-covered.
pub const SIE_THRESHOLD: f64 = 0.15;

/// Side length of a grid cell in km.
pub const CELL_KM: f64 = 25.0;

fn selected<'a>(
    pred: &'a [f64],
    truth: &'a [f64],
    mask: Option<&'a [bool]>,
) -> Result<impl Iterator<Item = (f64, f64)> + Clone + 'a> {
    if pred.len() != truth.len() {
        return dim_err(format!("prediction of {} cells against truth of {}", pred.len(), truth.len()));
    }
    if let Some(m) = mask {
        if m.len() != pred.len() {
            return dim_err(format!("mask of {} cells for grids of {}", m.len(), pred.len()));
        }
    }
    Ok(pred.iter().zip(truth).enumerate().filter(move |(i, _)| mask.is_none_or(|m| m[*i])).map(|(_, (&p, &t))| (p, t)))
}

fn count_nonempty(it: impl Iterator<Item = (f64, f64)>) -> Result<usize> {
    match it.count() {
        0 => Err(SifmError::Domain("mask selects no cells".into())),
        n => Ok(n),
    }
}

pub fn rmse(pred: &[f64], truth: &[f64], mask: Option<&[bool]>) -> Result<f64> {
    let it = selected(pred, truth, mask)?;
    let n = count_nonempty(it.clone())?;
    Ok((it.map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / n as f64).sqrt())
}

pub fn mae(pred: &[f64], truth: &[f64], mask: Option<&[bool]>) -> Result<f64> {
    let it = selected(pred, truth, mask)?;
    let n = count_nonempty(it.clone())?;
    Ok(it.map(|(p, t)| (p - t).abs()).sum::<f64>() / n as f64)
}

/// Residual and total sums of squares about the truth mean.
fn rss_tss(pred: &[f64], truth: &[f64], mask: Option<&[bool]>) -> Result<(f64, f64)> {
    let it = selected(pred, truth, mask)?;
    let n = count_nonempty(it.clone())?;
    let mean = it.clone().map(|(_, t)| t).sum::<f64>() / n as f64;
    let rss = it.clone().map(|(p, t)| (t - p) * (t - p)).sum::<f64>();
    let tss = it.map(|(_, t)| (t - mean) * (t - mean)).sum::<f64>();
    if tss == 0.0 {
        return Err(SifmError::Domain("constant truth: total sum of squares is zero".into()));
    }
    Ok((rss, tss))
}

/// Coefficient of determination `1 - RSS/TSS`.
pub fn r2(pred: &[f64], truth: &[f64], mask: Option<&[bool]>) -> Result<f64> {
    let (rss, tss) = rss_tss(pred, truth, mask)?;
    Ok(1.0 - rss / tss)
}

/// Nash-Sutcliffe efficiency. Against the truth-mean baseline this is the
/// same quantity as [`r2`].
pub fn nse(pred: &[f64], truth: &[f64], mask: Option<&[bool]>) -> Result<f64> {
    let (num, den) = rss_tss(pred, truth, mask)?;
    Ok(1.0 - num / den)
}

/// Ice-covered cells: `value > threshold` (strict).
pub fn sie_mask(grid: &[f64], threshold: f64) -> Vec<bool> {
    grid.iter().map(|&v| v > threshold).collect()
}

/// Over- and under-estimated extent cell counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IceEdgeError {
    pub iiee: u64,
    pub over: u64,
    pub under: u64,
}

pub fn iiee(pred: &[f64], truth: &[f64], mask: Option<&[bool]>) -> Result<IceEdgeError> {
    let (mut over, mut under) = (0, 0);
    for (p, t) in selected(pred, truth, mask)? {
        match (p > SIE_THRESHOLD, t > SIE_THRESHOLD) {
            (true, false) => over += 1,
            (false, true) => under += 1,
            _ => {}
        }
    }
    Ok(IceEdgeError { iiee: over + under, over, under })
}

/// Area of disagreeing extent cells in millions of km², for cells of
/// `cell_km` × `cell_km`.
pub fn sie_dif(pred: &[f64], truth: &[f64], mask: Option<&[bool]>, cell_km: f64) -> Result<f64> {
    let mut cells = 0u64;
    for (p, t) in selected(pred, truth, mask)? {
        let (sp, st) = (u8::from(p > SIE_THRESHOLD), u8::from(t > SIE_THRESHOLD));
        cells += u64::from(sp.abs_diff(st));
    }
    Ok(cells as f64 * cell_km * cell_km / 1.0e6)
}

/// One row of the verification table. `lead` is 1-based; `-1` marks the
/// aggregate over all lead steps. `iiee` and `sie_dif` are means per grid.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricReport {
    pub granularity: Granularity,
    pub lead: i32,
    pub rmse: f64,
    pub mae: f64,
    pub r2: f64,
    pub nse: f64,
    pub iiee: f64,
    pub sie_dif: f64,
}

#[derive(Default)]
struct Pool {
    pred: Vec<f64>,
    truth: Vec<f64>,
    grids: usize,
    edge_cells: u64,
}

impl Pool {
    fn push(&mut self, pred: &[f64], truth: &[f64], mask: Option<&[bool]>) -> Result<()> {
        for (p, t) in selected(pred, truth, mask)? {
            self.pred.push(p);
            self.truth.push(t);
        }
        self.edge_cells += iiee(pred, truth, mask)?.iiee;
        self.grids += 1;
        Ok(())
    }

    fn report(&self, granularity: Granularity, lead: i32) -> Result<MetricReport> {
        let (p, t) = (&self.pred, &self.truth);
        let per_grid = self.edge_cells as f64 / self.grids as f64;
        Ok(MetricReport {
            granularity,
            lead,
            rmse: rmse(p, t, None)?,
            mae: mae(p, t, None)?,
            r2: r2(p, t, None)?,
            nse: nse(p, t, None)?,
            iiee: per_grid,
            sie_dif: per_grid * CELL_KM * CELL_KM / 1.0e6,
        })
    }
}

/// Per-lead and aggregate reports for every granularity present in the
/// forecasts, pooling cells over all samples.
pub fn evaluate_forecast(
    preds: &[GranularSet],
    truths: &[GranularSet],
    granularities: &[Granularity],
    mask: Option<&[bool]>,
) -> Result<Vec<MetricReport>> {
    if preds.len() != truths.len() || preds.is_empty() {
        return dim_err(format!("{} forecasts against {} truths", preds.len(), truths.len()));
    }
    let mut out = Vec::new();
    for &g in granularities {
        let steps = g.steps();
        let mut leads: Vec<Pool> = (0..steps).map(|_| Pool::default()).collect();
        let mut all = Pool::default();
        for (p, t) in preds.iter().zip(truths) {
            let (pg, tg) = (p.get(g), t.get(g));
            if pg.len() != steps || tg.len() != steps {
                return dim_err(format!("{} forecast has {} steps and truth {}, expected {steps}", g.name(), pg.len(), tg.len()));
            }
            for (k, (pk, tk)) in pg.iter().zip(tg).enumerate() {
                leads[k].push(&pk.values, &tk.values, mask)?;
                all.push(&pk.values, &tk.values, mask)?;
            }
        }
        for (k, pool) in leads.iter().enumerate() {
            out.push(pool.report(g, k as i32 + 1)?);
        }
        out.push(all.report(g, -1)?);
    }
    Ok(out)
}

pub const REPORT_HEADER: [&str; 8] = ["granularity", "lead", "rmse", "mae", "r2", "nse", "iiee", "sie_dif"];

/// Writes reports as CSV with [`REPORT_HEADER`].
pub fn write_reports_csv<W: Write>(reports: &[MetricReport], w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    for r in reports {
        wr.serialize(r).map_err(|e| SifmError::Io(std::io::Error::other(e)))?;
    }
    wr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::icegrid::SicGrid;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn perfect_and_offset_forecasts() {
        let truth: Vec<f64> = (0..16).map(|i| i as f64 / 20.0).collect();
        assert_eq!(rmse(&truth, &truth, None).unwrap(), 0.0);
        assert_eq!(r2(&truth, &truth, None).unwrap(), 1.0);
        assert_eq!(nse(&truth, &truth, None).unwrap(), 1.0);
        let off: Vec<f64> = truth.iter().map(|t| t + 0.1).collect();
        assert!((rmse(&off, &truth, None).unwrap() - 0.1).abs() < 1e-12);
        assert!((mae(&off, &truth, None).unwrap() - 0.1).abs() < 1e-12);
        let mean = truth.iter().sum::<f64>() / 16.0;
        let flat = vec![mean; 16];
        assert!(r2(&flat, &truth, None).unwrap().abs() < 1e-12);
        assert!(nse(&flat, &truth, None).unwrap().abs() < 1e-12);
    }

    #[test]
    fn empty_mask_and_constant_truth_are_domain_errors() {
        let a = [0.2, 0.3];
        assert!(matches!(rmse(&a, &a, Some(&[false, false])), Err(SifmError::Domain(_))));
        let err = r2(&a, &[0.5, 0.5], None).unwrap_err().to_string();
        assert!(err.contains("constant truth"), "{err}");
        assert!(rmse(&a, &[0.1], None).is_err());
    }

    #[test]
    fn sie_threshold_is_strict() {
        assert_eq!(sie_mask(&[0.0, 0.0], SIE_THRESHOLD), vec![false, false]);
        assert_eq!(sie_mask(&[0.15, 0.150001], SIE_THRESHOLD), vec![false, true]);
    }

    #[test]
    fn four_extra_ice_cells() {
        let truth: Vec<f64> = (0..64).map(|i| if i < 32 { 0.9 } else { 0.0 }).collect();
        let mut pred = truth.clone();
        for i in [40, 41, 50, 63] {
            pred[i] = 0.6;
        }
        assert_eq!(iiee(&pred, &truth, None).unwrap(), IceEdgeError { iiee: 4, over: 4, under: 0 });
        assert_eq!(iiee(&truth, &pred, None).unwrap(), IceEdgeError { iiee: 4, over: 0, under: 4 });
        assert!((sie_dif(&pred, &truth, None, CELL_KM).unwrap() - 0.0025).abs() < 1e-15);
        assert_eq!(sie_dif(&truth, &truth, None, CELL_KM).unwrap(), 0.0);
    }

    fn random_set(rng: &mut ChaCha8Rng) -> GranularSet {
        GranularSet::from_fn(|g| {
            Ok((0..g.steps())
                .map(|_| SicGrid::new(4, 4, (0..16).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap())
                .collect())
        })
        .unwrap()
    }

    #[test]
    fn perfect_evaluation_and_row_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let truths: Vec<GranularSet> = (0..3).map(|_| random_set(&mut rng)).collect();
        let reports = evaluate_forecast(&truths, &truths, &Granularity::ALL, None).unwrap();
        assert_eq!(reports.len(), 7 + 8 + 6 + 3);
        for r in &reports {
            assert_eq!((r.rmse, r.mae, r.iiee, r.sie_dif, r.r2, r.nse), (0.0, 0.0, 0.0, 0.0, 1.0, 1.0));
        }
        assert_eq!(reports.iter().filter(|r| r.lead == -1).count(), 3);
    }

    #[test]
    fn aggregate_rmse_is_pooled_not_averaged() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let preds: Vec<GranularSet> = (0..2).map(|_| random_set(&mut rng)).collect();
        let truths: Vec<GranularSet> = (0..2).map(|_| random_set(&mut rng)).collect();
        let reports = evaluate_forecast(&preds, &truths, &[Granularity::Daily], None).unwrap();
        let (mut se, mut n) = (0.0, 0.0);
        for (p, t) in preds.iter().zip(&truths) {
            for (pg, tg) in p.daily.iter().zip(&t.daily) {
                for (a, b) in pg.values.iter().zip(&tg.values) {
                    se += (a - b) * (a - b);
                    n += 1.0;
                }
            }
        }
        let pooled = (se / n).sqrt();
        let agg = reports.last().unwrap();
        assert_eq!(agg.lead, -1);
        assert!((agg.rmse - pooled).abs() < 1e-12);
        let averaged = reports[..7].iter().map(|r| r.rmse).sum::<f64>() / 7.0;
        assert!((agg.rmse - averaged).abs() > 1e-9);
        for r in &reports {
            assert!(r.rmse >= r.mae && r.mae >= 0.0);
        }
    }

    #[test]
    fn csv_header_and_aggregate_lead() {
        let r = MetricReport {
            granularity: Granularity::Weekly,
            lead: -1,
            rmse: 0.5,
            mae: 0.25,
            r2: 0.0,
            nse: 0.0,
            iiee: 2.0,
            sie_dif: 0.00125,
        };
        let mut buf = Vec::new();
        write_reports_csv(&[r], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), REPORT_HEADER.join(","));
        assert_eq!(lines.next().unwrap(), "weekly,-1,0.5,0.25,0.0,0.0,2.0,0.00125");
    }
}
