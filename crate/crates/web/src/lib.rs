//! Browser bindings: a synthetic-field viewer, a shifted-window mask viewer,
//! and persistence-baseline metrics with residual maps.
//!
//! Images are returned as RGBA bytes at one pixel per grid cell; the page
//! scales them up.

use sifm::gradcore::MASK_SENTINEL;
use sifm::icegrid::{chronological_split, make_sample, synth_generate, Granularity, SicSeries, SynthConfig, ANCHOR_STRIDE};
use sifm::metrics::{evaluate_forecast, write_reports_csv, MetricReport, CELL_KM, SIE_THRESHOLD};
use sifm::spatialcodec::{shift_region_mask, stage_window, window_partition_index};
use sifm::trainer::{persistence_forecast, GranularityMode};
use wasm_bindgen::prelude::*;

fn js(e: sifm::SifmError) -> JsError {
    JsError::new(&e.to_string())
}

fn lerp(a: [u8; 3], b: [u8; 3], t: f64) -> [u8; 3] {
    let t = t.clamp(0.0, 1.0);
    std::array::from_fn(|i| (f64::from(a[i]) + (f64::from(b[i]) - f64::from(a[i])) * t).round() as u8)
}

const OCEAN: [u8; 3] = [9, 40, 86];
const ICE: [u8; 3] = [246, 250, 255];
const LAND: [u8; 3] = [120, 110, 95];

/// Ocean-to-ice colouring of a concentration field; masked-out cells are
/// drawn as land and the ice edge is outlined.
pub fn ice_rgba(values: &[f32], width: usize, mask: Option<&[bool]>) -> Vec<u8> {
    let ice = |i: usize| f64::from(values[i]) > SIE_THRESHOLD;
    let mut out = Vec::with_capacity(values.len() * 4);
    for (i, &v) in values.iter().enumerate() {
        let (y, x) = (i / width, i % width);
        let rgb = if mask.is_some_and(|m| !m[i]) {
            LAND
        } else {
            let edge = ice(i)
                && [(0, 1), (2, 1), (1, 0), (1, 2)].iter().any(|&(dy, dx)| {
                    let (ny, nx) = ((y + dy).wrapping_sub(1), (x + dx).wrapping_sub(1));
                    ny < values.len() / width && nx < width && !ice(ny * width + nx)
                });
            if edge {
                [230, 120, 40]
            } else {
                lerp(OCEAN, ICE, f64::from(v))
            }
        };
        out.extend_from_slice(&[rgb[0], rgb[1], rgb[2], 255]);
    }
    out
}

/// Blue for under-, red for over-prediction, white at zero, saturating at
/// `±scale`.
pub fn residual_rgba(values: &[f64], scale: f64) -> Vec<u8> {
    let mut out = Vec::with_capacity(values.len() * 4);
    for &r in values {
        let t = if scale > 0.0 { r / scale } else { 0.0 };
        let rgb = if t >= 0.0 { lerp([255, 255, 255], [178, 24, 43], t) } else { lerp([255, 255, 255], [33, 102, 172], -t) };
        out.extend_from_slice(&[rgb[0], rgb[1], rgb[2], 255]);
    }
    out
}

/// What one query cell may attend to under (shifted-)window attention.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowView {
    /// Per cell: window id in the (shifted) partition.
    pub window: Vec<usize>,
    /// Per cell: whether the query may attend to it.
    pub visible: Vec<bool>,
    pub window_size: usize,
    pub shift: usize,
}

pub fn window_view(size: usize, window: usize, shifted: bool, qy: usize, qx: usize) -> sifm::Result<WindowView> {
    if qy >= size || qx >= size {
        return Err(sifm::SifmError::Range(format!("query cell ({qy}, {qx}) outside a {size}x{size} map")));
    }
    let (ws, natural) = stage_window(window, size, size)?;
    let shift = if shifted { natural } else { 0 };
    let n = ws * ws;
    let slots = window_partition_index(1, size, size, ws, shift);
    let mask = shift_region_mask(size, size, ws, shift);
    let mut slot_of = vec![0usize; size * size];
    for (slot, &src) in slots.iter().enumerate() {
        slot_of[src as usize] = slot;
    }
    let q = slot_of[qy * size + qx];
    let (qw, qi) = (q / n, q % n);
    let window = slot_of.iter().map(|s| s / n).collect();
    let visible = slot_of.iter().map(|&s| s / n == qw && mask[qw * n * n + qi * n + s % n] != MASK_SENTINEL).collect();
    Ok(WindowView { window, visible, window_size: ws, shift })
}

const PALETTE: [[u8; 3]; 4] = [[141, 160, 203], [252, 141, 98], [102, 194, 165], [231, 138, 195]];

impl WindowView {
    pub fn rgba(&self, size: usize, qy: usize, qx: usize) -> Vec<u8> {
        let mut out = Vec::with_capacity(size * size * 4);
        for i in 0..size * size {
            let w = self.window[i];
            let (wy, wx) = (w / (size / self.window_size), w % (size / self.window_size));
            let base = PALETTE[(wy % 2) * 2 + wx % 2];
            let rgb = if i == qy * size + qx {
                [20, 20, 20]
            } else if self.visible[i] {
                base
            } else {
                lerp(base, [255, 255, 255], 0.75)
            };
            out.extend_from_slice(&[rgb[0], rgb[1], rgb[2], 255]);
        }
        out
    }
}

/// Persistence scores over the test anchors of a series, with mean
/// prediction-minus-truth maps per granularity.
#[derive(Debug, Clone)]
pub struct PersistenceSummary {
    pub anchors: usize,
    pub reports: Vec<MetricReport>,
    pub residuals: [Vec<f64>; 3],
}

pub fn persistence_summary(series: &SicSeries) -> sifm::Result<PersistenceSummary> {
    let split = chronological_split(series, ANCHOR_STRIDE)?;
    let cells = series.cells();
    let mut residuals: [Vec<f64>; 3] = std::array::from_fn(|_| vec![0.0; cells]);
    let (mut preds, mut truths) = (Vec::new(), Vec::new());
    for &a in &split.test {
        let s = make_sample(series, a)?;
        let p = persistence_forecast(&s.inputs, GranularityMode::Multi);
        for g in Granularity::ALL {
            let steps = g.steps() as f64;
            for (pg, tg) in p.get(g).iter().zip(s.targets.get(g)) {
                for (acc, (pv, tv)) in residuals[g.index()].iter_mut().zip(pg.values.iter().zip(&tg.values)) {
                    *acc += (pv - tv) / steps;
                }
            }
        }
        preds.push(p);
        truths.push(s.targets);
    }
    let n = split.test.len() as f64;
    residuals.iter_mut().flatten().for_each(|r| *r /= n);
    let reports = evaluate_forecast(&preds, &truths, &Granularity::ALL, series.mask())?;
    Ok(PersistenceSummary { anchors: split.test.len(), reports, residuals })
}

/// A generated series held by the page.
#[wasm_bindgen]
pub struct Field {
    series: SicSeries,
    summary: Option<PersistenceSummary>,
}

#[wasm_bindgen]
impl Field {
    #[wasm_bindgen(constructor)]
    pub fn new(size: usize, days: usize, seed: u32, amplitude: f64, trend: f64, noise: f64) -> Result<Field, JsError> {
        let cfg = SynthConfig {
            height: size,
            width: size,
            num_days: days,
            seasonal_amplitude: amplitude,
            linear_trend_per_day: trend,
            noise_std: noise,
            rng_seed: u64::from(seed),
            ..SynthConfig::default()
        };
        Ok(Field { series: synth_generate(&cfg).map_err(js)?, summary: None })
    }

    pub fn size(&self) -> usize {
        self.series.height()
    }

    pub fn days(&self) -> usize {
        self.series.num_days()
    }

    pub fn frame_rgba(&self, day: usize) -> Result<Vec<u8>, JsError> {
        let frame = self.series.frame(self.series.t0() + day as i64).map_err(js)?;
        Ok(ice_rgba(frame, self.series.width(), self.series.mask()))
    }

    /// Sea-ice extent in million km² on `day`.
    pub fn extent(&self, day: usize) -> Result<f64, JsError> {
        let frame = self.series.frame(self.series.t0() + day as i64).map_err(js)?;
        let cells = frame.iter().filter(|&&v| f64::from(v) > SIE_THRESHOLD).count();
        Ok(cells as f64 * CELL_KM * CELL_KM / 1e6)
    }

    /// Scores persistence on the test anchors and returns the metrics CSV.
    pub fn persistence_csv(&mut self) -> Result<String, JsError> {
        let summary = persistence_summary(&self.series).map_err(js)?;
        let mut buf = Vec::new();
        write_reports_csv(&summary.reports, &mut buf).map_err(js)?;
        self.summary = Some(summary);
        String::from_utf8(buf).map_err(|e| JsError::new(&e.to_string()))
    }

    pub fn test_anchors(&self) -> usize {
        self.summary.as_ref().map_or(0, |s| s.anchors)
    }

    /// Residual map for granularity 0 (daily), 1 (weekly) or 2 (monthly)
    /// after [`Field::persistence_csv`].
    pub fn residual_rgba(&self, granularity: usize, scale: f64) -> Result<Vec<u8>, JsError> {
        let s = self.summary.as_ref().ok_or_else(|| JsError::new("no persistence run yet"))?;
        let r = s.residuals.get(granularity).ok_or_else(|| JsError::new("granularity must be 0, 1 or 2"))?;
        Ok(residual_rgba(r, scale))
    }

    pub fn residual_max_abs(&self, granularity: usize) -> f64 {
        self.summary
            .as_ref()
            .and_then(|s| s.residuals.get(granularity))
            .map_or(0.0, |r| r.iter().fold(0.0, |m, v| m.max(v.abs())))
    }
}

/// Window mask image for a `size × size` map; the query cell is dark,
/// cells it may attend to are saturated and the rest are faded.
#[wasm_bindgen]
pub fn window_mask_rgba(size: usize, window: usize, shifted: bool, qy: usize, qx: usize) -> Result<Vec<u8>, JsError> {
    Ok(window_view(size, window, shifted, qy, qx).map_err(js)?.rgba(size, qy, qx))
}

/// Number of cells the query may attend to.
#[wasm_bindgen]
pub fn window_visible_count(size: usize, window: usize, shifted: bool, qy: usize, qx: usize) -> Result<usize, JsError> {
    Ok(window_view(size, window, shifted, qy, qx).map_err(js)?.visible.iter().filter(|&&v| v).count())
}
