use super::config::{GranularityMode, ModelConfig};
use crate::error::{dim_err, Result};
use crate::fusion::{fusion_forward, fusion_param_specs};
use crate::gradcore::{ParamStore, Scalar, Tape, Var};
use crate::icegrid::{GranularSet, Granularity, SicGrid};
use crate::init::{init_store, ParamSpec};
use crate::spatialcodec::{codec_param_specs, decode_frames, encode_frames};

/// Full parameter manifest: the shared codec followed by the fusion stack.
pub fn model_param_specs(cfg: &ModelConfig) -> Result<Vec<ParamSpec>> {
    cfg.validate()?;
    let mut specs = codec_param_specs(&cfg.codec, cfg.height, cfg.width)?;
    specs.extend(fusion_param_specs(&cfg.fusion, cfg.codec.token_dim)?);
    Ok(specs)
}

pub fn init_model<T: Scalar>(cfg: &ModelConfig, seed: u64) -> Result<ParamStore<T>> {
    init_store(&model_param_specs(cfg)?, seed)
}

fn stack<T: Scalar>(tape: &mut Tape<T>, grids: &[&SicGrid], height: usize, width: usize) -> Result<Var> {
    let mut data = Vec::with_capacity(grids.len() * height * width);
    for g in grids {
        if g.height != height || g.width != width {
            return dim_err(format!("grid {}x{} given to a {height}x{width} model", g.height, g.width));
        }
        data.extend(g.values.iter().map(|&v| T::lit(v)));
    }
    tape.constant(&[grids.len(), height, width], data)
}

/// Raw predicted grids `[P_g, H, W]` for every granularity the model's mode
/// covers, in canonical order.
pub fn forward_sifm<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    cfg: &ModelConfig,
    inputs: &GranularSet,
) -> Result<Vec<(Granularity, Var)>> {
    let active = cfg.mode.active();
    let (h, w) = (cfg.height, cfg.width);
    let mut frames = Vec::new();
    for &g in active {
        let seq = inputs.get(g);
        if seq.len() != g.steps() {
            return dim_err(format!("{} input has {} grids, expected {}", g.name(), seq.len(), g.steps()));
        }
        frames.extend(seq.iter());
    }
    let x = stack(tape, &frames, h, w)?;
    let enc = encode_frames(tape, store, &cfg.codec, x)?;

    let (sh, sw, sc) = cfg.codec.stage_shape(h, w, 0);
    let skip_block = sh * sw * sc;
    let mut seqs = Vec::with_capacity(active.len());
    let mut skip_idx = Vec::new();
    let mut start = 0;
    for &g in active {
        seqs.push((g, tape.slice(enc.tokens, 0, start, g.steps())?));
        // Every predicted frame reuses the skip of the newest input frame.
        let last = (start + g.steps() - 1) as u32;
        skip_idx.extend(std::iter::repeat_n(last, g.steps()));
        start += g.steps();
    }
    let preds = fusion_forward(tape, store, &cfg.fusion, &seqs)?;
    let total = skip_idx.len();
    let tokens = tape.concat(&preds, 0)?;
    let skip = tape.gather(enc.skip, skip_idx.into(), skip_block, &[total, sh, sw, sc])?;
    let grids = decode_frames(tape, store, &cfg.codec, tokens, skip, h, w)?;
    let mut out = Vec::with_capacity(active.len());
    let mut start = 0;
    for &g in active {
        out.push((g, tape.slice(grids, 0, start, g.steps())?));
        start += g.steps();
    }
    Ok(out)
}

/// Equally weighted mean of the per-granularity MSE between raw predictions
/// and targets.
pub fn loss_multi<T: Scalar>(tape: &mut Tape<T>, preds: &[(Granularity, Var)], targets: &GranularSet) -> Result<Var> {
    if preds.is_empty() {
        return dim_err("loss over no granularities");
    }
    let mut total: Option<Var> = None;
    for &(g, p) in preds {
        let shape = tape.shape(p).to_vec();
        let tg = targets.get(g);
        if shape.len() != 3 || tg.len() != shape[0] {
            return dim_err(format!("{} prediction {shape:?} against {} targets", g.name(), tg.len()));
        }
        let refs: Vec<&SicGrid> = tg.iter().collect();
        let t = stack(tape, &refs, shape[1], shape[2])?;
        let m = tape.mse(p, t)?;
        total = Some(match total {
            None => m,
            Some(acc) => tape.add(acc, m)?,
        });
    }
    let sum = total.expect("non-empty");
    Ok(tape.scale(sum, T::lit(1.0 / preds.len() as f64)))
}

/// Clamped forecasts for the model's granularities; other granularities are
/// left empty.
pub fn predict<T: Scalar>(store: &ParamStore<T>, cfg: &ModelConfig, inputs: &GranularSet) -> Result<GranularSet> {
    let mut tape = Tape::inference();
    let preds = forward_sifm(&mut tape, store, cfg, inputs)?;
    let mut out = GranularSet { daily: Vec::new(), weekly: Vec::new(), monthly: Vec::new() };
    let n = cfg.height * cfg.width;
    for (g, v) in preds {
        let vals = tape.value(v);
        *out.get_mut(g) = vals
            .chunks_exact(n)
            .map(|c| SicGrid::new(cfg.height, cfg.width, c.iter().map(|x| x.to_f64_lossy().clamp(0.0, 1.0)).collect()))
            .collect::<Result<_>>()?;
    }
    Ok(out)
}

/// Persistence forecast: the newest input grid of each granularity repeated
/// for every lead.
pub fn persistence_forecast(inputs: &GranularSet, mode: GranularityMode) -> GranularSet {
    let mut out = GranularSet { daily: Vec::new(), weekly: Vec::new(), monthly: Vec::new() };
    for &g in mode.active() {
        if let Some(last) = inputs.get(g).last() {
            *out.get_mut(g) = vec![last.clone(); g.steps()];
        }
    }
    out
}
