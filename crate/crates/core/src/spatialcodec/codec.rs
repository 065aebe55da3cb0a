use super::layers::{decoder_head, patch_expand, patch_merge, patch_partition};
use super::window::swin_block_pair;
use super::CodecConfig;
use crate::error::{dim_err, Result};
use crate::gradcore::{ParamStore, Scalar, Tape, Var};
use crate::icegrid::SicGrid;
use crate::init::{linear_specs, ParamSpec};

/// Branch norms start with zero gain, so every block is the identity at
/// initialization.
fn post_norm_specs(out: &mut Vec<ParamSpec>, prefix: &str, c: usize) {
    out.push(ParamSpec::zeros(format!("{prefix}.g"), &[c]));
    out.push(ParamSpec::zeros(format!("{prefix}.b"), &[c]));
}

fn block_pair_specs(out: &mut Vec<ParamSpec>, prefix: &str, cfg: &CodecConfig, c: usize, heads: usize) {
    let side = 2 * cfg.attn_window - 1;
    for b in 0..2 {
        let p = format!("{prefix}.block{b}");
        linear_specs(out, &format!("{p}.attn.qkv"), c, 3 * c);
        out.push(ParamSpec::weight(format!("{p}.attn.rel_bias"), &[side * side, heads]));
        linear_specs(out, &format!("{p}.attn.proj"), c, c);
        post_norm_specs(out, &format!("{p}.norm1"), c);
        linear_specs(out, &format!("{p}.mlp.fc1"), c, cfg.mlp_ratio * c);
        linear_specs(out, &format!("{p}.mlp.fc2"), cfg.mlp_ratio * c, c);
        post_norm_specs(out, &format!("{p}.norm2"), c);
    }
}

/// Every codec parameter for `height × width` grids, named under `codec.`.
pub fn codec_param_specs(cfg: &CodecConfig, height: usize, width: usize) -> Result<Vec<ParamSpec>> {
    cfg.validate_grid(height, width)?;
    let mut out = Vec::new();
    let c0 = cfg.stem_channels;
    let (bh, bw, bc) = cfg.bottleneck_shape(height, width);
    let flat = bh * bw * bc;

    linear_specs(&mut out, "codec.enc.partition", 4, c0);
    for s in 0..=cfg.num_merge_stages {
        if s > 0 {
            linear_specs(&mut out, &format!("codec.enc.merge{s}"), 4 * cfg.channels(s - 1), cfg.channels(s));
        }
        block_pair_specs(&mut out, &format!("codec.enc.stage{s}"), cfg, cfg.channels(s), cfg.heads_per_stage[s]);
    }
    linear_specs(&mut out, "codec.enc.token", flat, cfg.token_dim);

    linear_specs(&mut out, "codec.dec.token", cfg.token_dim, flat);
    for s in (0..=cfg.num_merge_stages).rev() {
        block_pair_specs(&mut out, &format!("codec.dec.stage{s}"), cfg, cfg.channels(s), cfg.heads_per_stage[s]);
        if s > 0 {
            linear_specs(&mut out, &format!("codec.dec.expand{s}"), cfg.channels(s), 2 * cfg.channels(s));
        }
    }
    linear_specs(&mut out, "codec.dec.head", c0, 4);
    Ok(out)
}

/// Tokens `[frames, token_dim]` and stem skip features `[frames, h, w, c]`.
#[derive(Debug, Clone, Copy)]
pub struct Encoded {
    pub tokens: Var,
    pub skip: Var,
}

/// Encodes a `[frames, H, W]` stack with one shared parameter set.
pub fn encode_frames<T: Scalar>(tape: &mut Tape<T>, store: &ParamStore<T>, cfg: &CodecConfig, frames: Var) -> Result<Encoded> {
    let s = tape.shape(frames).to_vec();
    if s.len() != 3 {
        return dim_err(format!("encoder expects [frames, H, W], got {s:?}"));
    }
    cfg.validate_grid(s[1], s[2])?;
    let f = s[0];
    let z = patch_partition(tape, store, "codec.enc.partition", frames)?;
    let stem = swin_block_pair(tape, store, "codec.enc.stage0", z, cfg.attn_window, cfg.heads_per_stage[0], cfg.ln_eps)?;
    let skip = stem.out;
    let mut z = skip;
    for st in 1..=cfg.num_merge_stages {
        z = patch_merge(tape, store, &format!("codec.enc.merge{st}"), z)?;
        z = swin_block_pair(
            tape,
            store,
            &format!("codec.enc.stage{st}"),
            z,
            cfg.attn_window,
            cfg.heads_per_stage[st],
            cfg.ln_eps,
        )?
        .out;
    }
    let (bh, bw, bc) = cfg.bottleneck_shape(s[1], s[2]);
    let flat = tape.reshape(z, &[f, bh * bw * bc])?;
    let (w, b) = (tape.param(store, "codec.enc.token.w")?, tape.param(store, "codec.enc.token.b")?);
    let tokens = tape.linear(flat, w, Some(b))?;
    Ok(Encoded { tokens, skip })
}

/// Decodes `[frames, token_dim]` tokens with matching skip features into raw
/// (unclamped) `[frames, height, width]` grids.
pub fn decode_frames<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    cfg: &CodecConfig,
    tokens: Var,
    skip: Var,
    height: usize,
    width: usize,
) -> Result<Var> {
    cfg.validate_grid(height, width)?;
    let ts = tape.shape(tokens).to_vec();
    if ts.len() != 2 || ts[1] != cfg.token_dim {
        return dim_err(format!("decoder expects [frames, {}] tokens, got {ts:?}", cfg.token_dim));
    }
    let f = ts[0];
    let (sh, sw, sc) = cfg.stage_shape(height, width, 0);
    if tape.shape(skip) != [f, sh, sw, sc] {
        return dim_err(format!("skip feature {:?} does not match [{f}, {sh}, {sw}, {sc}]", tape.shape(skip)));
    }
    let (w, b) = (tape.param(store, "codec.dec.token.w")?, tape.param(store, "codec.dec.token.b")?);
    let flat = tape.linear(tokens, w, Some(b))?;
    let (bh, bw, bc) = cfg.bottleneck_shape(height, width);
    let mut z = tape.reshape(flat, &[f, bh, bw, bc])?;
    for st in (1..=cfg.num_merge_stages).rev() {
        z = swin_block_pair(
            tape,
            store,
            &format!("codec.dec.stage{st}"),
            z,
            cfg.attn_window,
            cfg.heads_per_stage[st],
            cfg.ln_eps,
        )?
        .out;
        z = patch_expand(tape, store, &format!("codec.dec.expand{st}"), z)?;
    }
    let z = tape.add(z, skip)?;
    let z = swin_block_pair(tape, store, "codec.dec.stage0", z, cfg.attn_window, cfg.heads_per_stage[0], cfg.ln_eps)?.out;
    decoder_head(tape, store, "codec.dec.head", z)
}

/// Compact 1D summary of one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialToken {
    pub vec: Vec<f64>,
}

/// Stem-resolution encoder features of one frame, row-major `[h, w, c]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SkipFeature {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

fn to_f64<T: Scalar>(v: &[T]) -> Vec<f64> {
    v.iter().map(|x| x.to_f64_lossy()).collect()
}

/// Encodes a single frame outside of training.
pub fn encode_frame<T: Scalar>(cfg: &CodecConfig, store: &ParamStore<T>, frame: &SicGrid) -> Result<(SpatialToken, SkipFeature)> {
    let mut tape = Tape::inference();
    let data = frame.values.iter().map(|&v| T::lit(v)).collect();
    let x = tape.constant(&[1, frame.height, frame.width], data)?;
    let enc = encode_frames(&mut tape, store, cfg, x)?;
    let (h, w, c) = cfg.stage_shape(frame.height, frame.width, 0);
    Ok((
        SpatialToken { vec: to_f64(tape.value(enc.tokens)) },
        SkipFeature { height: h, width: w, channels: c, data: to_f64(tape.value(enc.skip)) },
    ))
}

/// Decodes one token back to a grid clamped to [0, 1].
pub fn decode_frame<T: Scalar>(
    cfg: &CodecConfig,
    store: &ParamStore<T>,
    token: &SpatialToken,
    skip: &SkipFeature,
    height: usize,
    width: usize,
) -> Result<SicGrid> {
    let mut tape = Tape::inference();
    let t = tape.constant(&[1, token.vec.len()], token.vec.iter().map(|&v| T::lit(v)).collect())?;
    let s = tape.constant(&[1, skip.height, skip.width, skip.channels], skip.data.iter().map(|&v| T::lit(v)).collect())?;
    let y = decode_frames(&mut tape, store, cfg, t, s, height, width)?;
    Ok(SicGrid::new(height, width, to_f64(tape.value(y)))?.clamped())
}
