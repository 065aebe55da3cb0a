use std::sync::Arc;

use crate::error::{dim_err, Result};
use crate::gradcore::{ParamStore, Scalar, SoftmaxMask, Tape, Var, MASK_SENTINEL};

/// Effective `(window, shift)` for an `h × w` map. The window shrinks to the
/// map when the map is smaller, and a map covered by a single window is not
/// shifted.
pub fn stage_window(window: usize, h: usize, w: usize) -> Result<(usize, usize)> {
    let ws = window.min(h).min(w);
    if ws == 0 || !h.is_multiple_of(ws) || !w.is_multiple_of(ws) {
        return dim_err(format!("attention window {ws} does not divide {h}x{w} map"));
    }
    let shift = if h.min(w) > ws { ws / 2 } else { 0 };
    Ok((ws, shift))
}

/// Source cell of every `(frame, window_y, window_x, y, x)` slot after a
/// cyclic shift by `shift` toward the top-left.
pub fn window_partition_index(frames: usize, h: usize, w: usize, ws: usize, shift: usize) -> Vec<u32> {
    let mut idx = Vec::with_capacity(frames * h * w);
    for f in 0..frames {
        for wy in 0..h / ws {
            for wx in 0..w / ws {
                for iy in 0..ws {
                    for ix in 0..ws {
                        let y = (wy * ws + iy + shift) % h;
                        let x = (wx * ws + ix + shift) % w;
                        idx.push((f * h * w + y * w + x) as u32);
                    }
                }
            }
        }
    }
    idx
}

fn invert(perm: &[u32]) -> Vec<u32> {
    let mut inv = vec![0u32; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p as usize] = i as u32;
    }
    inv
}

/// Row of the bias table for every query/key pair of a `ws × ws` window,
/// for a table built for windows of side `table_ws`.
pub fn relative_position_index(ws: usize, table_ws: usize) -> Vec<u32> {
    let n = ws * ws;
    let side = 2 * table_ws - 1;
    let mut idx = Vec::with_capacity(n * n);
    for i in 0..n {
        let (iy, ix) = (i / ws, i % ws);
        for j in 0..n {
            let (jy, jx) = (j / ws, j % ws);
            let dy = iy + table_ws - 1 - jy;
            let dx = ix + table_ws - 1 - jx;
            idx.push((dy * side + dx) as u32);
        }
    }
    idx
}

/// Additive `[windows, n, n]` mask for shifted windows: pairs of cells that
/// came from different regions of the unshifted map get the sentinel.
pub fn shift_region_mask(h: usize, w: usize, ws: usize, shift: usize) -> Vec<f64> {
    let region = |p: usize, len: usize| {
        if shift == 0 || p < len - ws {
            0
        } else if p < len - shift {
            1
        } else {
            2
        }
    };
    let n = ws * ws;
    let (nwy, nwx) = (h / ws, w / ws);
    let mut out = Vec::with_capacity(nwy * nwx * n * n);
    for wy in 0..nwy {
        for wx in 0..nwx {
            let labels: Vec<usize> = (0..n).map(|i| region(wy * ws + i / ws, h) * 3 + region(wx * ws + i % ws, w)).collect();
            for &a in &labels {
                for &b in &labels {
                    out.push(if a == b { 0.0 } else { MASK_SENTINEL });
                }
            }
        }
    }
    out
}

fn table_window(rows: usize) -> Option<usize> {
    let side = (rows as f64).sqrt().round() as usize;
    (side * side == rows && side % 2 == 1).then_some(side.div_ceil(2))
}

/// (Shifted-)window multi-head self-attention on `[frames, h, w, c]`.
/// Returns the output and the attention probabilities laid out as
/// `[frames, windows, heads, n, n]`.
pub fn window_attention<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    prefix: &str,
    z: Var,
    ws: usize,
    shift: usize,
    heads: usize,
) -> Result<(Var, Var)> {
    let s = tape.shape(z).to_vec();
    if s.len() != 4 {
        return dim_err(format!("window attention expects [frames, h, w, c], got {s:?}"));
    }
    let (f, h, w, c) = (s[0], s[1], s[2], s[3]);
    if ws == 0 || h % ws != 0 || w % ws != 0 {
        return dim_err(format!("attention window {ws} does not divide {h}x{w} map"));
    }
    if shift >= ws {
        return dim_err(format!("shift {shift} must be smaller than window {ws}"));
    }
    if heads == 0 || c % heads != 0 {
        return dim_err(format!("{heads} heads do not divide {c} channels"));
    }
    let hd = c / heads;
    let n = ws * ws;
    let nw = (h / ws) * (w / ws);
    let b = f * nw;

    let part: Arc<[u32]> = window_partition_index(f, h, w, ws, shift).into();
    let unpart: Arc<[u32]> = invert(&part).into();
    let x = tape.gather(z, part, c, &[b, n, c])?;

    let qkv_w = tape.param(store, &format!("{prefix}.qkv.w"))?;
    let qkv_b = tape.param(store, &format!("{prefix}.qkv.b"))?;
    let qkv = tape.linear(x, qkv_w, Some(qkv_b))?;
    let split = |which: usize| -> Arc<[u32]> {
        let mut idx = Vec::with_capacity(b * heads * n);
        for bi in 0..b {
            for hh in 0..heads {
                for i in 0..n {
                    idx.push((((bi * n + i) * 3 + which) * heads + hh) as u32);
                }
            }
        }
        idx.into()
    };
    let q = tape.gather(qkv, split(0), hd, &[b * heads, n, hd])?;
    let k = tape.gather(qkv, split(1), hd, &[b * heads, n, hd])?;
    let v = tape.gather(qkv, split(2), hd, &[b * heads, n, hd])?;

    let scores = tape.batch_matmul(q, k, true)?;
    let scores = tape.scale(scores, T::lit(1.0 / (hd as f64).sqrt()));
    let scores = tape.reshape(scores, &[b, heads, n, n])?;

    let table = tape.param(store, &format!("{prefix}.rel_bias"))?;
    let ts = tape.shape(table).to_vec();
    let tw = match (ts.len(), ts.get(1), table_window(ts[0])) {
        (2, Some(&th), Some(tw)) if th == heads && tw >= ws => tw,
        _ => return dim_err(format!("relative bias table {ts:?} for window {ws} with {heads} heads")),
    };
    let rel = relative_position_index(ws, tw);
    let mut bias_idx = Vec::with_capacity(heads * n * n);
    for hh in 0..heads {
        bias_idx.extend(rel.iter().map(|&r| r * heads as u32 + hh as u32));
    }
    let bias = tape.gather(table, bias_idx.into(), 1, &[heads, n, n])?;
    let scores = tape.add_broadcast(scores, bias)?;

    let probs = if shift > 0 {
        let mask = SoftmaxMask {
            data: shift_region_mask(h, w, ws, shift).into_iter().map(T::lit).collect(),
            windows: nw,
            heads,
            rows: n,
        };
        tape.softmax(scores, Some(&mask))?
    } else {
        tape.softmax(scores, None)?
    };
    let probs_flat = tape.reshape(probs, &[b * heads, n, n])?;
    let ctx = tape.batch_matmul(probs_flat, v, false)?;
    let mut merge = Vec::with_capacity(b * n * heads);
    for bi in 0..b {
        for i in 0..n {
            for hh in 0..heads {
                merge.push(((bi * heads + hh) * n + i) as u32);
            }
        }
    }
    let ctx = tape.gather(ctx, merge.into(), hd, &[b, n, c])?;
    let proj_w = tape.param(store, &format!("{prefix}.proj.w"))?;
    let proj_b = tape.param(store, &format!("{prefix}.proj.b"))?;
    let y = tape.linear(ctx, proj_w, Some(proj_b))?;
    let y = tape.gather(y, unpart, c, &[f, h, w, c])?;
    let probs = tape.reshape(probs, &[f, nw, heads, n, n])?;
    Ok((y, probs))
}

#[allow(clippy::too_many_arguments)]
fn swin_block<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    prefix: &str,
    z: Var,
    ws: usize,
    shift: usize,
    heads: usize,
    eps: f64,
) -> Result<(Var, Var)> {
    let p = |s: &str| format!("{prefix}.{s}");
    let (a, probs) = window_attention(tape, store, &p("attn"), z, ws, shift, heads)?;
    let (g1, b1) = (tape.param(store, &p("norm1.g"))?, tape.param(store, &p("norm1.b"))?);
    let a = tape.layer_norm(a, g1, b1, eps)?;
    let zs = tape.add(a, z)?;

    let (w1, c1) = (tape.param(store, &p("mlp.fc1.w"))?, tape.param(store, &p("mlp.fc1.b"))?);
    let (w2, c2) = (tape.param(store, &p("mlp.fc2.w"))?, tape.param(store, &p("mlp.fc2.b"))?);
    let m = tape.linear(zs, w1, Some(c1))?;
    let m = tape.gelu(m);
    let m = tape.linear(m, w2, Some(c2))?;
    let (g2, b2) = (tape.param(store, &p("norm2.g"))?, tape.param(store, &p("norm2.b"))?);
    let m = tape.layer_norm(m, g2, b2, eps)?;
    Ok((tape.add(m, zs)?, probs))
}

pub struct BlockPairOutput {
    pub out: Var,
    /// Attention probabilities of the regular and the shifted block.
    pub probs: [Var; 2],
    pub shift: usize,
}

/// A regular-window block followed by a shifted-window block, both
/// post-norm residual. `prefix.block0` and `prefix.block1` name the weights.
pub fn swin_block_pair<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    prefix: &str,
    z: Var,
    window: usize,
    heads: usize,
    eps: f64,
) -> Result<BlockPairOutput> {
    let s = tape.shape(z).to_vec();
    if s.len() != 4 {
        return dim_err(format!("swin block expects [frames, h, w, c], got {s:?}"));
    }
    let (ws, shift) = stage_window(window, s[1], s[2])?;
    let (z1, p0) = swin_block(tape, store, &format!("{prefix}.block0"), z, ws, 0, heads, eps)?;
    let (z2, p1) = swin_block(tape, store, &format!("{prefix}.block1"), z1, ws, shift, heads, eps)?;
    Ok(BlockPairOutput { out: z2, probs: [p0, p1], shift })
}
