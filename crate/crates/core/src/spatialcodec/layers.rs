use crate::error::{dim_err, Result};
use crate::gradcore::{ParamStore, Scalar, Tape, Var};

/// Order of the four cells of a 2×2 group: (row, col) = (0,0), (1,0), (0,1), (1,1).
const QUAD: [(usize, usize); 4] = [(0, 0), (1, 0), (0, 1), (1, 1)];

/// For every `(frame, y, x, quad)` slot of the half-resolution map, the
/// full-resolution cell it comes from.
fn quad_index(frames: usize, h2: usize, w2: usize) -> Vec<u32> {
    let (h, w) = (h2 * 2, w2 * 2);
    let mut idx = Vec::with_capacity(frames * h * w);
    for f in 0..frames {
        for y in 0..h2 {
            for x in 0..w2 {
                for (dy, dx) in QUAD {
                    idx.push((f * h * w + (2 * y + dy) * w + 2 * x + dx) as u32);
                }
            }
        }
    }
    idx
}

fn inverse(perm: &[u32]) -> Vec<u32> {
    let mut inv = vec![0u32; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p as usize] = i as u32;
    }
    inv
}

fn linear_named<T: Scalar>(tape: &mut Tape<T>, store: &ParamStore<T>, prefix: &str, x: Var) -> Result<Var> {
    let w = tape.param(store, &format!("{prefix}.w"))?;
    let b = tape.param(store, &format!("{prefix}.b"))?;
    tape.linear(x, w, Some(b))
}

/// `[frames, H, W]` grids to `[frames, H/2, W/2, c]` features, one learned
/// linear map per 2×2 patch.
pub fn patch_partition<T: Scalar>(tape: &mut Tape<T>, store: &ParamStore<T>, prefix: &str, frames: Var) -> Result<Var> {
    let s = tape.shape(frames).to_vec();
    if s.len() != 3 || !s[1].is_multiple_of(2) || !s[2].is_multiple_of(2) {
        return dim_err(format!("patch partition needs [frames, H, W] with even H and W, got {s:?}"));
    }
    let (f, h2, w2) = (s[0], s[1] / 2, s[2] / 2);
    let patches = tape.gather(frames, quad_index(f, h2, w2).into(), 1, &[f, h2, w2, 4])?;
    linear_named(tape, store, prefix, patches)
}

/// Concatenates each 2×2 neighbourhood (`4c`) and reduces it to `2c`.
pub fn patch_merge<T: Scalar>(tape: &mut Tape<T>, store: &ParamStore<T>, prefix: &str, z: Var) -> Result<Var> {
    let s = tape.shape(z).to_vec();
    if s.len() != 4 || !s[1].is_multiple_of(2) || !s[2].is_multiple_of(2) {
        return dim_err(format!("patch merge needs [frames, h, w, c] with even h and w, got {s:?}"));
    }
    let (f, h2, w2, c) = (s[0], s[1] / 2, s[2] / 2, s[3]);
    let cat = tape.gather(z, quad_index(f, h2, w2).into(), c, &[f, h2, w2, 4 * c])?;
    linear_named(tape, store, prefix, cat)
}

/// Expands `c` channels to `2c`, then spreads them over a 2×2 neighbourhood
/// of `c/2` channels each. Shape inverse of [`patch_merge`].
pub fn patch_expand<T: Scalar>(tape: &mut Tape<T>, store: &ParamStore<T>, prefix: &str, z: Var) -> Result<Var> {
    let s = tape.shape(z).to_vec();
    if s.len() != 4 || !s[3].is_multiple_of(2) {
        return dim_err(format!("patch expand needs [frames, h, w, c] with even c, got {s:?}"));
    }
    let (f, h, w, c) = (s[0], s[1], s[2], s[3]);
    let wide = linear_named(tape, store, prefix, z)?;
    let idx = inverse(&quad_index(f, h, w));
    tape.gather(wide, idx.into(), c / 2, &[f, 2 * h, 2 * w, c / 2])
}

/// Maps every stem cell to its 2×2 output patch: `[frames, h, w, c]` to
/// `[frames, 2h, 2w]`.
pub fn decoder_head<T: Scalar>(tape: &mut Tape<T>, store: &ParamStore<T>, prefix: &str, z: Var) -> Result<Var> {
    let s = tape.shape(z).to_vec();
    if s.len() != 4 {
        return dim_err(format!("decoder head needs [frames, h, w, c], got {s:?}"));
    }
    let (f, h, w) = (s[0], s[1], s[2]);
    let patches = linear_named(tape, store, prefix, z)?;
    let idx = inverse(&quad_index(f, h, w));
    tape.gather(patches, idx.into(), 1, &[f, 2 * h, 2 * w])
}
