use crate::error::{dim_err, Result};
use crate::gradcore::{ParamStore, Scalar, Tape, Var};

pub(crate) fn linear_named<T: Scalar>(tape: &mut Tape<T>, store: &ParamStore<T>, prefix: &str, x: Var) -> Result<Var> {
    let w = tape.param(store, &format!("{prefix}.w"))?;
    let b = tape.param(store, &format!("{prefix}.b"))?;
    tape.linear(x, w, Some(b))
}

pub(crate) fn norm<T: Scalar>(tape: &mut Tape<T>, store: &ParamStore<T>, prefix: &str, x: Var, eps: f64) -> Result<Var> {
    let g = tape.param(store, &format!("{prefix}.g"))?;
    let b = tape.param(store, &format!("{prefix}.b"))?;
    tape.layer_norm(x, g, b, eps)
}

/// Multi-head self-attention over the rows of `[n, d]`. Returns the output
/// and the `[heads, n, n]` probabilities.
pub fn self_attention<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    prefix: &str,
    x: Var,
    heads: usize,
) -> Result<(Var, Var)> {
    let s = tape.shape(x).to_vec();
    if s.len() != 2 || heads == 0 || !s[1].is_multiple_of(heads) {
        return dim_err(format!("self attention over {s:?} with {heads} heads"));
    }
    let (n, d) = (s[0], s[1]);
    let hd = d / heads;
    let qkv = linear_named(tape, store, &format!("{prefix}.qkv"), x)?;
    let split = |which: usize| -> Vec<u32> {
        let mut idx = Vec::with_capacity(heads * n);
        for h in 0..heads {
            for i in 0..n {
                idx.push(((i * 3 + which) * heads + h) as u32);
            }
        }
        idx
    };
    let q = tape.gather(qkv, split(0).into(), hd, &[heads, n, hd])?;
    let k = tape.gather(qkv, split(1).into(), hd, &[heads, n, hd])?;
    let v = tape.gather(qkv, split(2).into(), hd, &[heads, n, hd])?;
    let scores = tape.batch_matmul(q, k, true)?;
    let scores = tape.scale(scores, T::lit(1.0 / (hd as f64).sqrt()));
    let probs = tape.softmax(scores, None)?;
    let ctx = tape.batch_matmul(probs, v, false)?;
    let mut merge = Vec::with_capacity(n * heads);
    for i in 0..n {
        for h in 0..heads {
            merge.push((h * n + i) as u32);
        }
    }
    let ctx = tape.gather(ctx, merge.into(), hd, &[n, d])?;
    Ok((linear_named(tape, store, &format!("{prefix}.proj"), ctx)?, probs))
}

/// Pre-norm encoder layer: attention then a GELU feed-forward, each added
/// back to its input. The feed-forward acts on every row independently.
pub fn encoder_layer<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    prefix: &str,
    x: Var,
    heads: usize,
    eps: f64,
) -> Result<(Var, Var)> {
    let h = norm(tape, store, &format!("{prefix}.norm1"), x, eps)?;
    let (a, probs) = self_attention(tape, store, &format!("{prefix}.attn"), h, heads)?;
    let x = tape.add(x, a)?;
    let h = norm(tape, store, &format!("{prefix}.norm2"), x, eps)?;
    let h = linear_named(tape, store, &format!("{prefix}.ffn.fc1"), h)?;
    let h = tape.gelu(h);
    let h = linear_named(tape, store, &format!("{prefix}.ffn.fc2"), h)?;
    Ok((tape.add(x, h)?, probs))
}
