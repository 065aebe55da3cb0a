use super::attention::{encoder_layer, linear_named, norm};
use super::{Backbone, FusionConfig};
use crate::error::{dim_err, Result};
use crate::gradcore::{ParamStore, Scalar, Tape, Var};
use crate::icegrid::Granularity;
use crate::init::{linear_specs, norm_specs, ParamSpec};

/// Total number of temporal tokens over all granularities.
pub(crate) const ALL_STEPS: usize = 21;

/// Position of a granularity's first token in the 21-token layout.
fn token_offset(g: Granularity) -> usize {
    Granularity::ALL.iter().take_while(|&&o| o != g).map(|o| o.steps()).sum()
}

fn encoder_layer_specs(out: &mut Vec<ParamSpec>, prefix: &str, d: usize, ffn: usize) {
    norm_specs(out, &format!("{prefix}.norm1"), d);
    linear_specs(out, &format!("{prefix}.attn.qkv"), d, 3 * d);
    linear_specs(out, &format!("{prefix}.attn.proj"), d, d);
    norm_specs(out, &format!("{prefix}.norm2"), d);
    linear_specs(out, &format!("{prefix}.ffn.fc1"), d, ffn);
    linear_specs(out, &format!("{prefix}.ffn.fc2"), ffn, d);
}

/// Every fusion parameter, named under `fusion.`. Embeddings and heads exist
/// for all granularities whatever the training mode.
pub fn fusion_param_specs(cfg: &FusionConfig, token_dim: usize) -> Result<Vec<ParamSpec>> {
    cfg.validate(token_dim)?;
    let d = cfg.width(token_dim);
    let ffn = cfg.ffn_width(token_dim);
    let td = token_dim;
    let mut out = Vec::new();
    match cfg.backbone {
        Backbone::Variate => {
            for g in Granularity::ALL {
                linear_specs(&mut out, &format!("fusion.embed.{}", g.name()), g.steps() * td, d);
            }
            for l in 0..cfg.num_layers {
                encoder_layer_specs(&mut out, &format!("fusion.layer{l}"), d, ffn);
            }
            norm_specs(&mut out, "fusion.final_norm", d);
            for g in Granularity::ALL {
                linear_specs(&mut out, &format!("fusion.head.{}", g.name()), d, g.steps() * td);
            }
        }
        Backbone::Temporal => {
            linear_specs(&mut out, "fusion.input", td, d);
            out.push(ParamSpec::weight("fusion.pos", &[ALL_STEPS, d]));
            out.push(ParamSpec::weight("fusion.gran", &[Granularity::ALL.len(), d]));
            for l in 0..cfg.num_layers {
                encoder_layer_specs(&mut out, &format!("fusion.layer{l}"), d, ffn);
            }
            norm_specs(&mut out, "fusion.final_norm", d);
            for g in Granularity::ALL {
                linear_specs(&mut out, &format!("fusion.head.{}", g.name()), g.steps() * d, g.steps() * td);
            }
        }
        Backbone::Mixer => {
            for l in 0..cfg.num_layers {
                let p = format!("fusion.layer{l}");
                norm_specs(&mut out, &format!("{p}.token.norm"), td);
                linear_specs(&mut out, &format!("{p}.token.fc1"), ALL_STEPS, d);
                linear_specs(&mut out, &format!("{p}.token.fc2"), d, ALL_STEPS);
                norm_specs(&mut out, &format!("{p}.channel.norm"), td);
                linear_specs(&mut out, &format!("{p}.channel.fc1"), td, 4 * td);
                linear_specs(&mut out, &format!("{p}.channel.fc2"), 4 * td, td);
            }
            norm_specs(&mut out, "fusion.final_norm", td);
            for g in Granularity::ALL {
                linear_specs(&mut out, &format!("fusion.head.{}", g.name()), g.steps() * td, g.steps() * td);
            }
        }
    }
    for part in ["q", "k", "v"] {
        linear_specs(&mut out, &format!("fusion.skip.{part}"), td, td);
    }
    out.push(ParamSpec::zeros("fusion.skip.o.w", &[td, td]));
    out.push(ParamSpec::zeros("fusion.skip.o.b", &[td]));
    Ok(out)
}

fn check_seq<T: Scalar>(tape: &Tape<T>, g: Granularity, seq: Var, what: &str) -> Result<usize> {
    let s = tape.shape(seq);
    if s.len() != 2 || s[0] != g.steps() {
        return dim_err(format!("{what} for {} needs [{}, token_dim], got {s:?}", g.name(), g.steps()));
    }
    Ok(s[1])
}

/// Flattens a `[L_g, token_dim]` sequence into one `[1, width]` variate token.
pub fn embed_variate<T: Scalar>(tape: &mut Tape<T>, store: &ParamStore<T>, g: Granularity, seq: Var) -> Result<Var> {
    let td = check_seq(tape, g, seq, "variate embedding")?;
    let flat = tape.reshape(seq, &[1, g.steps() * td])?;
    linear_named(tape, store, &format!("fusion.embed.{}", g.name()), flat)
}

/// Attention across variate tokens `[n, width]` followed by the shared
/// per-variate feed-forward, `num_layers` times. Returns the fused tokens and
/// each layer's attention probabilities.
pub fn fuse_variates<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    cfg: &FusionConfig,
    tokens: Var,
) -> Result<(Var, Vec<Var>)> {
    let mut x = tokens;
    let mut probs = Vec::with_capacity(cfg.num_layers);
    for l in 0..cfg.num_layers {
        let (y, p) = encoder_layer(tape, store, &format!("fusion.layer{l}"), x, cfg.num_heads, cfg.ln_eps)?;
        x = y;
        probs.push(p);
    }
    Ok((norm(tape, store, "fusion.final_norm", x, cfg.ln_eps)?, probs))
}

/// Projects one fused row to `[P_g, token_dim]` predicted tokens.
pub fn predict_head<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    g: Granularity,
    fused: Var,
    token_dim: usize,
) -> Result<Var> {
    let flat = tape.shape(fused).iter().product::<usize>();
    let row = tape.reshape(fused, &[1, flat])?;
    let y = linear_named(tape, store, &format!("fusion.head.{}", g.name()), row)?;
    tape.reshape(y, &[g.steps(), token_dim])
}

pub struct SkipOutput {
    pub out: Var,
    /// `[1, L, P]` cross-attention probabilities.
    pub probs: Var,
}

/// Cross-attention from the pre-fusion sequence (queries) onto the predicted
/// tokens (keys and values), added to the prediction.
pub fn sequential_skip<T: Scalar>(tape: &mut Tape<T>, store: &ParamStore<T>, pre: Var, pred: Var) -> Result<SkipOutput> {
    let (sp, sq) = (tape.shape(pre).to_vec(), tape.shape(pred).to_vec());
    if sp.len() != 2 || sp != sq {
        return dim_err(format!("sequential skip needs equal [L, token_dim] shapes, got {sp:?} and {sq:?}"));
    }
    let (l, td) = (sp[0], sp[1]);
    let q = linear_named(tape, store, "fusion.skip.q", pre)?;
    let k = linear_named(tape, store, "fusion.skip.k", pred)?;
    let v = linear_named(tape, store, "fusion.skip.v", pred)?;
    let q = tape.reshape(q, &[1, l, td])?;
    let k = tape.reshape(k, &[1, l, td])?;
    let v = tape.reshape(v, &[1, l, td])?;
    let scores = tape.batch_matmul(q, k, true)?;
    let scores = tape.scale(scores, T::lit(1.0 / (td as f64).sqrt()));
    let probs = tape.softmax(scores, None)?;
    let ctx = tape.batch_matmul(probs, v, false)?;
    let ctx = tape.reshape(ctx, &[l, td])?;
    let o = linear_named(tape, store, "fusion.skip.o", ctx)?;
    Ok(SkipOutput { out: tape.add(pred, o)?, probs })
}

fn variate_fusion<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    cfg: &FusionConfig,
    seqs: &[(Granularity, Var)],
) -> Result<Vec<Var>> {
    let mut tokens = Vec::with_capacity(seqs.len());
    let mut td = 0;
    for &(g, seq) in seqs {
        td = check_seq(tape, g, seq, "variate fusion")?;
        tokens.push(embed_variate(tape, store, g, seq)?);
    }
    let stacked = tape.concat(&tokens, 0)?;
    let (fused, _) = fuse_variates(tape, store, cfg, stacked)?;
    let mut out = Vec::with_capacity(seqs.len());
    for (i, &(g, _)) in seqs.iter().enumerate() {
        let row = tape.slice(fused, 0, i, 1)?;
        out.push(predict_head(tape, store, g, row, td)?);
    }
    Ok(out)
}

/// Temporal-token backbone: attention across all input tokens with learned
/// position and granularity embeddings.
pub fn temporal_fusion<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    cfg: &FusionConfig,
    seqs: &[(Granularity, Var)],
) -> Result<Vec<Var>> {
    let mut td = 0;
    let mut positions = Vec::new();
    let mut grans = Vec::new();
    for &(g, seq) in seqs {
        td = check_seq(tape, g, seq, "temporal fusion")?;
        positions.extend((0..g.steps()).map(|i| (token_offset(g) + i) as u32));
        grans.extend(std::iter::repeat_n(g.index() as u32, g.steps()));
    }
    let n = positions.len();
    let d = cfg.width(td);
    let parts: Vec<Var> = seqs.iter().map(|&(_, s)| s).collect();
    let x = tape.concat(&parts, 0)?;
    let x = linear_named(tape, store, "fusion.input", x)?;
    let pos_table = tape.param(store, "fusion.pos")?;
    let pos = tape.gather(pos_table, positions.into(), d, &[n, d])?;
    let gran_table = tape.param(store, "fusion.gran")?;
    let gran = tape.gather(gran_table, grans.into(), d, &[n, d])?;
    let x = tape.add(x, pos)?;
    let mut x = tape.add(x, gran)?;
    for l in 0..cfg.num_layers {
        x = encoder_layer(tape, store, &format!("fusion.layer{l}"), x, cfg.num_heads, cfg.ln_eps)?.0;
    }
    let x = norm(tape, store, "fusion.final_norm", x, cfg.ln_eps)?;
    let mut out = Vec::with_capacity(seqs.len());
    let mut start = 0;
    for &(g, _) in seqs {
        let rows = tape.slice(x, 0, start, g.steps())?;
        start += g.steps();
        out.push(predict_head(tape, store, g, rows, td)?);
    }
    Ok(out)
}

/// MLP-mixer backbone: token mixing across positions, then channel mixing
/// across the token width. With fewer than all granularities present, the
/// token-mixing weights are restricted to the present positions.
pub fn mixer_fusion<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    cfg: &FusionConfig,
    seqs: &[(Granularity, Var)],
) -> Result<Vec<Var>> {
    let mut td = 0;
    for &(g, seq) in seqs {
        td = check_seq(tape, g, seq, "mixer fusion")?;
    }
    let parts: Vec<Var> = seqs.iter().map(|&(_, s)| s).collect();
    let mut x = tape.concat(&parts, 0)?;
    let n = tape.shape(x)[0];
    let spans: Vec<(usize, usize)> = seqs.iter().map(|&(g, _)| (token_offset(g), g.steps())).collect();
    let pick = |tape: &mut Tape<T>, v: Var, axis: usize| -> Result<Var> {
        if n == ALL_STEPS {
            return Ok(v);
        }
        let pieces = spans.iter().map(|&(s, l)| tape.slice(v, axis, s, l)).collect::<Result<Vec<_>>>()?;
        tape.concat(&pieces, axis)
    };
    for l in 0..cfg.num_layers {
        let p = format!("fusion.layer{l}");
        let h = norm(tape, store, &format!("{p}.token.norm"), x, cfg.ln_eps)?;
        let ht = tape.transpose(h, 0, 1)?;
        let w1 = tape.param(store, &format!("{p}.token.fc1.w"))?;
        let w1 = pick(tape, w1, 0)?;
        let b1 = tape.param(store, &format!("{p}.token.fc1.b"))?;
        let w2 = tape.param(store, &format!("{p}.token.fc2.w"))?;
        let w2 = pick(tape, w2, 1)?;
        let b2 = tape.param(store, &format!("{p}.token.fc2.b"))?;
        let b2 = pick(tape, b2, 0)?;
        let m = tape.linear(ht, w1, Some(b1))?;
        let m = tape.gelu(m);
        let m = tape.linear(m, w2, Some(b2))?;
        let m = tape.transpose(m, 0, 1)?;
        x = tape.add(x, m)?;

        let h = norm(tape, store, &format!("{p}.channel.norm"), x, cfg.ln_eps)?;
        let h = linear_named(tape, store, &format!("{p}.channel.fc1"), h)?;
        let h = tape.gelu(h);
        let h = linear_named(tape, store, &format!("{p}.channel.fc2"), h)?;
        x = tape.add(x, h)?;
    }
    let x = norm(tape, store, "fusion.final_norm", x, cfg.ln_eps)?;
    let mut out = Vec::with_capacity(seqs.len());
    let mut start = 0;
    for &(g, _) in seqs {
        let rows = tape.slice(x, 0, start, g.steps())?;
        start += g.steps();
        out.push(predict_head(tape, store, g, rows, td)?);
    }
    Ok(out)
}

/// Predicted `[P_g, token_dim]` tokens for every given `(granularity,
/// [L_g, token_dim] sequence)`, through the configured backbone and the
/// sequential skip. Granularities must be distinct and in canonical order.
pub fn fusion_forward<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    cfg: &FusionConfig,
    seqs: &[(Granularity, Var)],
) -> Result<Vec<Var>> {
    if seqs.is_empty() || seqs.windows(2).any(|w| w[0].0.index() >= w[1].0.index()) {
        return dim_err("fusion needs distinct granularities in daily, weekly, monthly order");
    }
    let pred = match cfg.backbone {
        Backbone::Variate => variate_fusion(tape, store, cfg, seqs)?,
        Backbone::Temporal => temporal_fusion(tape, store, cfg, seqs)?,
        Backbone::Mixer => mixer_fusion(tape, store, cfg, seqs)?,
    };
    seqs.iter().zip(pred).map(|(&(_, pre), p)| Ok(sequential_skip(tape, store, pre, p)?.out)).collect()
}
