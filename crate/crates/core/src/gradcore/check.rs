//! Central finite-difference gradient checking.

use std::sync::Arc;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::scalar::Scalar;
use super::tape::{OpKind, SoftmaxMask, Tape, Var, MASK_SENTINEL};
use super::tensor::{ParamStore, Tensor};
use crate::error::Result;

/// Finite-difference step used by every f64 check.
pub const FD_STEP: f64 = 1e-5;

/// Gradient norms below this are compared as if they had this norm, so that
/// finite-difference round-off on vanishing gradients is not reported as a
/// large relative error.
pub const GRAD_NORM_FLOOR: f64 = 1e-4;

/// Relative error between an analytic and a numeric gradient sample.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic.iter().zip(numeric).map(|(a, n)| (a - n) * (a - n)).sum::<f64>().sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    diff / na.max(nn).max(GRAD_NORM_FLOOR)
}

/// Result of checking the gradient of one input.
#[derive(Debug, Clone)]
pub struct InputCheck {
    pub input: usize,
    pub entries: usize,
    pub rel_err: f64,
}

/// Compares tape gradients of a scalar function with central differences.
///
/// `f` builds the loss from leaves created for `inputs`. At most
/// `max_entries` coordinates per input are probed (all if `None`).
pub fn check_gradients<F>(
    inputs: &[Tensor<f64>],
    f: F,
    max_entries: Option<usize>,
    seed: u64,
    fault: Option<OpKind>,
) -> Result<Vec<InputCheck>>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    if let Some(k) = fault {
        tape.inject_sign_fault(k);
    }
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(&t.clone().with_grad())).collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;

    let eval = |ins: &[Tensor<f64>]| -> Result<f64> {
        let mut t = Tape::inference();
        let vs: Vec<Var> = ins.iter().map(|x| t.leaf(x)).collect();
        let l = f(&mut t, &vs)?;
        Ok(t.value(l)[0])
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for (i, var) in vars.iter().enumerate() {
        let n = inputs[i].len();
        let picks: Vec<usize> = match max_entries {
            Some(k) if k < n => {
                let mut p = sample(&mut rng, n, k).into_vec();
                p.sort_unstable();
                p
            }
            _ => (0..n).collect(),
        };
        let analytic_full = tape.grad(*var).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; n]);
        let mut analytic = Vec::with_capacity(picks.len());
        let mut numeric = Vec::with_capacity(picks.len());
        for &j in &picks {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + FD_STEP;
            let up = eval(&work)?;
            work[i].data_mut()[j] = orig - FD_STEP;
            let down = eval(&work)?;
            work[i].data_mut()[j] = orig;
            numeric.push((up - down) / (2.0 * FD_STEP));
            analytic.push(analytic_full[j]);
        }
        out.push(InputCheck { input: i, entries: picks.len(), rel_err: relative_error(&analytic, &numeric) });
    }
    Ok(out)
}

/// Result of checking the gradient of one named parameter.
#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    pub entries: usize,
    pub rel_err: f64,
}

/// Like [`check_gradients`] for a loss that reads its weights from a
/// parameter store. Every parameter is probed at up to `max_entries`
/// coordinates.
pub fn check_param_gradients<F>(store: &ParamStore<f64>, f: F, max_entries: Option<usize>, seed: u64) -> Result<Vec<ParamCheck>>
where
    F: Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = f(&mut tape, store)?;
    tape.backward(loss)?;
    let mut grads = store.clone();
    grads.zero_grad();
    grads.accumulate_grads(&tape)?;

    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let mut t = Tape::inference();
        let l = f(&mut t, s)?;
        Ok(t.value(l)[0])
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut work = store.clone();
    let mut out = Vec::with_capacity(store.len());
    for name in store.names().to_vec() {
        let n = store.get(&name)?.len();
        let picks: Vec<usize> = match max_entries {
            Some(k) if k < n => {
                let mut p = sample(&mut rng, n, k).into_vec();
                p.sort_unstable();
                p
            }
            _ => (0..n).collect(),
        };
        let g = grads.get(&name)?.grad.clone().unwrap_or_else(|| vec![0.0; n]);
        let mut analytic = Vec::with_capacity(picks.len());
        let mut numeric = Vec::with_capacity(picks.len());
        for &j in &picks {
            let orig = work.get(&name)?.data()[j];
            work.get_mut(&name)?.data_mut()[j] = orig + FD_STEP;
            let up = eval(&work)?;
            work.get_mut(&name)?.data_mut()[j] = orig - FD_STEP;
            let down = eval(&work)?;
            work.get_mut(&name)?.data_mut()[j] = orig;
            numeric.push((up - down) / (2.0 * FD_STEP));
            analytic.push(g[j]);
        }
        out.push(ParamCheck { name, entries: picks.len(), rel_err: relative_error(&analytic, &numeric) });
    }
    Ok(out)
}

/// Adds uniform noise in `[-spread, spread)` to every parameter, moving a
/// fresh initialization away from its exact zeros and ones.
pub fn jitter<T: Scalar>(store: &mut ParamStore<T>, spread: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (_, t) in store.iter_mut() {
        for v in t.data_mut() {
            *v += T::lit(rng.random_range(-spread..spread));
        }
    }
}

/// A scalar loss over a parameter store that can be built at any precision.
pub trait Objective {
    fn build<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>) -> Result<Var>;
}

fn store_gradients<T: Scalar, O: Objective>(store: &ParamStore<T>, obj: &O) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let loss = obj.build(&mut tape, store)?;
    tape.backward(loss)?;
    let mut g = store.clone();
    g.zero_grad();
    g.accumulate_grads(&tape)?;
    Ok(g.iter().flat_map(|(_, t)| t.grad.clone().unwrap_or_else(|| vec![T::zero(); t.len()])).map(|x| x.to_f64_lossy()).collect())
}

/// Relative error of single precision gradients against double precision
/// gradients of the same objective at the same (f32-rounded) parameters.
pub fn single_precision_error<O: Objective>(store: &ParamStore<f64>, obj: &O) -> Result<f64> {
    let s32 = store.cast::<f32>();
    let a = store_gradients(&s32, obj)?;
    let b = store_gradients(&s32.cast::<f64>(), obj)?;
    Ok(relative_error(&a, &b))
}

pub(crate) fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("valid shape")
}

/// `sum(y * r)` for a fixed random `r`, so every output coordinate carries a
/// distinct weight into the loss. The reduction is routed around `avoid` so a
/// fault injected into that op is not applied twice and cancelled.
pub(crate) fn weighted_sum(tape: &mut Tape<f64>, y: Var, seed: u64, avoid: Option<OpKind>) -> Result<Var> {
    let shape = tape.shape(y).to_vec();
    let n: usize = shape.iter().product();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let r = random_tensor(&mut rng, &shape).into_data();
    if matches!(avoid, Some(OpKind::Mul | OpKind::Sum)) {
        let flat = tape.reshape(y, &[1, n])?;
        let rv = tape.constant(&[n, 1], r)?;
        return tape.matmul(flat, rv);
    }
    let rv = tape.constant(&shape, r)?;
    let p = tape.mul(y, rv)?;
    Ok(tape.sum(p))
}

/// Outcome of the per-op finite-difference audit for one op kind.
#[derive(Debug, Clone)]
pub struct OpCheckRow {
    pub op: OpKind,
    pub cases: usize,
    pub max_rel_err: f64,
}

impl OpCheckRow {
    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

type Case = (Vec<Vec<usize>>, Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>);

fn op_cases(op: OpKind) -> Vec<Case> {
    fn c<F>(shapes: Vec<Vec<usize>>, f: F) -> Case
    where
        F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + 'static,
    {
        (shapes, Box::new(f))
    }
    match op {
        OpKind::MatMul => [(4, 5, 3), (1, 2, 1), (3, 4, 5)]
            .into_iter()
            .map(|(m, k, n)| c(vec![vec![m, k], vec![k, n]], |t, v| t.matmul(v[0], v[1])))
            .collect(),
        OpKind::BatchMatMul => vec![
            c(vec![vec![3, 4, 5], vec![3, 5, 2]], |t, v| t.batch_matmul(v[0], v[1], false)),
            c(vec![vec![2, 3, 4], vec![2, 5, 4]], |t, v| t.batch_matmul(v[0], v[1], true)),
            c(vec![vec![4, 2, 2], vec![4, 2, 3]], |t, v| t.batch_matmul(v[0], v[1], false)),
        ],
        OpKind::Linear => vec![
            c(vec![vec![3, 4, 5], vec![5, 2], vec![2]], |t, v| t.linear(v[0], v[1], Some(v[2]))),
            c(vec![vec![6, 3], vec![3, 4]], |t, v| t.linear(v[0], v[1], None)),
            c(vec![vec![2, 2, 2, 3], vec![3, 3], vec![3]], |t, v| t.linear(v[0], v[1], Some(v[2]))),
        ],
        OpKind::Add => shapes3().into_iter().map(|s| c(vec![s.clone(), s], |t, v| t.add(v[0], v[1]))).collect(),
        OpKind::AddBroadcast => vec![
            c(vec![vec![3, 4, 5], vec![4, 5]], |t, v| t.add_broadcast(v[0], v[1])),
            c(vec![vec![3, 4, 5], vec![5]], |t, v| t.add_broadcast(v[0], v[1])),
            c(vec![vec![2, 3], vec![2, 3]], |t, v| t.add_broadcast(v[0], v[1])),
        ],
        OpKind::Sub => shapes3().into_iter().map(|s| c(vec![s.clone(), s], |t, v| t.sub(v[0], v[1]))).collect(),
        OpKind::Mul => shapes3().into_iter().map(|s| c(vec![s.clone(), s], |t, v| t.mul(v[0], v[1]))).collect(),
        OpKind::Scale => shapes3().into_iter().map(|s| c(vec![s], |t, v| Ok(t.scale(v[0], -1.7)))).collect(),
        OpKind::Gelu => shapes3().into_iter().map(|s| c(vec![s], |t, v| Ok(t.gelu(v[0])))).collect(),
        OpKind::LayerNorm => vec![
            c(vec![vec![8, 16], vec![16], vec![16]], |t, v| t.layer_norm(v[0], v[1], v[2], 1e-5)),
            c(vec![vec![3, 4, 5], vec![5], vec![5]], |t, v| t.layer_norm(v[0], v[1], v[2], 1e-5)),
            c(vec![vec![2, 7], vec![7], vec![7]], |t, v| t.layer_norm(v[0], v[1], v[2], 1e-5)),
        ],
        OpKind::Softmax => vec![
            c(vec![vec![3, 4, 5]], |t, v| t.softmax(v[0], None)),
            c(vec![vec![6, 2]], |t, v| t.softmax(v[0], None)),
            c(vec![vec![2, 2, 2, 3, 3]], |t, v| {
                // [outer, windows, heads, rows, cols] with one masked pair per row
                let mut m = vec![0.0; 2 * 3 * 3];
                for w in 0..2 {
                    for r in 0..3 {
                        m[(w * 3 + r) * 3 + (r + 1 + w) % 3] = MASK_SENTINEL;
                    }
                }
                let mask = SoftmaxMask { data: Arc::from(m), windows: 2, heads: 2, rows: 3 };
                t.softmax(v[0], Some(&mask))
            }),
        ],
        OpKind::Gather => vec![
            c(vec![vec![3, 4, 5]], |t, v| {
                let idx: Vec<u32> = (0..40u32).map(|i| (i * 7 + 3) % 60).collect();
                t.gather(v[0], idx.into(), 1, &[8, 5])
            }),
            c(vec![vec![6]], |t, v| t.gather(v[0], vec![2u32, 0, 2, 1].into(), 2, &[2, 2, 2])),
            c(vec![vec![4, 4]], |t, v| {
                let idx: Vec<u32> = (0..16u32).rev().collect();
                t.gather(v[0], idx.into(), 1, &[16])
            }),
        ],
        OpKind::Reshape => vec![
            c(vec![vec![3, 4, 5]], |t, v| t.reshape(v[0], &[12, 5])),
            c(vec![vec![6, 2]], |t, v| t.reshape(v[0], &[3, 2, 2])),
            c(vec![vec![2, 3, 4, 1]], |t, v| t.reshape(v[0], &[24])),
        ],
        OpKind::Permute => vec![
            c(vec![vec![3, 4, 5]], |t, v| t.permute(v[0], &[2, 0, 1])),
            c(vec![vec![4, 6]], |t, v| t.transpose(v[0], 0, 1)),
            c(vec![vec![2, 3, 4, 5]], |t, v| t.permute(v[0], &[0, 2, 1, 3])),
        ],
        OpKind::Concat => vec![
            c(vec![vec![3, 4, 5], vec![3, 2, 5]], |t, v| t.concat(&[v[0], v[1]], 1)),
            c(vec![vec![2, 3], vec![1, 3], vec![4, 3]], |t, v| t.concat(&[v[0], v[1], v[2]], 0)),
            c(vec![vec![3, 4, 5], vec![3, 4, 1]], |t, v| t.concat(&[v[0], v[1]], 2)),
        ],
        OpKind::Slice => vec![
            c(vec![vec![3, 4, 5]], |t, v| t.slice(v[0], 1, 1, 2)),
            c(vec![vec![6, 2]], |t, v| t.slice(v[0], 0, 3, 3)),
            c(vec![vec![3, 4, 5]], |t, v| t.slice(v[0], 2, 0, 4)),
        ],
        OpKind::MeanAxis => vec![
            c(vec![vec![3, 4, 5]], |t, v| t.mean_axis(v[0], 1)),
            c(vec![vec![3, 4, 5]], |t, v| t.mean_axis(v[0], 2)),
            c(vec![vec![7]], |t, v| t.mean_axis(v[0], 0)),
        ],
        OpKind::Sum => shapes3().into_iter().map(|s| c(vec![s], |t, v| Ok(t.sum(v[0])))).collect(),
        OpKind::Mean => shapes3().into_iter().map(|s| c(vec![s], |t, v| Ok(t.mean(v[0])))).collect(),
    }
}

fn shapes3() -> Vec<Vec<usize>> {
    vec![vec![3, 4, 5], vec![7], vec![2, 6]]
}

/// Finite-difference audit of one op kind over its registered shapes.
pub fn check_op(op: OpKind, seed: u64, fault: Option<OpKind>) -> Result<OpCheckRow> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cases = op_cases(op);
    let mut max_rel_err: f64 = 0.0;
    for (ci, (shapes, f)) in cases.iter().enumerate() {
        let inputs: Vec<Tensor<f64>> = shapes.iter().map(|s| random_tensor(&mut rng, s)).collect();
        let case_seed = seed.wrapping_add(ci as u64);
        let checks = check_gradients(
            &inputs,
            |t, v| {
                let y = f(t, v)?;
                weighted_sum(t, y, case_seed, fault)
            },
            None,
            case_seed,
            fault,
        )?;
        for ch in checks {
            max_rel_err = max_rel_err.max(ch.rel_err);
        }
    }
    Ok(OpCheckRow { op, cases: cases.len(), max_rel_err })
}

/// Audits every registered op kind once.
pub fn check_all_ops(seed: u64, fault: Option<OpKind>) -> Result<Vec<OpCheckRow>> {
    OpKind::ALL.iter().map(|&op| check_op(op, seed, fault)).collect()
}
