//! Define-by-run reverse-mode tape.
//!
//! Every forward op appends a node holding its value and the information its
//! backward rule needs. `backward` walks the nodes once in reverse order.

use std::collections::HashMap;
use std::sync::Arc;

use super::scalar::Scalar;
use super::tensor::{check_shape, ParamId, ParamStore, Tensor};
use crate::error::{dim_err, Result, SifmError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Additive scores at or below this value are treated as masked out and
/// receive exactly zero probability.
pub const MASK_SENTINEL: f64 = -1.0e30;

/// Every differentiable op kind the tape can record.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OpKind {
    MatMul,
    BatchMatMul,
    Linear,
    Add,
    AddBroadcast,
    Sub,
    Mul,
    Scale,
    Gelu,
    LayerNorm,
    Softmax,
    Gather,
    Reshape,
    Permute,
    Concat,
    Slice,
    MeanAxis,
    Sum,
    Mean,
}

impl OpKind {
    pub const ALL: [OpKind; 19] = [
        OpKind::MatMul,
        OpKind::BatchMatMul,
        OpKind::Linear,
        OpKind::Add,
        OpKind::AddBroadcast,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Scale,
        OpKind::Gelu,
        OpKind::LayerNorm,
        OpKind::Softmax,
        OpKind::Gather,
        OpKind::Reshape,
        OpKind::Permute,
        OpKind::Concat,
        OpKind::Slice,
        OpKind::MeanAxis,
        OpKind::Sum,
        OpKind::Mean,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::MatMul => "matmul",
            OpKind::BatchMatMul => "batch_matmul",
            OpKind::Linear => "linear",
            OpKind::Add => "add",
            OpKind::AddBroadcast => "add_broadcast",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Scale => "scale",
            OpKind::Gelu => "gelu",
            OpKind::LayerNorm => "layer_norm",
            OpKind::Softmax => "softmax",
            OpKind::Gather => "gather",
            OpKind::Reshape => "reshape",
            OpKind::Permute => "transpose",
            OpKind::Concat => "concat",
            OpKind::Slice => "slice",
            OpKind::MeanAxis => "mean_axis",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
        }
    }

    pub fn from_name(name: &str) -> Option<OpKind> {
        OpKind::ALL.into_iter().find(|k| k.name() == name)
    }
}

/// Additive mask for attention scores laid out as
/// `[outer, windows, heads, rows, cols]`: the entry for a score is
/// `data[window][row][col]`, shared over `outer` and `heads`.
#[derive(Debug, Clone)]
pub struct SoftmaxMask<T> {
    pub data: Arc<[T]>,
    pub windows: usize,
    pub heads: usize,
    pub rows: usize,
}

impl<T: Scalar> SoftmaxMask<T> {
    fn offset(&self, row: usize, n: usize) -> usize {
        let q = row % self.rows;
        let w = (row / (self.rows * self.heads)) % self.windows;
        (w * self.rows + q) * n
    }
}

enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    BatchMatMul { a: Var, b: Var, batch: usize, m: usize, k: usize, n: usize, trans_b: bool },
    Linear { x: Var, w: Var, b: Option<Var>, rows: usize, inp: usize, out: usize },
    Add { a: Var, b: Var },
    AddBroadcast { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, c: T },
    Gelu { a: Var, tanh: Vec<T> },
    LayerNorm { x: Var, gain: Var, bias: Var, d: usize, stats: Vec<T> },
    Softmax { x: Var, n: usize },
    Gather { x: Var, idx: Arc<[u32]>, block: usize },
    Reshape { x: Var },
    Permute { x: Var, idx: Arc<[u32]> },
    Concat { parts: Vec<Var>, axis_lens: Vec<usize>, outer: usize, inner: usize },
    Slice { x: Var, outer: usize, axis_len: usize, start: usize, len: usize, inner: usize },
    MeanAxis { x: Var, outer: usize, axis_len: usize, inner: usize },
    Sum { x: Var },
    Mean { x: Var },
}

impl<T> Op<T> {
    fn kind(&self) -> Option<OpKind> {
        Some(match self {
            Op::Leaf => return None,
            Op::MatMul { .. } => OpKind::MatMul,
            Op::BatchMatMul { .. } => OpKind::BatchMatMul,
            Op::Linear { .. } => OpKind::Linear,
            Op::Add { .. } => OpKind::Add,
            Op::AddBroadcast { .. } => OpKind::AddBroadcast,
            Op::Sub { .. } => OpKind::Sub,
            Op::Mul { .. } => OpKind::Mul,
            Op::Scale { .. } => OpKind::Scale,
            Op::Gelu { .. } => OpKind::Gelu,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Softmax { .. } => OpKind::Softmax,
            Op::Gather { .. } => OpKind::Gather,
            Op::Reshape { .. } => OpKind::Reshape,
            Op::Permute { .. } => OpKind::Permute,
            Op::Concat { .. } => OpKind::Concat,
            Op::Slice { .. } => OpKind::Slice,
            Op::MeanAxis { .. } => OpKind::MeanAxis,
            Op::Sum { .. } => OpKind::Sum,
            Op::Mean { .. } => OpKind::Mean,
        })
    }
}

struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Records a forward computation and replays it in reverse for gradients.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
    leaf_grads: HashMap<usize, Vec<T>>,
    grad_enabled: bool,
    sign_fault: Option<OpKind>,
    store_tag: Option<u64>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            leaf_grads: HashMap::new(),
            grad_enabled: true,
            sign_fault: None,
            store_tag: None,
        }
    }

    /// A tape that evaluates values only and records no backward rules.
    pub fn inference() -> Self {
        Self { grad_enabled: false, ..Self::new() }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    /// Flips the sign of every gradient propagated by ops of `kind`. Used to
    /// confirm that the gradient checker detects a broken backward rule.
    pub fn inject_sign_fault(&mut self, kind: OpKind) {
        self.sign_fault = Some(kind);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn to_tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor::new(&n.shape, n.value.clone()).expect("node shapes are validated on push")
    }

    /// Gradient of the last `backward` loss with respect to a leaf.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.leaf_grads.get(&v.0).map(Vec::as_slice)
    }

    pub(crate) fn param_leaves(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.params.iter().map(|(&id, &v)| (id, v))
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, inputs: &[Var]) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let needs_grad = self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        let op = if needs_grad { op } else { Op::Leaf };
        self.nodes.push(Node { shape, value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn push_leaf(&mut self, shape: Vec<usize>, value: Vec<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { shape, value, op: Op::Leaf, needs_grad: requires_grad && self.grad_enabled });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf holding a copy of `t`.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Var {
        self.push_leaf(t.shape().to_vec(), t.data().to_vec(), t.requires_grad)
    }

    /// Records a constant (never differentiated) value.
    pub fn constant(&mut self, shape: &[usize], data: Vec<T>) -> Result<Var> {
        let n = check_shape(shape)?;
        if n != data.len() {
            return dim_err(format!("constant of shape {shape:?} given {} values", data.len()));
        }
        Ok(self.push_leaf(shape.to_vec(), data, false))
    }

    /// Leaf for a named parameter. Repeated calls return the same leaf, so
    /// every use of a shared parameter accumulates into one gradient. A tape
    /// reads parameters from one store only.
    pub fn param(&mut self, store: &ParamStore<T>, name: &str) -> Result<Var> {
        match self.store_tag {
            Some(tag) if tag != store.tag.0 => {
                return Err(SifmError::Contract(format!("parameter {name} requested from a second store on one tape")));
            }
            _ => self.store_tag = Some(store.tag.0),
        }
        let id = store.id(name)?;
        if let Some(&v) = self.params.get(&id) {
            return Ok(v);
        }
        let t = store.by_id(id);
        let v = self.push_leaf(t.shape().to_vec(), t.data().to_vec(), true);
        self.params.insert(id, v);
        Ok(v)
    }

    // ---------------------------------------------------------------- ops

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return dim_err(format!("matmul of {sa:?} and {sb:?}"));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, self.value(a), (k as isize, 1), self.value(b), (n as isize, 1), T::zero(), &mut out, (n as isize, 1));
        Ok(self.push(vec![m, n], out, Op::MatMul { a, b, m, k, n }, &[a, b]))
    }

    /// Batched product of `[batch, m, k]` with `[batch, k, n]`, or with
    /// `[batch, n, k]` read transposed when `trans_b` is set.
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return dim_err(format!("batch_matmul of {sa:?} and {sb:?}"));
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if kb != k {
            return dim_err(format!("batch_matmul of {sa:?} and {sb:?} (trans_b={trans_b})"));
        }
        let mut out = vec![T::zero(); batch * m * n];
        {
            let (av, bv) = (self.value(a), self.value(b));
            let bs = if trans_b { (1, k as isize) } else { (n as isize, 1) };
            for i in 0..batch {
                T::gemm(
                    m,
                    k,
                    n,
                    &av[i * m * k..(i + 1) * m * k],
                    (k as isize, 1),
                    &bv[i * k * n..(i + 1) * k * n],
                    bs,
                    T::zero(),
                    &mut out[i * m * n..(i + 1) * m * n],
                    (n as isize, 1),
                );
            }
        }
        Ok(self.push(vec![batch, m, n], out, Op::BatchMatMul { a, b, batch, m, k, n, trans_b }, &[a, b]))
    }

    /// `x[..., in] · w[in, out] + b[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        let inp = *sx.last().unwrap();
        if sw.len() != 2 || sw[0] != inp {
            return dim_err(format!("linear input {sx:?} with weight {sw:?}"));
        }
        let out = sw[1];
        if let Some(b) = b {
            if self.shape(b) != [out] {
                return dim_err(format!("linear bias {:?} for output width {out}", self.shape(b)));
            }
        }
        let rows = self.value(x).len() / inp;
        let mut y = vec![T::zero(); rows * out];
        if let Some(b) = b {
            let bv = self.value(b);
            for row in y.chunks_exact_mut(out) {
                row.copy_from_slice(bv);
            }
        }
        let beta = if b.is_some() { T::one() } else { T::zero() };
        T::gemm(
            rows,
            inp,
            out,
            self.value(x),
            (inp as isize, 1),
            self.value(w),
            (out as isize, 1),
            beta,
            &mut y,
            (out as isize, 1),
        );
        let mut shape = sx;
        *shape.last_mut().unwrap() = out;
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        Ok(self.push(shape, y, Op::Linear { x, w, b, rows, inp, out }, &inputs))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return dim_err(format!("{what} of {:?} and {:?}", self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x + y).collect();
        Ok(self.push(self.shape(a).to_vec(), out, Op::Add { a, b }, &[a, b]))
    }

    /// Adds `b` to `a`, repeating `b` over the leading axes; `b`'s shape
    /// must equal a trailing part of `a`'s shape.
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return dim_err(format!("add_broadcast of {sa:?} and {sb:?}"));
        }
        let bv = self.value(b);
        let mut out = self.value(a).to_vec();
        for chunk in out.chunks_exact_mut(bv.len()) {
            for (x, &y) in chunk.iter_mut().zip(bv) {
                *x += y;
            }
        }
        Ok(self.push(self.shape(a).to_vec(), out, Op::AddBroadcast { a, b }, &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x - y).collect();
        Ok(self.push(self.shape(a).to_vec(), out, Op::Sub { a, b }, &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x * y).collect();
        Ok(self.push(self.shape(a).to_vec(), out, Op::Mul { a, b }, &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let out = self.value(a).iter().map(|&x| x * c).collect();
        self.push(self.shape(a).to_vec(), out, Op::Scale { a, c }, &[a])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let (c, k) = (T::lit(GELU_C), T::lit(GELU_A));
        let half = T::lit(0.5);
        let x = self.value(a);
        let tanh: Vec<T> = x.iter().map(|&x| fast_tanh(c * (x + k * x * x * x))).collect();
        let out = x.iter().zip(&tanh).map(|(&x, &t)| half * x * (T::one() + t)).collect();
        self.push(self.shape(a).to_vec(), out, Op::Gelu { a, tanh }, &[a])
    }

    /// Normalizes over the last axis, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let d = *sx.last().unwrap();
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return dim_err(format!(
                "layer_norm over width {d} with gain {:?} and bias {:?}",
                self.shape(gain),
                self.shape(bias)
            ));
        }
        let eps = T::lit(eps);
        let dn = T::lit(d as f64);
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        let rows = xv.len() / d;
        let mut out = vec![T::zero(); xv.len()];
        let mut stats = Vec::with_capacity(rows * 2);
        for (row, o) in xv.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let rstd = T::one() / (var + eps).sqrt();
            for j in 0..d {
                o[j] = (row[j] - mean) * rstd * gv[j] + bv[j];
            }
            stats.push(mean);
            stats.push(rstd);
        }
        Ok(self.push(sx, out, Op::LayerNorm { x, gain, bias, d, stats }, &[x, gain, bias]))
    }

    /// Softmax over the last axis with an optional additive mask.
    pub fn softmax(&mut self, x: Var, mask: Option<&SoftmaxMask<T>>) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let n = *sx.last().unwrap();
        let xv = self.value(x);
        let rows = xv.len() / n;
        if let Some(m) = mask {
            if m.data.len() != m.windows * m.rows * n || !rows.is_multiple_of(m.windows * m.heads * m.rows) {
                return dim_err(format!(
                    "softmax mask of {} entries ({} windows, {} heads, {} rows) for input {sx:?}",
                    m.data.len(),
                    m.windows,
                    m.heads,
                    m.rows
                ));
            }
        }
        let sentinel = T::lit(MASK_SENTINEL / 2.0);
        let mut out = vec![T::zero(); xv.len()];
        for r in 0..rows {
            let row = &xv[r * n..(r + 1) * n];
            let o = &mut out[r * n..(r + 1) * n];
            let mrow = mask.map(|m| &m.data[m.offset(r, n)..m.offset(r, n) + n]);
            let mut max = T::neg_infinity();
            for j in 0..n {
                let bias = mrow.map_or(T::zero(), |m| m[j]);
                if bias > sentinel {
                    let s = row[j] + bias;
                    o[j] = s;
                    if s > max {
                        max = s;
                    }
                } else {
                    o[j] = T::neg_infinity();
                }
            }
            if max == T::neg_infinity() {
                return Err(SifmError::Domain(format!("fully masked row {r} in softmax")));
            }
            let mut total = T::zero();
            for v in o.iter_mut() {
                *v = if *v == T::neg_infinity() { T::zero() } else { (*v - max).exp() };
                total += *v;
            }
            for v in o.iter_mut() {
                *v /= total;
            }
        }
        Ok(self.push(sx, out, Op::Softmax { x, n }, &[x]))
    }

    /// Copies contiguous blocks of `block` elements: output block `i` is
    /// input block `idx[i]`. The result takes shape `shape`.
    pub fn gather(&mut self, x: Var, idx: Arc<[u32]>, block: usize, shape: &[usize]) -> Result<Var> {
        let n = check_shape(shape)?;
        let xv = self.value(x);
        if block == 0 || n != idx.len() * block {
            return dim_err(format!("gather of {} blocks of {block} into shape {shape:?}", idx.len()));
        }
        let blocks = xv.len() / block;
        if !xv.len().is_multiple_of(block) {
            return dim_err(format!("gather block {block} does not tile {} elements", xv.len()));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i as usize >= blocks) {
            return dim_err(format!("gather index {bad} out of range for {blocks} blocks"));
        }
        let mut out = Vec::with_capacity(n);
        for &i in idx.iter() {
            let i = i as usize * block;
            out.extend_from_slice(&xv[i..i + block]);
        }
        Ok(self.push(shape.to_vec(), out, Op::Gather { x, idx, block }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let n = check_shape(shape)?;
        if n != self.value(x).len() {
            return dim_err(format!("reshape {:?} to {shape:?}", self.shape(x)));
        }
        let out = self.value(x).to_vec();
        Ok(self.push(shape.to_vec(), out, Op::Reshape { x }, &[x]))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let mut seen = vec![false; sx.len()];
        if perm.len() != sx.len() || perm.iter().any(|&p| p >= sx.len() || std::mem::replace(&mut seen[p], true)) {
            return dim_err(format!("permutation {perm:?} for shape {sx:?}"));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| sx[p]).collect();
        let mut in_strides = vec![1usize; sx.len()];
        for i in (0..sx.len().saturating_sub(1)).rev() {
            in_strides[i] = in_strides[i + 1] * sx[i + 1];
        }
        let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let total: usize = sx.iter().product();
        let mut idx = Vec::with_capacity(total);
        let mut counter = vec![0usize; sx.len()];
        for _ in 0..total {
            idx.push(counter.iter().zip(&strides).map(|(c, s)| c * s).sum::<usize>() as u32);
            for ax in (0..counter.len()).rev() {
                counter[ax] += 1;
                if counter[ax] < out_shape[ax] {
                    break;
                }
                counter[ax] = 0;
            }
        }
        let xv = self.value(x);
        let out = idx.iter().map(|&i| xv[i as usize]).collect();
        Ok(self.push(out_shape, out, Op::Permute { x, idx: idx.into() }, &[x]))
    }

    /// Swaps two axes.
    pub fn transpose(&mut self, x: Var, a: usize, b: usize) -> Result<Var> {
        let rank = self.shape(x).len();
        if a >= rank || b >= rank {
            return dim_err(format!("transpose axes {a},{b} of rank-{rank} tensor"));
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(a, b);
        self.permute(x, &perm)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(*parts.first().ok_or_else(|| SifmError::Dimension("concat of nothing".into()))?).to_vec();
        if axis >= first.len() {
            return dim_err(format!("concat axis {axis} of shape {first:?}"));
        }
        let mut axis_lens = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == first.len() && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return dim_err(format!("concat along {axis} of {first:?} and {s:?}"));
            }
            axis_lens.push(s[axis]);
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let total_axis: usize = axis_lens.iter().sum();
        let mut out = Vec::with_capacity(outer * total_axis * inner);
        for o in 0..outer {
            for (&p, &len) in parts.iter().zip(&axis_lens) {
                out.extend_from_slice(&self.value(p)[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total_axis;
        Ok(self.push(shape, out, Op::Concat { parts: parts.to_vec(), axis_lens, outer, inner }, parts))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if axis >= sx.len() || len == 0 || start + len > sx[axis] {
            return dim_err(format!("slice [{start}, {}) on axis {axis} of {sx:?}", start + len));
        }
        let outer: usize = sx[..axis].iter().product();
        let inner: usize = sx[axis + 1..].iter().product();
        let axis_len = sx[axis];
        let xv = self.value(x);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * axis_len + start) * inner;
            out.extend_from_slice(&xv[base..base + len * inner]);
        }
        let mut shape = sx;
        shape[axis] = len;
        Ok(self.push(shape, out, Op::Slice { x, outer, axis_len, start, len, inner }, &[x]))
    }

    /// Mean over one axis, which is removed (a rank-1 input yields shape `[1]`).
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if axis >= sx.len() {
            return dim_err(format!("mean over axis {axis} of {sx:?}"));
        }
        let outer: usize = sx[..axis].iter().product();
        let inner: usize = sx[axis + 1..].iter().product();
        let axis_len = sx[axis];
        let xv = self.value(x);
        let mut out = vec![T::zero(); outer * inner];
        let inv = T::one() / T::lit(axis_len as f64);
        for o in 0..outer {
            for a in 0..axis_len {
                let src = &xv[(o * axis_len + a) * inner..(o * axis_len + a + 1) * inner];
                for (d, &s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        out.iter_mut().for_each(|v| *v *= inv);
        let mut shape = sx;
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        Ok(self.push(shape, out, Op::MeanAxis { x, outer, axis_len, inner }, &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().copied().sum();
        self.push(vec![1], vec![s], Op::Sum { x }, &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.iter().copied().sum::<T>() / T::lit(v.len() as f64);
        self.push(vec![1], vec![s], Op::Mean { x }, &[x])
    }

    /// Mean squared difference, built from recorded primitives.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        Ok(self.mean(sq))
    }

    // ----------------------------------------------------------- backward

    /// Propagates d(loss)/d(leaf) to every leaf that requires gradients.
    /// Leaf gradients from earlier calls are replaced.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(SifmError::Contract(format!("backward needs a scalar loss, got shape {:?}", self.nodes[loss.0].shape)));
        }
        self.leaf_grads.clear();
        if !self.nodes[loss.0].needs_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                self.leaf_grads.insert(i, g);
                continue;
            }
            let flip = self.sign_fault.is_some() && node.op.kind() == self.sign_fault;
            let g = if flip { g.into_iter().map(|x| -x).collect() } else { g };
            backprop_node(&self.nodes, i, &g, &mut grads);
        }
        Ok(())
    }
}

fn acc<'a, T: Scalar>(nodes: &[Node<T>], grads: &'a mut [Option<Vec<T>>], v: Var) -> Option<&'a mut Vec<T>> {
    if !nodes[v.0].needs_grad {
        return None;
    }
    let len = nodes[v.0].value.len();
    Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); len]))
}

fn backprop_node<T: Scalar>(nodes: &[Node<T>], i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
    let node = &nodes[i];
    match &node.op {
        Op::Leaf => {}
        Op::MatMul { a, b, m, k, n } => {
            let (m, k, n) = (*m, *k, *n);
            let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
            if let Some(ga) = acc(nodes, grads, *a) {
                T::gemm(m, n, k, g, (n as isize, 1), bv, (1, n as isize), T::one(), ga, (k as isize, 1));
            }
            if let Some(gb) = acc(nodes, grads, *b) {
                T::gemm(k, m, n, av, (1, k as isize), g, (n as isize, 1), T::one(), gb, (n as isize, 1));
            }
        }
        Op::BatchMatMul { a, b, batch, m, k, n, trans_b } => {
            let (batch, m, k, n) = (*batch, *m, *k, *n);
            let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
            if let Some(ga) = acc(nodes, grads, *a) {
                let bs = if *trans_b { (k as isize, 1) } else { (1, n as isize) };
                for t in 0..batch {
                    T::gemm(
                        m,
                        n,
                        k,
                        &g[t * m * n..(t + 1) * m * n],
                        (n as isize, 1),
                        &bv[t * k * n..(t + 1) * k * n],
                        bs,
                        T::one(),
                        &mut ga[t * m * k..(t + 1) * m * k],
                        (k as isize, 1),
                    );
                }
            }
            if let Some(gb) = acc(nodes, grads, *b) {
                for t in 0..batch {
                    let gt = &g[t * m * n..(t + 1) * m * n];
                    let at = &av[t * m * k..(t + 1) * m * k];
                    let gbt = &mut gb[t * k * n..(t + 1) * k * n];
                    if *trans_b {
                        // gb[n, k] = g^T a
                        T::gemm(n, m, k, gt, (1, n as isize), at, (k as isize, 1), T::one(), gbt, (k as isize, 1));
                    } else {
                        // gb[k, n] = a^T g
                        T::gemm(k, m, n, at, (1, k as isize), gt, (n as isize, 1), T::one(), gbt, (n as isize, 1));
                    }
                }
            }
        }
        Op::Linear { x, w, b, rows, inp, out } => {
            let (rows, inp, out) = (*rows, *inp, *out);
            let (xv, wv) = (&nodes[x.0].value, &nodes[w.0].value);
            if let Some(gx) = acc(nodes, grads, *x) {
                T::gemm(rows, out, inp, g, (out as isize, 1), wv, (1, out as isize), T::one(), gx, (inp as isize, 1));
            }
            if let Some(gw) = acc(nodes, grads, *w) {
                T::gemm(inp, rows, out, xv, (1, inp as isize), g, (out as isize, 1), T::one(), gw, (out as isize, 1));
            }
            if let Some(b) = b {
                if let Some(gb) = acc(nodes, grads, *b) {
                    for row in g.chunks_exact(out) {
                        for (d, &s) in gb.iter_mut().zip(row) {
                            *d += s;
                        }
                    }
                }
            }
        }
        Op::Add { a, b } => {
            for v in [a, b] {
                if let Some(gv) = acc(nodes, grads, *v) {
                    gv.iter_mut().zip(g).for_each(|(d, &s)| *d += s);
                }
            }
        }
        Op::AddBroadcast { a, b } => {
            if let Some(ga) = acc(nodes, grads, *a) {
                ga.iter_mut().zip(g).for_each(|(d, &s)| *d += s);
            }
            if let Some(gb) = acc(nodes, grads, *b) {
                let n = gb.len();
                for chunk in g.chunks_exact(n) {
                    gb.iter_mut().zip(chunk).for_each(|(d, &s)| *d += s);
                }
            }
        }
        Op::Sub { a, b } => {
            if let Some(ga) = acc(nodes, grads, *a) {
                ga.iter_mut().zip(g).for_each(|(d, &s)| *d += s);
            }
            if let Some(gb) = acc(nodes, grads, *b) {
                gb.iter_mut().zip(g).for_each(|(d, &s)| *d -= s);
            }
        }
        Op::Mul { a, b } => {
            if let Some(ga) = acc(nodes, grads, *a) {
                let bv = &nodes[b.0].value;
                for ((d, &s), &o) in ga.iter_mut().zip(g).zip(bv) {
                    *d += s * o;
                }
            }
            if let Some(gb) = acc(nodes, grads, *b) {
                let av = &nodes[a.0].value;
                for ((d, &s), &o) in gb.iter_mut().zip(g).zip(av) {
                    *d += s * o;
                }
            }
        }
        Op::Scale { a, c } => {
            if let Some(ga) = acc(nodes, grads, *a) {
                ga.iter_mut().zip(g).for_each(|(d, &s)| *d += s * *c);
            }
        }
        Op::Gelu { a, tanh } => {
            if let Some(ga) = acc(nodes, grads, *a) {
                let c = T::lit(GELU_C);
                let half = T::lit(0.5);
                let three_k = T::lit(3.0 * GELU_A);
                for (((d, &s), &x), &t) in ga.iter_mut().zip(g).zip(&nodes[a.0].value).zip(tanh) {
                    let dt = (T::one() - t * t) * c * (T::one() + three_k * x * x);
                    *d += s * (half * (T::one() + t) + half * x * dt);
                }
            }
        }
        Op::LayerNorm { x, gain, bias, d, stats } => {
            let d = *d;
            let dn = T::lit(d as f64);
            let xv = &nodes[x.0].value;
            let gv = &nodes[gain.0].value;
            if let Some(gg) = acc(nodes, grads, *gain) {
                for (r, (row, grow)) in xv.chunks_exact(d).zip(g.chunks_exact(d)).enumerate() {
                    let (mean, rstd) = (stats[2 * r], stats[2 * r + 1]);
                    for j in 0..d {
                        gg[j] += grow[j] * (row[j] - mean) * rstd;
                    }
                }
            }
            if let Some(gb) = acc(nodes, grads, *bias) {
                for grow in g.chunks_exact(d) {
                    gb.iter_mut().zip(grow).for_each(|(dst, &s)| *dst += s);
                }
            }
            if let Some(gx) = acc(nodes, grads, *x) {
                let mut dxhat = vec![T::zero(); d];
                for (r, ((row, grow), gxr)) in xv.chunks_exact(d).zip(g.chunks_exact(d)).zip(gx.chunks_exact_mut(d)).enumerate() {
                    let (mean, rstd) = (stats[2 * r], stats[2 * r + 1]);
                    let mut sum_dxhat = T::zero();
                    let mut sum_dxhat_xhat = T::zero();
                    for j in 0..d {
                        dxhat[j] = grow[j] * gv[j];
                        let xhat = (row[j] - mean) * rstd;
                        sum_dxhat += dxhat[j];
                        sum_dxhat_xhat += dxhat[j] * xhat;
                    }
                    let (m1, m2) = (sum_dxhat / dn, sum_dxhat_xhat / dn);
                    for j in 0..d {
                        let xhat = (row[j] - mean) * rstd;
                        gxr[j] += rstd * (dxhat[j] - m1 - xhat * m2);
                    }
                }
            }
        }
        Op::Softmax { x, n } => {
            if let Some(gx) = acc(nodes, grads, *x) {
                let y = &node.value;
                for ((yr, gr), dr) in y.chunks_exact(*n).zip(g.chunks_exact(*n)).zip(gx.chunks_exact_mut(*n)) {
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for j in 0..*n {
                        dr[j] += yr[j] * (gr[j] - dot);
                    }
                }
            }
        }
        Op::Gather { x, idx, block } => {
            if let Some(gx) = acc(nodes, grads, *x) {
                for (&i, src) in idx.iter().zip(g.chunks_exact(*block)) {
                    let dst = &mut gx[i as usize * block..(i as usize + 1) * block];
                    dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
                }
            }
        }
        Op::Permute { x, idx } => {
            if let Some(gx) = acc(nodes, grads, *x) {
                for (&i, &s) in idx.iter().zip(g) {
                    gx[i as usize] += s;
                }
            }
        }
        Op::Reshape { x } => {
            if let Some(gx) = acc(nodes, grads, *x) {
                gx.iter_mut().zip(g).for_each(|(d, &s)| *d += s);
            }
        }
        Op::Concat { parts, axis_lens, outer, inner } => {
            let total: usize = axis_lens.iter().sum();
            let mut offset = 0;
            for (&p, &len) in parts.iter().zip(axis_lens) {
                if let Some(gp) = acc(nodes, grads, p) {
                    for o in 0..*outer {
                        let src = &g[(o * total + offset) * inner..(o * total + offset + len) * inner];
                        let dst = &mut gp[o * len * inner..(o + 1) * len * inner];
                        dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
                    }
                }
                offset += len;
            }
        }
        Op::Slice { x, outer, axis_len, start, len, inner } => {
            if let Some(gx) = acc(nodes, grads, *x) {
                for o in 0..*outer {
                    let base = (o * axis_len + start) * inner;
                    let dst = &mut gx[base..base + len * inner];
                    let src = &g[o * len * inner..(o + 1) * len * inner];
                    dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
                }
            }
        }
        Op::MeanAxis { x, outer, axis_len, inner } => {
            if let Some(gx) = acc(nodes, grads, *x) {
                let inv = T::one() / T::lit(*axis_len as f64);
                for o in 0..*outer {
                    for a in 0..*axis_len {
                        let dst = &mut gx[(o * axis_len + a) * inner..(o * axis_len + a + 1) * inner];
                        let src = &g[o * inner..(o + 1) * inner];
                        dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s * inv);
                    }
                }
            }
        }
        Op::Sum { x } => {
            if let Some(gx) = acc(nodes, grads, *x) {
                gx.iter_mut().for_each(|d| *d += g[0]);
            }
        }
        Op::Mean { x } => {
            if let Some(gx) = acc(nodes, grads, *x) {
                let s = g[0] / T::lit(gx.len() as f64);
                gx.iter_mut().for_each(|d| *d += s);
            }
        }
    }
}

/// `tanh` through a single `exp`, saturating outside ±20.
fn fast_tanh<T: Scalar>(u: T) -> T {
    let lim = T::lit(20.0);
    if u > lim {
        T::one()
    } else if u < -lim {
        -T::one()
    } else {
        let e = (u + u).exp();
        (e - T::one()) / (e + T::one())
    }
}
