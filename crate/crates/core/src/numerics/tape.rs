//! Tape-based reverse-mode automatic differentiation.
//!
//! Every operation appends a node holding its forward value and enough
//! context to run its vector-Jacobian product. Nodes are stored in creation
//! order, which is a topological order, so [`Tape::backward`] is a single
//! reverse sweep.
//!
//! A tape may be put in *relaxed* mode. Straight-through operations then
//! emit their continuous surrogate as the forward value, which makes the
//! whole graph an ordinary smooth function whose gradients can be checked
//! against finite differences.

use alloc::vec;
use alloc::vec::Vec;

use super::math;
use super::tensor::{numel, strides, Tensor};
use super::NumericsError;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const LAYER_NORM_EPS: f64 = 1e-5;
// Caps exp() when estimating the gradient of a masked-out attention entry.
const MAX_DELETED_LOGIT: f64 = 60.0;

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRowBias(Var, Var),
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        shared_rhs: bool,
    },
    TransposeLast2(Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Expand(Var),
    Concat(Vec<Var>, usize),
    Narrow {
        a: Var,
        axis: usize,
        start: usize,
    },
    SumAxis(Var, usize),
    SumAll(Var),
    Abs(Var),
    Gelu {
        a: Var,
        tanh: Vec<f64>,
    },
    Softmax(Var),
    MaskWeightedSoftmax {
        scores: Var,
        mask: Var,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<Option<usize>>,
        probs: Vec<f64>,
        count: usize,
    },
    GumbelSoftmax {
        logits: Var,
        soft: Vec<f64>,
        temperature: f64,
    },
    StraightThrough {
        soft: Var,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records a computation for reverse-mode differentiation.
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    relaxed: bool,
    value_bytes: usize,
    peak_bytes: usize,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            relaxed: false,
            value_bytes: 0,
            peak_bytes: 0,
        }
    }

    /// A tape whose straight-through ops forward their soft surrogate.
    pub fn relaxed() -> Self {
        Self {
            relaxed: true,
            ..Self::new()
        }
    }

    pub fn is_relaxed(&self) -> bool {
        self.relaxed
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Bytes held by node values (and gradients, once computed).
    pub fn live_bytes(&self) -> usize {
        self.value_bytes
            + self
                .grads
                .iter()
                .flatten()
                .map(|g| g.len() * core::mem::size_of::<f64>())
                .sum::<usize>()
    }

    pub fn peak_bytes(&self) -> usize {
        self.peak_bytes.max(self.live_bytes())
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.value_bytes += value.size_bytes();
        self.peak_bytes = self.peak_bytes.max(self.value_bytes);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Gradient of the last `backward` loss with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor> {
        self.grad(v).map(|g| {
            Tensor::new(self.shape(v).to_vec(), g.to_vec()).expect("gradient shape matches value")
        })
    }

    fn check_same(&self, op: &'static str, a: Var, b: Var) -> Result<(), NumericsError> {
        if self.shape(a) != self.shape(b) {
            return Err(NumericsError::ShapeMismatch {
                op,
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(va.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(a) || self.rg(b);
        self.push(value, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.check_same("add", a, b)?;
        Ok(self.zip_with(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.check_same("sub", a, b)?;
        Ok(self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.check_same("mul", a, b)?;
        Ok(self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| x * c);
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, c), rg)
    }

    /// `a[.., n] + b[n]`, broadcasting `b` over every leading index.
    pub fn add_row_bias(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sb.len() != 1 || sa.last() != Some(&sb[0]) {
            return Err(NumericsError::ShapeMismatch {
                op: "add_row_bias",
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        let n = sb[0];
        let bias = self.value(b).data().to_vec();
        let mut value = self.value(a).clone();
        for row in value.data_mut().chunks_mut(n) {
            for (x, &y) in row.iter_mut().zip(&bias) {
                *x += y;
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::AddRowBias(a, b), rg))
    }

    /// Matrix product over the last two axes.
    ///
    /// `b` is either rank 2 (shared across every leading index of `a`) or
    /// carries the same leading batch axes as `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let mismatch = || NumericsError::ShapeMismatch {
            op: "matmul",
            left: sa.clone(),
            right: sb.clone(),
        };
        if sa.len() < 2 || sb.len() < 2 {
            return Err(mismatch());
        }
        let k = sa[sa.len() - 1];
        if sb[sb.len() - 2] != k {
            return Err(mismatch());
        }
        let n = sb[sb.len() - 1];
        let (batch, m, shared_rhs) = if sb.len() == 2 {
            (1, numel(&sa) / k.max(1), true)
        } else {
            if sa.len() != sb.len() || sa[..sa.len() - 2] != sb[..sb.len() - 2] {
                return Err(mismatch());
            }
            (numel(&sa[..sa.len() - 2]), sa[sa.len() - 2], false)
        };
        if k == 0 {
            return Err(mismatch());
        }
        let mut out = vec![0.0; batch * m * n];
        {
            let av = self.value(a).data();
            let bv = self.value(b).data();
            for t in 0..batch {
                let c = &mut out[t * m * n..(t + 1) * m * n];
                gemm(m, k, n, &av[t * m * k..], (k, 1), &bv[t * k * n..], (n, 1), c, false);
            }
        }
        let mut shape = sa[..sa.len() - 1].to_vec();
        shape.push(n);
        let value = Tensor::new(shape, out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            value,
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                shared_rhs,
            },
            rg,
        ))
    }

    pub fn transpose_last2(&mut self, a: Var) -> Result<Var, NumericsError> {
        let s = self.shape(a).to_vec();
        if s.len() < 2 {
            return Err(NumericsError::InvalidShape { shape: s });
        }
        let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
        let batch = numel(&s[..s.len() - 2]);
        let src = self.value(a).data();
        let mut out = vec![0.0; src.len()];
        for t in 0..batch {
            let base = t * r * c;
            for i in 0..r {
                for j in 0..c {
                    out[base + j * r + i] = src[base + i * c + j];
                }
            }
        }
        let mut shape = s.clone();
        let len = shape.len();
        shape.swap(len - 2, len - 1);
        let value = Tensor::new(shape, out)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::TransposeLast2(a), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, NumericsError> {
        let value = self.value(a).clone().reshaped(shape.to_vec())?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    /// General axis permutation: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var, NumericsError> {
        let s = self.shape(a).to_vec();
        let mut seen = vec![false; s.len()];
        if axes.len() != s.len() || axes.iter().any(|&x| x >= s.len() || core::mem::replace(&mut seen[x], true)) {
            return Err(NumericsError::ShapeMismatch {
                op: "permute",
                left: s,
                right: axes.to_vec(),
            });
        }
        let out_shape: Vec<usize> = axes.iter().map(|&x| s[x]).collect();
        let in_strides = strides(&s);
        let mapped: Vec<usize> = axes.iter().map(|&x| in_strides[x]).collect();
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(src.len());
        for_each_offset(&out_shape, &mapped, |off| out.push(src[off]));
        let value = Tensor::new(out_shape, out)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Permute(a, axes.to_vec()), rg))
    }

    /// Broadcast size-1 axes up to `shape` (ranks must agree).
    pub fn expand(&mut self, a: Var, shape: &[usize]) -> Result<Var, NumericsError> {
        let s = self.shape(a).to_vec();
        if s.len() != shape.len() || s.iter().zip(shape).any(|(&x, &y)| x != y && x != 1) {
            return Err(NumericsError::ShapeMismatch {
                op: "expand",
                left: s,
                right: shape.to_vec(),
            });
        }
        let st = broadcast_strides(&s);
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(numel(shape));
        for_each_offset(shape, &st, |off| out.push(src[off]));
        let value = Tensor::new(shape.to_vec(), out)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Expand(a), rg))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var, NumericsError> {
        let first = parts.first().ok_or(NumericsError::Contract("concat of zero tensors"))?;
        let s0 = self.shape(*first).to_vec();
        if axis >= s0.len() {
            return Err(NumericsError::InvalidShape { shape: s0 });
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == s0.len()
                && s.iter().zip(&s0).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(NumericsError::ShapeMismatch {
                    op: "concat",
                    left: s0,
                    right: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let outer = numel(&s0[..axis]);
        let inner = numel(&s0[axis + 1..]);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis] * inner;
                out.extend_from_slice(&self.value(p).data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = s0;
        shape[axis] = total;
        let value = Tensor::new(shape, out)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(value, Op::Concat(parts.to_vec(), axis), rg))
    }

    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var, NumericsError> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() || start + len > s[axis] {
            return Err(NumericsError::IndexOutOfRange {
                op: "narrow",
                index: start + len,
                bound: s.get(axis).copied().unwrap_or(0),
            });
        }
        let outer = numel(&s[..axis]);
        let inner = numel(&s[axis + 1..]);
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * s[axis] + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let value = Tensor::new(shape, out)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Narrow { a, axis, start }, rg))
    }

    /// Sum over one axis, removing it.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var, NumericsError> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() {
            return Err(NumericsError::InvalidShape { shape: s });
        }
        let outer = numel(&s[..axis]);
        let inner = numel(&s[axis + 1..]);
        let src = self.value(a).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..s[axis] {
                let base = (o * s[axis] + j) * inner;
                for i in 0..inner {
                    out[o * inner + i] += src[base + i];
                }
            }
        }
        let mut shape = s;
        shape.remove(axis);
        let value = Tensor::new(shape, out)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::SumAxis(a, axis), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(total), Op::SumAll(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).numel().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let value = self.value(a).map(libm::fabs);
        let rg = self.rg(a);
        self.push(value, Op::Abs(a), rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let tanh: Vec<f64> = self.value(a).data().iter().map(|&x| math::tanh(gelu_inner(x))).collect();
        let data = self.value(a).data().iter().zip(&tanh).map(|(&x, t)| 0.5 * x * (1.0 + t)).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data).expect("same shape");
        let rg = self.rg(a);
        self.push(value, Op::Gelu { a, tanh }, rg)
    }

    /// Softmax along the last axis, stabilised by max subtraction.
    pub fn softmax_last_dim(&mut self, a: Var) -> Result<Var, NumericsError> {
        let s = self.shape(a).to_vec();
        let n = *s.last().ok_or(NumericsError::InvalidShape { shape: s.clone() })?;
        if n == 0 {
            return Err(NumericsError::InvalidShape { shape: s });
        }
        let mut value = self.value(a).clone();
        for row in value.data_mut().chunks_mut(n) {
            softmax_in_place(row);
        }
        let rg = self.rg(a);
        Ok(self.push(value, Op::Softmax(a), rg))
    }

    /// Attention weights gated by a multiplicative mask.
    ///
    /// `scores` is `[B, H, P, Q]` and `mask` is `[B, P, Q]`, shared across the
    /// `H` heads. Each row computes `w_l = m_l e_l / sum_j m_j e_j` with
    /// `e = exp(scores - max)`, where the maximum and the normaliser run over
    /// entries with `m != 0` only. A masked-out entry therefore never enters
    /// the forward arithmetic of its row, and a row whose mask is entirely
    /// zero produces zeros. With a binary mask this is a softmax restricted to
    /// the retained entries; with an all-ones mask it is a plain softmax.
    pub fn mask_weighted_softmax(&mut self, scores: Var, mask: Var) -> Result<Var, NumericsError> {
        let ss = self.shape(scores).to_vec();
        let sm = self.shape(mask).to_vec();
        if ss.len() != 4 || sm.len() != 3 || ss[0] != sm[0] || ss[2] != sm[1] || ss[3] != sm[2] {
            return Err(NumericsError::ShapeMismatch {
                op: "mask_weighted_softmax",
                left: ss,
                right: sm,
            });
        }
        let (b, h, p, q) = (ss[0], ss[1], ss[2], ss[3]);
        let sv = self.value(scores).data();
        let mv = self.value(mask).data();
        let mut out = vec![0.0; sv.len()];
        for bi in 0..b {
            for hi in 0..h {
                for i in 0..p {
                    let srow = &sv[((bi * h + hi) * p + i) * q..][..q];
                    let mrow = &mv[(bi * p + i) * q..][..q];
                    let orow = &mut out[((bi * h + hi) * p + i) * q..][..q];
                    let mut mx = f64::NEG_INFINITY;
                    for l in 0..q {
                        if mrow[l] != 0.0 && srow[l] > mx {
                            mx = srow[l];
                        }
                    }
                    if mx == f64::NEG_INFINITY {
                        continue;
                    }
                    let mut z = 0.0;
                    for l in 0..q {
                        if mrow[l] != 0.0 {
                            let w = mrow[l] * math::exp(srow[l] - mx);
                            orow[l] = w;
                            z += w;
                        }
                    }
                    if z != 0.0 {
                        for l in 0..q {
                            if mrow[l] != 0.0 {
                                orow[l] /= z;
                            }
                        }
                    }
                }
            }
        }
        let value = Tensor::new(ss, out)?;
        let rg = self.rg(scores) || self.rg(mask);
        Ok(self.push(value, Op::MaskWeightedSoftmax { scores, mask }, rg))
    }

    /// Layer normalisation over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var, NumericsError> {
        let s = self.shape(x).to_vec();
        let n = *s.last().ok_or(NumericsError::InvalidShape { shape: s.clone() })?;
        for p in [gamma, beta] {
            if self.shape(p) != [n] {
                return Err(NumericsError::ShapeMismatch {
                    op: "layer_norm",
                    left: s,
                    right: self.shape(p).to_vec(),
                });
            }
        }
        let xv = self.value(x).data();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let rows = xv.len() / n;
        let mut xhat = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / libm::sqrt(var + LAYER_NORM_EPS);
            inv_std[r] = is;
            for j in 0..n {
                let xh = (row[j] - mean) * is;
                xhat[r * n + j] = xh;
                out[r * n + j] = xh * g[j] + bt[j];
            }
        }
        let value = Tensor::new(s, out)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Row lookup: `table[V, d]` indexed by `ids` gives `[ids.len(), d]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var, NumericsError> {
        let s = self.shape(table).to_vec();
        if s.len() != 2 {
            return Err(NumericsError::InvalidShape { shape: s });
        }
        let (v, d) = (s[0], s[1]);
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(NumericsError::IndexOutOfRange {
                    op: "gather_rows",
                    index: id,
                    bound: v,
                });
            }
            out.extend_from_slice(&src[id * d..(id + 1) * d]);
        }
        let value = Tensor::new(vec![ids.len(), d], out)?;
        let rg = self.rg(table);
        Ok(self.push(
            value,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Mean negative log-likelihood of `labels` under `softmax(logits)`.
    ///
    /// `logits` is `[N, C]`; rows whose label is `None` are skipped.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[Option<usize>]) -> Result<Var, NumericsError> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(NumericsError::ShapeMismatch {
                op: "cross_entropy",
                left: s,
                right: vec![labels.len()],
            });
        }
        let c = s[1];
        let mut probs = self.value(logits).data().to_vec();
        let mut loss = 0.0;
        let mut count = 0;
        for (row, label) in probs.chunks_mut(c).zip(labels) {
            softmax_in_place(row);
            if let Some(y) = *label {
                if y >= c {
                    return Err(NumericsError::IndexOutOfRange {
                        op: "cross_entropy",
                        index: y,
                        bound: c,
                    });
                }
                loss -= math::ln(row[y]);
                count += 1;
            }
        }
        if count == 0 {
            return Err(NumericsError::Contract("cross_entropy without any labelled row"));
        }
        let value = Tensor::scalar(loss / count as f64);
        let rg = self.rg(logits);
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
                count,
            },
            rg,
        ))
    }

    /// Hard Gumbel-softmax with caller-supplied Gumbel noise.
    ///
    /// Forward: one-hot argmax of `logits + noise` (lowest index wins ties).
    /// Backward: gradient of `softmax((logits + noise) / temperature)`.
    pub fn gumbel_softmax_hard_with_noise(
        &mut self,
        logits: Var,
        noise: &[f64],
        temperature: f64,
    ) -> Result<Var, NumericsError> {
        if !(temperature > 0.0) || !temperature.is_finite() {
            return Err(NumericsError::InvalidParameter {
                name: "temperature",
                value: temperature,
            });
        }
        let s = self.shape(logits).to_vec();
        let c = *s.last().ok_or(NumericsError::InvalidShape { shape: s.clone() })?;
        if c == 0 || noise.len() != numel(&s) {
            return Err(NumericsError::ShapeMismatch {
                op: "gumbel_softmax_hard",
                left: s,
                right: vec![noise.len()],
            });
        }
        let lv = self.value(logits).data();
        let mut soft: Vec<f64> = lv
            .iter()
            .zip(noise)
            .map(|(l, g)| (l + g) / temperature)
            .collect();
        let mut hard = vec![0.0; soft.len()];
        for (srow, hrow) in soft.chunks_mut(c).zip(hard.chunks_mut(c)) {
            let mut best = 0;
            for j in 1..c {
                if srow[j] > srow[best] {
                    best = j;
                }
            }
            hrow[best] = 1.0;
            softmax_in_place(srow);
        }
        let forward = if self.relaxed { soft.clone() } else { hard };
        let value = Tensor::new(s, forward)?;
        let rg = self.rg(logits);
        Ok(self.push(
            value,
            Op::GumbelSoftmax {
                logits,
                soft,
                temperature,
            },
            rg,
        ))
    }

    /// Hard Gumbel-softmax drawing fresh noise from `rng`.
    pub fn gumbel_softmax_hard(
        &mut self,
        logits: Var,
        temperature: f64,
        rng: &mut super::RngState,
    ) -> Result<Var, NumericsError> {
        let n = self.value(logits).numel();
        let noise: Vec<f64> = (0..n).map(|_| rng.gumbel()).collect();
        self.gumbel_softmax_hard_with_noise(logits, &noise, temperature)
    }

    /// `hard + soft - stopgrad(soft)`: forwards `hard`, differentiates as `soft`.
    ///
    /// `hard` never receives gradient. On a relaxed tape the forward value is
    /// `soft` itself.
    pub fn straight_through_combine(&mut self, hard: Var, soft: Var) -> Result<Var, NumericsError> {
        self.check_same("straight_through_combine", hard, soft)?;
        let value = if self.relaxed {
            self.value(soft).clone()
        } else {
            self.value(hard).clone()
        };
        let rg = self.rg(soft);
        Ok(self.push(value, Op::StraightThrough { soft }, rg))
    }

    /// Non-differentiable indicator `x != 0`, as a constant.
    pub fn binarize_nonzero(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| if x != 0.0 { 1.0 } else { 0.0 });
        self.constant(value)
    }

    pub fn detach(&mut self, a: Var) -> Var {
        let value = self.value(a).clone();
        self.constant(value)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<(), NumericsError> {
        if self.value(loss).numel() != 1 {
            return Err(NumericsError::NotScalar {
                shape: self.shape(loss).to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        grads.resize_with(self.nodes.len(), || None);
        if self.rg(loss) {
            grads[loss.0] = Some(vec![1.0]);
        }
        // Only leaf gradients are kept; interior buffers are handed on to
        // their inputs or freed once consumed.
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            self.backprop_node(i, g, &mut grads);
        }
        self.grads = grads;
        self.peak_bytes = self.peak_bytes.max(self.live_bytes());
        Ok(())
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        if !self.rg(v) {
            return None;
        }
        let n = self.value(v).numel();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    /// Accumulates an owned gradient buffer into `v`, reusing it when `v`
    /// has none yet.
    fn give(&self, grads: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(t) => add_into(t, &g),
            slot @ None => *slot = Some(g),
        }
    }

    fn backprop_node(&self, i: usize, g: Vec<f64>, grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Reshape(a) | Op::StraightThrough { soft: a } => return self.give(grads, *a, g),
            Op::Add(a, b) => {
                if let Some(t) = self.acc(grads, *b) {
                    add_into(t, &g);
                }
                return self.give(grads, *a, g);
            }
            Op::Scale(a, c) => {
                let mut g = g;
                for x in g.iter_mut() {
                    *x *= c;
                }
                return self.give(grads, *a, g);
            }
            Op::AddRowBias(a, b) => {
                if let Some(t) = self.acc(grads, *b) {
                    let n = t.len();
                    for row in g.chunks(n) {
                        add_into(t, row);
                    }
                }
                return self.give(grads, *a, g);
            }
            _ => {}
        }
        let g = &g[..];
        match &node.op {
            Op::Leaf
            | Op::Add(..)
            | Op::Scale(..)
            | Op::AddRowBias(..)
            | Op::Reshape(_)
            | Op::StraightThrough { .. } => {}
            Op::Sub(a, b) => {
                if let Some(t) = self.acc(grads, *a) {
                    add_into(t, g);
                }
                if let Some(t) = self.acc(grads, *b) {
                    for (x, y) in t.iter_mut().zip(g) {
                        *x -= y;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if let Some(t) = self.acc(grads, *a) {
                    for ((x, gi), y) in t.iter_mut().zip(g).zip(vb) {
                        *x += gi * y;
                    }
                }
                if let Some(t) = self.acc(grads, *b) {
                    for ((x, gi), y) in t.iter_mut().zip(g).zip(va) {
                        *x += gi * y;
                    }
                }
            }
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                shared_rhs,
            } => {
                let (batch, m, k, n) = (*batch, *m, *k, *n);
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if let Some(t) = self.acc(grads, *a) {
                    // dA = dC · Bᵀ
                    for s in 0..batch {
                        let boff = if *shared_rhs { 0 } else { s * k * n };
                        gemm(
                            m,
                            n,
                            k,
                            &g[s * m * n..],
                            (n, 1),
                            &bv[boff..],
                            (1, n),
                            &mut t[s * m * k..(s + 1) * m * k],
                            true,
                        );
                    }
                }
                if let Some(t) = self.acc(grads, *b) {
                    // dB = Aᵀ · dC
                    for s in 0..batch {
                        let boff = if *shared_rhs { 0 } else { s * k * n };
                        gemm(
                            k,
                            m,
                            n,
                            &av[s * m * k..],
                            (1, k),
                            &g[s * m * n..],
                            (n, 1),
                            &mut t[boff..boff + k * n],
                            true,
                        );
                    }
                }
            }
            Op::TransposeLast2(a) => {
                if let Some(t) = self.acc(grads, *a) {
                    let s = self.shape(*a);
                    let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
                    let batch = numel(&s[..s.len() - 2]);
                    for bt in 0..batch {
                        let base = bt * r * c;
                        for ii in 0..r {
                            for j in 0..c {
                                t[base + ii * c + j] += g[base + j * r + ii];
                            }
                        }
                    }
                }
            }
            Op::Permute(a, axes) => {
                if let Some(t) = self.acc(grads, *a) {
                    let s = self.shape(*a);
                    let in_strides = strides(s);
                    let mapped: Vec<usize> = axes.iter().map(|&x| in_strides[x]).collect();
                    let mut idx = 0;
                    for_each_offset(node.value.shape(), &mapped, |off| {
                        t[off] += g[idx];
                        idx += 1;
                    });
                }
            }
            Op::Expand(a) => {
                if let Some(t) = self.acc(grads, *a) {
                    let st = broadcast_strides(self.shape(*a));
                    let mut idx = 0;
                    for_each_offset(node.value.shape(), &st, |off| {
                        t[off] += g[idx];
                        idx += 1;
                    });
                }
            }
            Op::Concat(parts, axis) => {
                let s = node.value.shape();
                let outer = numel(&s[..*axis]);
                let inner = numel(&s[*axis + 1..]);
                let total = s[*axis] * inner;
                let mut start = 0;
                for &p in parts {
                    let len = self.shape(p)[*axis] * inner;
                    if let Some(t) = self.acc(grads, p) {
                        for o in 0..outer {
                            add_into(&mut t[o * len..(o + 1) * len], &g[o * total + start..][..len]);
                        }
                    }
                    start += len;
                }
            }
            Op::Narrow { a, axis, start } => {
                if let Some(t) = self.acc(grads, *a) {
                    let s = self.shape(*a);
                    let len = node.value.shape()[*axis];
                    let outer = numel(&s[..*axis]);
                    let inner = numel(&s[*axis + 1..]);
                    for o in 0..outer {
                        let base = (o * s[*axis] + start) * inner;
                        add_into(&mut t[base..base + len * inner], &g[o * len * inner..][..len * inner]);
                    }
                }
            }
            Op::SumAxis(a, axis) => {
                if let Some(t) = self.acc(grads, *a) {
                    let s = self.shape(*a);
                    let outer = numel(&s[..*axis]);
                    let inner = numel(&s[*axis + 1..]);
                    for o in 0..outer {
                        for j in 0..s[*axis] {
                            let base = (o * s[*axis] + j) * inner;
                            add_into(&mut t[base..base + inner], &g[o * inner..(o + 1) * inner]);
                        }
                    }
                }
            }
            Op::SumAll(a) => {
                if let Some(t) = self.acc(grads, *a) {
                    for x in t.iter_mut() {
                        *x += g[0];
                    }
                }
            }
            Op::Abs(a) => {
                let va = self.value(*a).data();
                if let Some(t) = self.acc(grads, *a) {
                    for ((x, gi), v) in t.iter_mut().zip(g).zip(va) {
                        let sign = if *v > 0.0 {
                            1.0
                        } else if *v < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                        *x += gi * sign;
                    }
                }
            }
            Op::Gelu { a, tanh } => {
                let va = self.value(*a).data();
                if let Some(t) = self.acc(grads, *a) {
                    for (((x, gi), &v), &th) in t.iter_mut().zip(g).zip(va).zip(tanh) {
                        let d = 0.5 * (1.0 + th)
                            + 0.5 * v * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * GELU_A * v * v);
                        *x += gi * d;
                    }
                }
            }
            Op::Softmax(a) => {
                if let Some(t) = self.acc(grads, *a) {
                    let y = node.value.data();
                    let n = *node.value.shape().last().unwrap();
                    for ((trow, grow), yrow) in t.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                        let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            trow[j] += yrow[j] * (grow[j] - dot);
                        }
                    }
                }
            }
            Op::MaskWeightedSoftmax { scores, mask } => {
                self.backprop_mask_weighted_softmax(node, *scores, *mask, g, grads);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let n = self.value(*gamma).numel();
                let gv = self.value(*gamma).data();
                if let Some(t) = self.acc(grads, *gamma) {
                    for (grow, xrow) in g.chunks(n).zip(xhat.chunks(n)) {
                        for j in 0..n {
                            t[j] += grow[j] * xrow[j];
                        }
                    }
                }
                if let Some(t) = self.acc(grads, *beta) {
                    for grow in g.chunks(n) {
                        add_into(t, grow);
                    }
                }
                if let Some(t) = self.acc(grads, *x) {
                    let mut dxhat = vec![0.0; n];
                    for (r, ((trow, grow), xrow)) in
                        t.chunks_mut(n).zip(g.chunks(n)).zip(xhat.chunks(n)).enumerate()
                    {
                        for j in 0..n {
                            dxhat[j] = grow[j] * gv[j];
                        }
                        let mean_d = dxhat.iter().sum::<f64>() / n as f64;
                        let mean_dx = dxhat.iter().zip(xrow).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                        for j in 0..n {
                            trow[j] += inv_std[r] * (dxhat[j] - mean_d - xrow[j] * mean_dx);
                        }
                    }
                }
            }
            Op::Gather { table, ids } => {
                if let Some(t) = self.acc(grads, *table) {
                    let d = self.shape(*table)[1];
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut t[id * d..(id + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
                count,
            } => {
                if let Some(t) = self.acc(grads, *logits) {
                    let c = self.shape(*logits)[1];
                    let w = g[0] / *count as f64;
                    for ((trow, prow), label) in t.chunks_mut(c).zip(probs.chunks(c)).zip(labels) {
                        if let Some(y) = *label {
                            for j in 0..c {
                                let target = if j == y { 1.0 } else { 0.0 };
                                trow[j] += w * (prow[j] - target);
                            }
                        }
                    }
                }
            }
            Op::GumbelSoftmax {
                logits,
                soft,
                temperature,
            } => {
                if let Some(t) = self.acc(grads, *logits) {
                    let c = *node.value.shape().last().unwrap();
                    for ((trow, grow), yrow) in t.chunks_mut(c).zip(g.chunks(c)).zip(soft.chunks(c)) {
                        let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            trow[j] += yrow[j] * (grow[j] - dot) / temperature;
                        }
                    }
                }
            }
        }
    }

    fn backprop_mask_weighted_softmax(
        &self,
        node: &Node,
        scores: Var,
        mask: Var,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let ss = self.shape(scores);
        let (b, h, p, q) = (ss[0], ss[1], ss[2], ss[3]);
        let sv = self.value(scores).data();
        let mv = self.value(mask).data();
        let out = node.value.data();
        let want_s = self.rg(scores);
        let want_m = self.rg(mask);
        let mut ds = if want_s { vec![0.0; sv.len()] } else { Vec::new() };
        let mut dm = if want_m { vec![0.0; mv.len()] } else { Vec::new() };
        let mut e = vec![0.0; q];
        for bi in 0..b {
            for hi in 0..h {
                for i in 0..p {
                    let off = ((bi * h + hi) * p + i) * q;
                    let srow = &sv[off..off + q];
                    let grow = &g[off..off + q];
                    let orow = &out[off..off + q];
                    let moff = (bi * p + i) * q;
                    let mrow = &mv[moff..moff + q];
                    let mut mx = f64::NEG_INFINITY;
                    for l in 0..q {
                        if mrow[l] != 0.0 && srow[l] > mx {
                            mx = srow[l];
                        }
                    }
                    let z: f64 = if mx == f64::NEG_INFINITY {
                        0.0
                    } else {
                        (0..q)
                            .filter(|&l| mrow[l] != 0.0)
                            .map(|l| mrow[l] * math::exp(srow[l] - mx))
                            .sum()
                    };
                    if z != 0.0 {
                        let gbar: f64 = grow.iter().zip(orow).map(|(a, b)| a * b).sum();
                        if want_s {
                            for l in 0..q {
                                ds[off + l] = orow[l] * (grow[l] - gbar);
                            }
                        }
                        if want_m {
                            for l in 0..q {
                                let w = math::exp((srow[l] - mx).min(MAX_DELETED_LOGIT)) / z;
                                dm[moff + l] += w * (grow[l] - gbar);
                            }
                        }
                    } else if want_m {
                        // Fully masked row: fall back to the unmasked softmax as
                        // the surrogate weight.
                        e.copy_from_slice(srow);
                        softmax_in_place(&mut e);
                        for l in 0..q {
                            dm[moff + l] += grow[l] * e[l];
                        }
                    }
                }
            }
        }
        if let Some(t) = self.acc(grads, scores) {
            add_into(t, &ds);
        }
        if let Some(t) = self.acc(grads, mask) {
            add_into(t, &dm);
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

fn gelu_inner(x: f64) -> f64 {
    GELU_C * (x + GELU_A * x * x * x)
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for x in row.iter_mut() {
        *x = math::exp(*x - mx);
        z += *x;
    }
    for x in row.iter_mut() {
        *x /= z;
    }
}

fn add_into(t: &mut [f64], g: &[f64]) {
    for (x, y) in t.iter_mut().zip(g) {
        *x += y;
    }
}

fn broadcast_strides(shape: &[usize]) -> Vec<usize> {
    let mut st = strides(shape);
    for (s, &d) in st.iter_mut().zip(shape) {
        if d == 1 {
            *s = 0;
        }
    }
    st
}

/// Visits `shape` in row-major order, yielding `sum(index[i] * strides[i])`.
fn for_each_offset(shape: &[usize], strides: &[usize], mut f: impl FnMut(usize)) {
    if shape.iter().any(|&d| d == 0) {
        return;
    }
    let rank = shape.len();
    if rank == 0 {
        f(0);
        return;
    }
    let last = rank - 1;
    let mut idx = vec![0usize; rank];
    let mut base = 0usize;
    loop {
        let s = strides[last];
        for j in 0..shape[last] {
            f(base + j * s);
        }
        // carry into the higher axes
        let mut ax = last;
        loop {
            if ax == 0 {
                return;
            }
            ax -= 1;
            idx[ax] += 1;
            base += strides[ax];
            if idx[ax] < shape[ax] {
                break;
            }
            base -= strides[ax] * shape[ax];
            idx[ax] = 0;
        }
    }
}

/// `c (+)= a · b` for row/column-strided operands.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    c: &mut [f64],
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(a.len() > (m - 1) * rsa + (k.max(1) - 1) * csa);
    assert!(b.len() > (k.max(1) - 1) * rsb + (n - 1) * csb);
    assert!(c.len() >= m * n);
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts above bound every offset the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
