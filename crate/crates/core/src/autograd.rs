// SPDX-License-Identifier: Apache-2.0

//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every value is a 2-D block (`rows × cols`; scalars are `1 × 1`). Nodes are
//! appended in evaluation order, so replaying adjoints from the loss
//! backwards visits every consumer before its producers. Only nodes that
//! transitively depend on a `requires_grad` leaf receive adjoints.
//!
//! Leaf gradients persist on the tape and accumulate across calls to
//! [`Tape::backward`] until [`Tape::zero_grad`].

use crate::error::{LitError, Result};
use crate::tensor::{log_sum_exp, Scalar, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

/// `tanh` through a single `exp`; libm's `tanhf` is several times slower and
/// dominates the MLP at these sizes.
#[inline]
fn tanh<T: Scalar>(u: T) -> T {
    let two = T::of(2.0);
    T::one() - two / ((two * u).exp() + T::one())
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    Sum(usize),
    Gelu(usize),
    RmsNorm {
        x: usize,
        gain: usize,
        inv_rms: Vec<T>,
    },
    SoftmaxRows(usize),
    CausalAttention {
        q: usize,
        k: usize,
        v: usize,
        heads: usize,
        probs: Vec<T>,
    },
    CrossEntropy {
        logits: usize,
        targets: Vec<usize>,
        mask: Vec<bool>,
        probs: Vec<T>,
        count: usize,
    },
    Embedding {
        table: usize,
        ids: Vec<usize>,
    },
    SliceRows {
        x: usize,
        start: usize,
    },
    SpliceRows {
        base: usize,
        src: usize,
        start: usize,
    },
}

#[derive(Debug)]
struct Node<T> {
    rows: usize,
    cols: usize,
    value: Vec<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Ordered record of primitive operations.
#[derive(Debug, Default)]
pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    leaf_grads: Vec<Option<Vec<T>>>,
}

fn shape_err(op: &'static str, a: (usize, usize), b: (usize, usize)) -> LitError {
    LitError::Shape {
        op,
        lhs: vec![a.0, a.1],
        rhs: vec![b.0, b.1],
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            leaf_grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<T>, op: Op<T>, requires_grad: bool) -> Var {
        debug_assert_eq!(rows * cols, value.len());
        self.nodes.push(Node {
            rows,
            cols,
            value,
            op,
            requires_grad,
        });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node<T> {
        &self.nodes[v.0]
    }

    /// Registers a 1-D or 2-D tensor as a leaf.
    pub fn leaf(&mut self, t: &Tensor<T>, requires_grad: bool) -> Var {
        let (rows, cols) = t.dims2().expect("tape leaves must be 1-D or 2-D");
        self.push(rows, cols, t.data().to_vec(), Op::Leaf, requires_grad)
    }

    pub fn leaf_raw(&mut self, rows: usize, cols: usize, data: Vec<T>, requires_grad: bool) -> Var {
        assert_eq!(rows * cols, data.len());
        self.push(rows, cols, data, Op::Leaf, requires_grad)
    }

    pub fn dims(&self, v: Var) -> (usize, usize) {
        let n = self.node(v);
        (n.rows, n.cols)
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.node(v).value
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = self.node(v);
        Tensor::new(vec![n.rows, n.cols], n.value.clone()).expect("consistent node")
    }

    pub fn scalar(&self, v: Var) -> T {
        self.node(v).value[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.leaf_grads[v.0].as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.leaf_grads.iter_mut().for_each(|g| *g = None);
    }

    fn rg(&self, inputs: &[usize]) -> bool {
        inputs.iter().any(|&i| self.nodes[i].requires_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(shape_err("matmul", (m, k), (k2, n)));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, self.value(a), false, self.value(b), false, &mut out, false);
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(m, n, out, Op::MatMul(a.0, b.0), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.dims(a) != self.dims(b) {
            return Err(shape_err("add", self.dims(a), self.dims(b)));
        }
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x + y)
            .collect();
        let (r, c) = self.dims(a);
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(r, c, out, Op::Add(a.0, b.0), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.dims(a) != self.dims(b) {
            return Err(shape_err("mul", self.dims(a), self.dims(b)));
        }
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x * y)
            .collect();
        let (r, c) = self.dims(a);
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(r, c, out, Op::Mul(a.0, b.0), rg))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).iter().map(|&x| x * s).collect();
        let (r, c) = self.dims(a);
        let rg = self.rg(&[a.0]);
        self.push(r, c, out, Op::Scale(a.0, s), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.value(a).iter().copied().sum();
        let rg = self.rg(&[a.0]);
        self.push(1, 1, vec![total], Op::Sum(a.0), rg)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let c = T::of(GELU_C);
        let k = T::of(GELU_K);
        let half = T::of(0.5);
        let out = self
            .value(a)
            .iter()
            .map(|&x| half * x * (T::one() + tanh(c * (x + k * x * x * x))))
            .collect();
        let (r, cols) = self.dims(a);
        let rg = self.rg(&[a.0]);
        self.push(r, cols, out, Op::Gelu(a.0), rg)
    }

    /// Row-wise RMS normalization with a learned `1 × cols` gain.
    pub fn rms_norm(&mut self, x: Var, gain: Var, eps: f64) -> Result<Var> {
        let (rows, cols) = self.dims(x);
        if self.dims(gain) != (1, cols) {
            return Err(shape_err("rms_norm", (rows, cols), self.dims(gain)));
        }
        let eps = T::of(eps);
        let n = T::of(cols as f64);
        let xs = self.value(x);
        let g = self.value(gain);
        let mut out = vec![T::zero(); rows * cols];
        let mut inv_rms = Vec::with_capacity(rows);
        for i in 0..rows {
            let row = &xs[i * cols..(i + 1) * cols];
            let ms = row.iter().map(|&v| v * v).sum::<T>() / n;
            let r = T::one() / (ms + eps).sqrt();
            inv_rms.push(r);
            for j in 0..cols {
                out[i * cols + j] = row[j] * r * g[j];
            }
        }
        let rg = self.rg(&[x.0, gain.0]);
        Ok(self.push(
            rows,
            cols,
            out,
            Op::RmsNorm {
                x: x.0,
                gain: gain.0,
                inv_rms,
            },
            rg,
        ))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let (rows, cols) = self.dims(a);
        let xs = self.value(a);
        let mut out = vec![T::zero(); rows * cols];
        for i in 0..rows {
            let row = &xs[i * cols..(i + 1) * cols];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for j in 0..cols {
                let e = (row[j] - max).exp();
                out[i * cols + j] = e;
                total += e;
            }
            for j in 0..cols {
                out[i * cols + j] = out[i * cols + j] / total;
            }
        }
        let rg = self.rg(&[a.0]);
        self.push(rows, cols, out, Op::SoftmaxRows(a.0), rg)
    }

    /// Multi-head causal self-attention over `T × d` projections.
    ///
    /// Position `i` attends to positions `0..=i`; masked scores are never
    /// evaluated.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let (t, d) = self.dims(q);
        if self.dims(k) != (t, d) || self.dims(v) != (t, d) {
            return Err(shape_err("causal_attention", (t, d), self.dims(k)));
        }
        if heads == 0 || d % heads != 0 {
            return Err(LitError::Config(format!(
                "{heads} heads do not divide hidden size {d}"
            )));
        }
        let dh = d / heads;
        let scale = T::one() / T::of(dh as f64).sqrt();
        let (qs, ks, vs) = (self.value(q), self.value(k), self.value(v));
        let mut probs = vec![T::zero(); heads * t * t];
        let mut out = vec![T::zero(); t * d];
        for h in 0..heads {
            let off = h * dh;
            for i in 0..t {
                let qi = &qs[i * d + off..i * d + off + dh];
                let prow = &mut probs[(h * t + i) * t..(h * t + i + 1) * t];
                let mut max = T::neg_infinity();
                for j in 0..=i {
                    let kj = &ks[j * d + off..j * d + off + dh];
                    let s = dot(qi, kj) * scale;
                    prow[j] = s;
                    max = max.max(s);
                }
                let mut total = T::zero();
                for p in prow[..=i].iter_mut() {
                    *p = (*p - max).exp();
                    total += *p;
                }
                let inv = T::one() / total;
                let orow = &mut out[i * d + off..i * d + off + dh];
                for j in 0..=i {
                    prow[j] *= inv;
                    let pj = prow[j];
                    let vj = &vs[j * d + off..j * d + off + dh];
                    for (o, &vv) in orow.iter_mut().zip(vj) {
                        *o += pj * vv;
                    }
                }
            }
        }
        let rg = self.rg(&[q.0, k.0, v.0]);
        Ok(self.push(
            t,
            d,
            out,
            Op::CausalAttention {
                q: q.0,
                k: k.0,
                v: v.0,
                heads,
                probs,
            },
            rg,
        ))
    }

    /// Mean negative log-likelihood of `targets` over positions where
    /// `mask` is true.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let (rows, vocab) = self.dims(logits);
        if targets.len() != rows || mask.len() != rows {
            return Err(shape_err("cross_entropy", (rows, vocab), (targets.len(), mask.len())));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(LitError::DegenerateMask);
        }
        for (&t, _) in targets.iter().zip(mask).filter(|(_, &m)| m) {
            if t >= vocab {
                return Err(LitError::Index {
                    what: "cross_entropy target",
                    index: t,
                    bound: vocab,
                });
            }
        }
        let xs = self.value(logits);
        let mut probs = vec![T::zero(); rows * vocab];
        let mut total = T::zero();
        for i in 0..rows {
            if !mask[i] {
                continue;
            }
            let row = &xs[i * vocab..(i + 1) * vocab];
            let lse = log_sum_exp(row);
            total += lse - row[targets[i]];
            for (p, &x) in probs[i * vocab..(i + 1) * vocab].iter_mut().zip(row) {
                *p = (x - lse).exp();
            }
        }
        let loss = total / T::of(count as f64);
        let rg = self.rg(&[logits.0]);
        Ok(self.push(
            1,
            1,
            vec![loss],
            Op::CrossEntropy {
                logits: logits.0,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                probs,
                count,
            },
            rg,
        ))
    }

    /// Gathers rows of `table` by id.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, cols) = self.dims(table);
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(LitError::Index {
                what: "embedding id",
                index: bad,
                bound: rows,
            });
        }
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * cols);
        for &i in ids {
            out.extend_from_slice(&tv[i * cols..(i + 1) * cols]);
        }
        let rg = self.rg(&[table.0]);
        Ok(self.push(
            ids.len(),
            cols,
            out,
            Op::Embedding {
                table: table.0,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Rows `start..end` of `x`.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (rows, cols) = self.dims(x);
        if start > end || end > rows {
            return Err(LitError::Span {
                start,
                end,
                len: rows,
            });
        }
        let out = self.value(x)[start * cols..end * cols].to_vec();
        let rg = self.rg(&[x.0]);
        Ok(self.push(end - start, cols, out, Op::SliceRows { x: x.0, start }, rg))
    }

    /// Copy of `base` whose rows `start..start + src.rows` are `src`.
    pub fn splice_rows(&mut self, base: Var, src: Var, start: usize) -> Result<Var> {
        let (rows, cols) = self.dims(base);
        let (n, c2) = self.dims(src);
        if c2 != cols {
            return Err(LitError::HiddenSize {
                got: c2,
                expected: cols,
            });
        }
        if start + n > rows {
            return Err(LitError::Span {
                start,
                end: start + n,
                len: rows,
            });
        }
        let mut out = self.value(base).to_vec();
        out[start * cols..(start + n) * cols].copy_from_slice(self.value(src));
        let rg = self.rg(&[base.0, src.0]);
        Ok(self.push(
            rows,
            cols,
            out,
            Op::SpliceRows {
                base: base.0,
                src: src.0,
                start,
            },
            rg,
        ))
    }

    /// Replays adjoints from `loss` and adds the result into every
    /// reachable `requires_grad` leaf.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let (r, c) = self.dims(loss);
        if (r, c) != (1, 1) {
            return Err(LitError::Rank {
                op: "backward",
                shape: vec![r, c],
            });
        }
        if !self.node(loss).requires_grad {
            return Ok(());
        }
        let mut adj: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        adj[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            self.propagate(idx, &g, &mut adj);
            if matches!(self.nodes[idx].op, Op::Leaf) {
                match &mut self.leaf_grads[idx] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[T], adj: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let node = &nodes[idx];
        let wants = |i: usize| nodes[i].requires_grad;
        macro_rules! buf {
            ($i:expr) => {
                adjoint_slot(adj, nodes, $i)
            };
        }
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (nodes[*a].rows, nodes[*a].cols);
                let n = nodes[*b].cols;
                if wants(*a) {
                    // dA += dC · Bᵀ
                    T::gemm(m, n, k, g, false, &nodes[*b].value, true, buf!(*a), true);
                }
                if wants(*b) {
                    // dB += Aᵀ · dC
                    T::gemm(k, m, n, &nodes[*a].value, true, g, false, buf!(*b), true);
                }
            }
            Op::Add(a, b) => {
                for &i in &[*a, *b] {
                    if wants(i) {
                        buf!(i).iter_mut().zip(g).for_each(|(d, &x)| *d += x);
                    }
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    let bv = &nodes[*b].value;
                    buf!(*a)
                        .iter_mut()
                        .zip(g.iter().zip(bv))
                        .for_each(|(d, (&x, &y))| *d += x * y);
                }
                if wants(*b) {
                    let av = &nodes[*a].value;
                    buf!(*b)
                        .iter_mut()
                        .zip(g.iter().zip(av))
                        .for_each(|(d, (&x, &y))| *d += x * y);
                }
            }
            Op::Scale(a, s) => {
                if wants(*a) {
                    buf!(*a).iter_mut().zip(g).for_each(|(d, &x)| *d += x * *s);
                }
            }
            Op::Sum(a) => {
                if wants(*a) {
                    buf!(*a).iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Gelu(a) => {
                if wants(*a) {
                    let c = T::of(GELU_C);
                    let k = T::of(GELU_K);
                    let half = T::of(0.5);
                    let three = T::of(3.0);
                    let xs = &nodes[*a].value;
                    for ((d, &x), &gy) in buf!(*a).iter_mut().zip(xs).zip(g) {
                        let th = tanh(c * (x + k * x * x * x));
                        let dy = half * (T::one() + th)
                            + half * x * (T::one() - th * th) * c * (T::one() + three * k * x * x);
                        *d += gy * dy;
                    }
                }
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let (rows, cols) = (nodes[*x].rows, nodes[*x].cols);
                let xs = &nodes[*x].value;
                let gs = &nodes[*gain].value;
                if wants(*gain) {
                    let dg = buf!(*gain);
                    for i in 0..rows {
                        for j in 0..cols {
                            dg[j] += g[i * cols + j] * xs[i * cols + j] * inv_rms[i];
                        }
                    }
                }
                if wants(*x) {
                    let dx = buf!(*x);
                    let n = T::of(cols as f64);
                    for i in 0..rows {
                        let r = inv_rms[i];
                        let row = i * cols..(i + 1) * cols;
                        let proj: T = g[row.clone()]
                            .iter()
                            .zip(gs)
                            .zip(&xs[row.clone()])
                            .map(|((&gy, &gj), &xv)| gy * gj * xv)
                            .sum();
                        let coef = r * r * r * proj / n;
                        for j in 0..cols {
                            dx[i * cols + j] += r * g[i * cols + j] * gs[j] - coef * xs[i * cols + j];
                        }
                    }
                }
            }
            Op::SoftmaxRows(a) => {
                if wants(*a) {
                    let (rows, cols) = (node.rows, node.cols);
                    let y = &node.value;
                    let da = buf!(*a);
                    for i in 0..rows {
                        let r = i * cols..(i + 1) * cols;
                        let inner: T = g[r.clone()].iter().zip(&y[r.clone()]).map(|(&a, &b)| a * b).sum();
                        for j in r {
                            da[j] += y[j] * (g[j] - inner);
                        }
                    }
                }
            }
            Op::CausalAttention {
                q,
                k,
                v,
                heads,
                probs,
            } => {
                let (t, d) = (node.rows, node.cols);
                let dh = d / heads;
                let scale = T::one() / T::of(dh as f64).sqrt();
                let (qs, ks, vs) = (&nodes[*q].value, &nodes[*k].value, &nodes[*v].value);
                let need_q = wants(*q);
                let need_k = wants(*k);
                let need_v = wants(*v);
                let mut dq = vec![T::zero(); if need_q { t * d } else { 0 }];
                let mut dk = vec![T::zero(); if need_k { t * d } else { 0 }];
                let mut dv = vec![T::zero(); if need_v { t * d } else { 0 }];
                let mut dp = vec![T::zero(); t];
                for h in 0..*heads {
                    let off = h * dh;
                    for i in 0..t {
                        let prow = &probs[(h * t + i) * t..(h * t + i) * t + i + 1];
                        let gi = &g[i * d + off..i * d + off + dh];
                        // dP_ij = dO_i · V_j ; dV_j += P_ij dO_i
                        for j in 0..=i {
                            let vj = &vs[j * d + off..j * d + off + dh];
                            dp[j] = dot(gi, vj);
                            if need_v {
                                let pj = prow[j];
                                for (dvv, &gg) in dv[j * d + off..j * d + off + dh].iter_mut().zip(gi) {
                                    *dvv += pj * gg;
                                }
                            }
                        }
                        if !(need_q || need_k) {
                            continue;
                        }
                        let inner: T = (0..=i).map(|j| dp[j] * prow[j]).sum();
                        for j in 0..=i {
                            let ds = prow[j] * (dp[j] - inner) * scale;
                            if need_q {
                                let kj = &ks[j * d + off..j * d + off + dh];
                                for (dqq, &kk) in dq[i * d + off..i * d + off + dh].iter_mut().zip(kj) {
                                    *dqq += ds * kk;
                                }
                            }
                            if need_k {
                                let qi = &qs[i * d + off..i * d + off + dh];
                                for (dkk, &qq) in dk[j * d + off..j * d + off + dh].iter_mut().zip(qi) {
                                    *dkk += ds * qq;
                                }
                            }
                        }
                    }
                }
                for (i, local) in [(*q, dq), (*k, dk), (*v, dv)] {
                    if !local.is_empty() {
                        buf!(i).iter_mut().zip(&local).for_each(|(a, &b)| *a += b);
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                mask,
                probs,
                count,
            } => {
                if wants(*logits) {
                    let vocab = nodes[*logits].cols;
                    let s = g[0] / T::of(*count as f64);
                    let dl = buf!(*logits);
                    for (i, &m) in mask.iter().enumerate() {
                        if !m {
                            continue;
                        }
                        let row = i * vocab..(i + 1) * vocab;
                        for (d, &p) in dl[row.clone()].iter_mut().zip(&probs[row]) {
                            *d += p * s;
                        }
                        dl[i * vocab + targets[i]] -= s;
                    }
                }
            }
            Op::Embedding { table, ids } => {
                if wants(*table) {
                    let cols = node.cols;
                    let dt = buf!(*table);
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..cols {
                            dt[id * cols + j] += g[r * cols + j];
                        }
                    }
                }
            }
            Op::SliceRows { x, start } => {
                if wants(*x) {
                    let cols = node.cols;
                    let dx = buf!(*x);
                    dx[start * cols..start * cols + g.len()]
                        .iter_mut()
                        .zip(g)
                        .for_each(|(a, &b)| *a += b);
                }
            }
            Op::SpliceRows { base, src, start } => {
                let cols = node.cols;
                let n = nodes[*src].rows;
                let span = start * cols..(start + n) * cols;
                if wants(*base) {
                    let db = buf!(*base);
                    for (j, (a, &b)) in db.iter_mut().zip(g).enumerate() {
                        if !span.contains(&j) {
                            *a += b;
                        }
                    }
                }
                if wants(*src) {
                    buf!(*src)
                        .iter_mut()
                        .zip(&g[span])
                        .for_each(|(a, &b)| *a += b);
                }
            }
        }
    }
}

fn adjoint_slot<'a, T: Scalar>(adj: &'a mut [Option<Vec<T>>], nodes: &[Node<T>], i: usize) -> &'a mut Vec<T> {
    let len = nodes[i].value.len();
    adj[i].get_or_insert_with(|| vec![T::zero(); len])
}

#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap(), true);
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn half_dot_gradient_is_identity() {
        let vals = vec![0.3, -1.2, 2.5, 4.0];
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&Tensor::new(vec![4], vals.clone()).unwrap(), true);
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq);
        let half = tape.scale(s, 0.5);
        tape.backward(half).unwrap();
        assert_eq!(tape.grad(x).unwrap(), vals.as_slice());
    }

    #[test]
    fn backward_twice_doubles() {
        let mut tape = Tape::<f32>::new();
        let a = tape.leaf(&Tensor::new(vec![2, 2], vec![0.5, -1.0, 2.0, 0.25]).unwrap(), true);
        let b = tape.leaf(&Tensor::new(vec![2, 2], vec![1.5, 0.5, -0.5, 1.0]).unwrap(), true);
        let c = tape.matmul(a, b).unwrap();
        let s = tape.sum(c);
        tape.backward(s).unwrap();
        let once = tape.grad(a).unwrap().to_vec();
        tape.backward(s).unwrap();
        let twice = tape.grad(a).unwrap();
        for (x, y) in once.iter().zip(twice) {
            assert_eq!(2.0 * x, *y);
        }
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::<f32>::new();
        let a = tape.leaf(&Tensor::zeros(&[2, 2]), true);
        assert!(matches!(tape.backward(a), Err(LitError::Rank { .. })));
    }

    #[test]
    fn frozen_leaves_get_no_gradient() {
        let mut tape = Tape::<f32>::new();
        let a = tape.leaf(&Tensor::filled(&[1, 2], 1.0), false);
        let b = tape.leaf(&Tensor::filled(&[2, 1], 2.0), true);
        let c = tape.matmul(a, b).unwrap();
        let s = tape.sum(c);
        tape.backward(s).unwrap();
        assert!(tape.grad(a).is_none());
        assert_eq!(tape.grad(b).unwrap(), &[1.0, 1.0]);
    }

    #[test]
    fn cross_entropy_uniform_is_ln_vocab() {
        let mut tape = Tape::<f64>::new();
        let l = tape.leaf(&Tensor::zeros(&[3, 8]), false);
        let loss = tape.cross_entropy(l, &[1, 2, 7], &[true; 3]).unwrap();
        assert!((tape.scalar(loss) - 8f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_confident_is_near_zero() {
        let mut logits = Tensor::<f64>::zeros(&[2, 4]);
        logits.data_mut()[1] = 50.0;
        logits.data_mut()[4 + 3] = 50.0;
        let mut tape = Tape::new();
        let l = tape.leaf(&logits, false);
        let loss = tape.cross_entropy(l, &[1, 3], &[true, true]).unwrap();
        assert!(tape.scalar(loss) < 1e-12);
    }

    #[test]
    fn cross_entropy_errors() {
        let mut tape = Tape::<f32>::new();
        let l = tape.leaf(&Tensor::zeros(&[2, 4]), false);
        assert!(matches!(
            tape.cross_entropy(l, &[0, 1], &[false, false]),
            Err(LitError::DegenerateMask)
        ));
        assert!(matches!(
            tape.cross_entropy(l, &[0, 9], &[true, true]),
            Err(LitError::Index { .. })
        ));
        // masked-out ids are never inspected
        assert!(tape.cross_entropy(l, &[0, 9], &[true, false]).is_ok());
    }

    #[test]
    fn splice_then_slice_roundtrip() {
        let mut tape = Tape::<f32>::new();
        let base = tape.leaf(&Tensor::filled(&[4, 2], 1.0), false);
        let src = tape.leaf(&Tensor::filled(&[2, 2], 7.0), false);
        let spliced = tape.splice_rows(base, src, 1).unwrap();
        assert_eq!(tape.value(spliced), &[1.0, 1.0, 7.0, 7.0, 7.0, 7.0, 1.0, 1.0]);
        let back = tape.slice_rows(spliced, 1, 3).unwrap();
        assert_eq!(tape.value(back), tape.value(src));
        assert!(tape.splice_rows(base, src, 3).is_err());
    }
}
