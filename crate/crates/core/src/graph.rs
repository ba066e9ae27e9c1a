//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation in creation order, so the node list is
//! already a topological order and [`Graph::backward`] is a single reverse
//! sweep. Leaves either borrow their tensor (`*_ref`) or own it. Gradients are
//! only materialised for nodes that (transitively) depend on a parameter.

use std::borrow::Cow;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{gemm, Tensor};

/// Handle to a node inside one [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// One attention segment: query rows `q_start..q_start+q_len` attend to
/// key/value rows `kv_start..kv_start+kv_len`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttnSegment {
    pub q_start: usize,
    pub q_len: usize,
    pub kv_start: usize,
    pub kv_len: usize,
}

impl AttnSegment {
    /// Self-attention over rows `start..start+len`.
    pub fn square(start: usize, len: usize) -> Self {
        AttnSegment {
            q_start: start,
            q_len: len,
            kv_start: start,
            kv_len: len,
        }
    }
}

const LN_EPS: f32 = 1e-5;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    AddBias(Var, Var),
    Relu(Var),
    Gelu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f32>,
        rstd: Vec<f32>,
    },
    Gather {
        table: Var,
        indices: Vec<usize>,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    Reshape(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        segments: Vec<AttnSegment>,
        // per segment, per head: q_len × kv_len probabilities, concatenated
        probs: Vec<f32>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<f32>,
        count: usize,
    },
    Mse {
        pred: Var,
        truth: Vec<f32>,
    },
    Sum(Var),
    Mean(Var),
    Dropout {
        x: Var,
        mask: Vec<f32>,
    },
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    requires_grad: bool,
}

/// A computation tape. Parameters are borrowed for the lifetime `'a`.
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
    grads: Vec<Option<Vec<f32>>>,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

fn expect_matrix(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    if t.shape().len() != 2 {
        return Err(Error::dim(op, t.shape(), &[0, 0]));
    }
    Ok((t.shape()[0], t.shape()[1]))
}

fn gelu_parts(x: f32) -> (f32, f32) {
    const C: f32 = 0.797_884_6; // sqrt(2/pi)
    const K: f32 = 0.044_715;
    let inner = C * (x + K * x * x * x);
    let t = inner.tanh();
    let y = 0.5 * x * (1.0 + t);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * K * x * x);
    (y, dy)
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'a, Tensor>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let rg = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.push(Cow::Owned(value), op, rg)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Cow::Owned(t), Op::Leaf, false)
    }

    pub fn constant_ref(&mut self, t: &'a Tensor) -> Var {
        self.push(Cow::Borrowed(t), Op::Leaf, false)
    }

    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(Cow::Owned(t), Op::Leaf, true)
    }

    pub fn param_ref(&mut self, t: &'a Tensor) -> Var {
        self.push(Cow::Borrowed(t), Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient, or `None` if nothing flowed into `v`.
    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.grads[v.0].as_deref()
    }

    /// Accumulated gradient as a tensor shaped like the value (zeros if none).
    pub fn grad_tensor(&self, v: Var) -> Tensor {
        let shape = self.nodes[v.0].value.shape().to_vec();
        match &self.grads[v.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(&shape),
        }
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    // ------------------------------------------------------------------
    // forward ops
    // ------------------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = expect_matrix("matmul", av)?;
        let (k2, n) = expect_matrix("matmul", bv)?;
        if k != k2 {
            return Err(Error::dim("matmul", av.shape(), bv.shape()));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, av.data(), false, bv.data(), false, &mut out, false);
        let t = Tensor::new(vec![m, n], out)?;
        Ok(self.push_op(t, Op::MatMul(a, b), &[a, b]))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f32, f32) -> f32,
        op: Op,
    ) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::dim(name, av.shape(), bv.shape()));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push_op(t, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f32) -> Var {
        let av = self.value(a);
        let data = av.data().iter().map(|&x| x * s).collect();
        let t = Tensor::new(av.shape().to_vec(), data).expect("same shape");
        self.push_op(t, Op::Scale(a, s), &[a])
    }

    /// Adds a length-`d` bias to every row of an `[n×d]` matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        let d = xv.cols();
        if bv.numel() != d || xv.shape().len() != 2 {
            return Err(Error::dim("add_bias", xv.shape(), bv.shape()));
        }
        let mut data = xv.data().to_vec();
        for row in data.chunks_exact_mut(d) {
            for (x, b) in row.iter_mut().zip(bv.data()) {
                *x += b;
            }
        }
        let t = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.push_op(t, Op::AddBias(x, bias), &[x, bias]))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| v.max(0.0)).collect();
        let t = Tensor::new(xv.shape().to_vec(), data).expect("same shape");
        self.push_op(t, Op::Relu(x), &[x])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| gelu_parts(v).0).collect();
        let t = Tensor::new(xv.shape().to_vec(), data).expect("same shape");
        self.push_op(t, Op::Gelu(x), &[x])
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let d = xv.cols();
        let mut data = xv.data().to_vec();
        for row in data.chunks_exact_mut(d) {
            softmax_in_place(row);
        }
        let t = Tensor::new(xv.shape().to_vec(), data).expect("same shape");
        self.push_op(t, Op::Softmax(x), &[x])
    }

    /// Layer normalisation over the last axis followed by `γ ⊙ x̂ + β`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.cols();
        let (gv, bv) = (self.value(gamma), self.value(beta));
        if gv.numel() != d || bv.numel() != d {
            return Err(Error::dim("layer_norm", xv.shape(), gv.shape()));
        }
        let rows = xv.rows();
        let mut xhat = vec![0.0; xv.numel()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xv.numel()];
        for r in 0..rows {
            let row = &xv.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f32>() / d as f32;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / d as f32;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd[r] = rs;
            for c in 0..d {
                let h = (row[c] - mean) * rs;
                xhat[r * d + c] = h;
                out[r * d + c] = h * gv.data()[c] + bv.data()[c];
            }
        }
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        Ok(self.push_op(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        ))
    }

    /// Row lookup: output row `i` is `table[indices[i]]`. Embedding lookup is
    /// this op applied to an embedding table.
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        let (rows, d) = expect_matrix("gather_rows", tv)?;
        let mut out = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            if i >= rows {
                return Err(Error::Index {
                    index: i,
                    bound: rows,
                    context: "embedding lookup",
                });
            }
            out.extend_from_slice(&tv.data()[i * d..(i + 1) * d]);
        }
        if indices.is_empty() {
            return Err(Error::Contract("gather_rows with no indices".into()));
        }
        let t = Tensor::new(vec![indices.len(), d], out)?;
        Ok(self.push_op(
            t,
            Op::Gather {
                table,
                indices: indices.to_vec(),
            },
            &[table],
        ))
    }

    pub fn embedding(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        self.gather_rows(table, indices)
    }

    /// Concatenates matrices with equal row counts along the last axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat of nothing".into()))?;
        let (n, _) = expect_matrix("concat_cols", self.value(*first))?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = expect_matrix("concat_cols", self.value(p))?;
            if r != n {
                return Err(Error::dim("concat_cols", self.value(*first).shape(), self.value(p).shape()));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; n * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.value(p).data();
            for r in 0..n {
                out[r * total + off..r * total + off + w].copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            off += w;
        }
        let t = Tensor::new(vec![n, total], out)?;
        Ok(self.push_op(t, Op::ConcatCols(parts.to_vec()), parts))
    }

    /// Stacks matrices with equal column counts.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat of nothing".into()))?;
        let d = self.value(*first).cols();
        let mut out = Vec::new();
        for &p in parts {
            let pv = self.value(p);
            if pv.cols() != d || pv.shape().len() != 2 {
                return Err(Error::dim("concat_rows", self.value(*first).shape(), pv.shape()));
            }
            out.extend_from_slice(pv.data());
        }
        let n = out.len() / d;
        let t = Tensor::new(vec![n, d], out)?;
        Ok(self.push_op(t, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let (n, d) = expect_matrix("slice_rows", xv)?;
        if len == 0 || start + len > n {
            return Err(Error::Index {
                index: start + len,
                bound: n,
                context: "slice_rows",
            });
        }
        let t = Tensor::new(vec![len, d], xv.data()[start * d..(start + len) * d].to_vec())?;
        Ok(self.push_op(t, Op::SliceRows { x, start }, &[x]))
    }

    /// Columns `start..start+len` of a matrix (a slice along the last axis).
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let (n, d) = expect_matrix("slice_cols", xv)?;
        if len == 0 || start + len > d {
            return Err(Error::Index {
                index: start + len,
                bound: d,
                context: "slice_cols",
            });
        }
        let mut out = Vec::with_capacity(n * len);
        for r in 0..n {
            out.extend_from_slice(&xv.data()[r * d + start..r * d + start + len]);
        }
        let t = Tensor::new(vec![n, len], out)?;
        Ok(self.push_op(t, Op::SliceCols { x, start }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).reshape(shape)?;
        Ok(self.push_op(t, Op::Reshape(x), &[x]))
    }

    /// Multi-head scaled dot-product attention over row segments.
    ///
    /// `q` is `[n×d]`, `k` and `v` are `[m×d]`; heads split the last axis.
    /// With `causal`, query `i` of a segment sees keys `0..=i` of that
    /// segment (segments must then be square).
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        segments: &[AttnSegment],
        causal: bool,
    ) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (n, d) = expect_matrix("attention", qv)?;
        let (m, dk) = expect_matrix("attention", kv)?;
        if dk != d || vv.shape() != kv.shape() {
            return Err(Error::dim("attention", qv.shape(), kv.shape()));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::config("heads", format!("{heads} does not divide {d}")));
        }
        for s in segments {
            if s.q_start + s.q_len > n || s.kv_start + s.kv_len > m || s.kv_len == 0 {
                return Err(Error::Contract(format!("attention segment {s:?} out of range")));
            }
            if causal && s.q_len != s.kv_len {
                return Err(Error::Contract("causal attention needs square segments".into()));
            }
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f32).sqrt();
        let (qd, kd, vd) = (qv.data(), kv.data(), vv.data());
        let mut out = vec![0.0; n * d];
        let mut probs = Vec::new();
        let mut scores = Vec::new();
        for s in segments {
            for h in 0..heads {
                let c0 = h * dh;
                for i in 0..s.q_len {
                    let qi = &qd[(s.q_start + i) * d + c0..(s.q_start + i) * d + c0 + dh];
                    let visible = if causal { i + 1 } else { s.kv_len };
                    scores.clear();
                    for j in 0..visible {
                        let kj = &kd[(s.kv_start + j) * d + c0..(s.kv_start + j) * d + c0 + dh];
                        let dot: f32 = qi.iter().zip(kj).map(|(a, b)| a * b).sum();
                        scores.push(dot * scale);
                    }
                    softmax_in_place(&mut scores);
                    let orow = &mut out[(s.q_start + i) * d + c0..(s.q_start + i) * d + c0 + dh];
                    for (j, &p) in scores.iter().enumerate() {
                        let vj = &vd[(s.kv_start + j) * d + c0..(s.kv_start + j) * d + c0 + dh];
                        for (o, &x) in orow.iter_mut().zip(vj) {
                            *o += p * x;
                        }
                    }
                    probs.extend_from_slice(&scores);
                    probs.extend(std::iter::repeat_n(0.0, s.kv_len - visible));
                }
            }
        }
        let t = Tensor::new(vec![n, d], out)?;
        Ok(self.push_op(
            t,
            Op::Attention {
                q,
                k,
                v,
                heads,
                segments: segments.to_vec(),
                probs,
            },
            &[q, k, v],
        ))
    }

    /// Mean token cross-entropy over the rows that carry a target.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let lv = self.value(logits);
        let (n, vocab) = expect_matrix("cross_entropy", lv)?;
        if targets.len() != n {
            return Err(Error::dim("cross_entropy", lv.shape(), &[targets.len()]));
        }
        let count = targets.iter().filter(|t| t.is_some()).count();
        if count == 0 {
            return Err(Error::Contract("cross_entropy with no targets".into()));
        }
        let mut probs = vec![0.0; n * vocab];
        let mut total = 0.0f64;
        for (r, t) in targets.iter().enumerate() {
            let Some(t) = *t else { continue };
            if t >= vocab {
                return Err(Error::Index {
                    index: t,
                    bound: vocab,
                    context: "cross_entropy target",
                });
            }
            let row = &lv.data()[r * vocab..(r + 1) * vocab];
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
            let z: f64 = row.iter().map(|&x| (x as f64 - max).exp()).sum();
            let lse = max + z.ln();
            total += lse - row[t] as f64;
            for (p, &x) in probs[r * vocab..(r + 1) * vocab].iter_mut().zip(row) {
                *p = ((x as f64 - lse).exp()) as f32;
            }
        }
        let loss = (total / count as f64).max(0.0) as f32;
        let t = Tensor::new(vec![1], vec![loss])?;
        Ok(self.push_op(
            t,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                count,
            },
            &[logits],
        ))
    }

    /// Mean of squared differences against a constant target.
    pub fn mse(&mut self, pred: Var, truth: &Tensor) -> Result<Var> {
        let pv = self.value(pred);
        if pv.shape() != truth.shape() {
            return Err(Error::dim("mse", pv.shape(), truth.shape()));
        }
        let total: f64 = pv
            .data()
            .iter()
            .zip(truth.data())
            .map(|(&a, &b)| {
                let d = a as f64 - b as f64;
                d * d
            })
            .sum();
        let t = Tensor::new(vec![1], vec![(total / pv.numel() as f64) as f32])?;
        Ok(self.push_op(
            t,
            Op::Mse {
                pred,
                truth: truth.data().to_vec(),
            },
            &[pred],
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().map(|&v| v as f64).sum();
        let t = Tensor::new(vec![1], vec![s as f32]).expect("scalar");
        self.push_op(t, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let s: f64 = xv.data().iter().map(|&v| v as f64).sum();
        let t = Tensor::new(vec![1], vec![(s / xv.numel() as f64) as f32]).expect("scalar");
        self.push_op(t, Op::Mean(x), &[x])
    }

    /// Inverted dropout. `p == 0` returns `x` unchanged.
    pub fn dropout(&mut self, x: Var, p: f32, rng: &mut Rng) -> Var {
        if p <= 0.0 {
            return x;
        }
        let xv = self.value(x);
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f32> = (0..xv.numel())
            .map(|_| if rng.uniform() < p as f64 { 0.0 } else { keep })
            .collect();
        let data = xv.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let t = Tensor::new(xv.shape().to_vec(), data).expect("same shape");
        self.push_op(t, Op::Dropout { x, mask }, &[x])
    }

    // ------------------------------------------------------------------
    // reverse sweep
    // ------------------------------------------------------------------

    /// Accumulates `∂loss/∂v` into every node that requires a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        match &mut self.grads[loss.0] {
            Some(g) => g[0] += 1.0,
            slot => *slot = Some(vec![1.0]),
        }
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else { continue };
            self.propagate(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn propagate(&mut self, i: usize, g: &[f32]) {
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        let val = |v: Var| -> &Tensor { &nodes[v.0].value };
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f32])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.numel()]);
            f(slot);
        };
        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = bv.shape()[1];
                acc(*a, &mut |da| gemm(m, n, k, g, false, bv.data(), true, da, true));
                acc(*b, &mut |db| gemm(k, m, n, av.data(), true, g, false, db, true));
            }
            Op::Add(a, b) => {
                acc(*a, &mut |da| add_into(da, g));
                acc(*b, &mut |db| add_into(db, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |da| add_into(da, g));
                acc(*b, &mut |db| db.iter_mut().zip(g).for_each(|(d, &x)| *d -= x));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a).data(), val(*b).data());
                acc(*a, &mut |da| {
                    for ((d, &x), &y) in da.iter_mut().zip(g).zip(bv) {
                        *d += x * y;
                    }
                });
                acc(*b, &mut |db| {
                    for ((d, &x), &y) in db.iter_mut().zip(g).zip(av) {
                        *d += x * y;
                    }
                });
            }
            Op::Scale(a, s) => {
                acc(*a, &mut |da| da.iter_mut().zip(g).for_each(|(d, &x)| *d += x * s));
            }
            Op::AddBias(x, b) => {
                acc(*x, &mut |dx| add_into(dx, g));
                let d = val(*b).numel();
                acc(*b, &mut |db| {
                    for row in g.chunks_exact(d) {
                        add_into(db, row);
                    }
                });
            }
            Op::Relu(x) => {
                let xv = val(*x).data();
                acc(*x, &mut |dx| {
                    for ((d, &gg), &v) in dx.iter_mut().zip(g).zip(xv) {
                        if v > 0.0 {
                            *d += gg;
                        }
                    }
                });
            }
            Op::Gelu(x) => {
                let xv = val(*x).data();
                acc(*x, &mut |dx| {
                    for ((d, &gg), &v) in dx.iter_mut().zip(g).zip(xv) {
                        *d += gg * gelu_parts(v).1;
                    }
                });
            }
            Op::Softmax(x) => {
                let y = nodes[i].value.data();
                let d = nodes[i].value.cols();
                acc(*x, &mut |dx| {
                    for ((dr, gr), yr) in dx.chunks_exact_mut(d).zip(g.chunks_exact(d)).zip(y.chunks_exact(d)) {
                        let dot: f32 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for ((o, &gg), &yy) in dr.iter_mut().zip(gr).zip(yr) {
                            *o += yy * (gg - dot);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = val(*x).cols();
                let gv = val(*gamma).data();
                acc(*gamma, &mut |dg| {
                    for (gr, hr) in g.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                        for c in 0..d {
                            dg[c] += gr[c] * hr[c];
                        }
                    }
                });
                acc(*beta, &mut |db| {
                    for gr in g.chunks_exact(d) {
                        add_into(db, gr);
                    }
                });
                acc(*x, &mut |dx| {
                    let mut dh = vec![0.0; d];
                    for (r, ((dr, gr), hr)) in dx
                        .chunks_exact_mut(d)
                        .zip(g.chunks_exact(d))
                        .zip(xhat.chunks_exact(d))
                        .enumerate()
                    {
                        for c in 0..d {
                            dh[c] = gr[c] * gv[c];
                        }
                        let mean_dh = dh.iter().sum::<f32>() / d as f32;
                        let mean_dhh = dh.iter().zip(hr).map(|(a, b)| a * b).sum::<f32>() / d as f32;
                        for c in 0..d {
                            dr[c] += rstd[r] * (dh[c] - mean_dh - hr[c] * mean_dhh);
                        }
                    }
                });
            }
            Op::Gather { table, indices } => {
                let d = val(*table).cols();
                acc(*table, &mut |dt| {
                    for (gr, &ix) in g.chunks_exact(d).zip(indices) {
                        add_into(&mut dt[ix * d..(ix + 1) * d], gr);
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let total = nodes[i].value.cols();
                let mut off = 0;
                for &p in parts {
                    let w = val(p).cols();
                    acc(p, &mut |dp| {
                        for (dr, gr) in dp.chunks_exact_mut(w).zip(g.chunks_exact(total)) {
                            add_into(dr, &gr[off..off + w]);
                        }
                    });
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = val(p).numel();
                    acc(p, &mut |dp| add_into(dp, &g[off..off + len]));
                    off += len;
                }
            }
            Op::SliceRows { x, start } => {
                let d = val(*x).cols();
                acc(*x, &mut |dx| add_into(&mut dx[start * d..start * d + g.len()], g));
            }
            Op::SliceCols { x, start } => {
                let d = val(*x).cols();
                let w = nodes[i].value.cols();
                acc(*x, &mut |dx| {
                    for (dr, gr) in dx.chunks_exact_mut(d).zip(g.chunks_exact(w)) {
                        add_into(&mut dr[*start..start + w], gr);
                    }
                });
            }
            Op::Reshape(x) => {
                acc(*x, &mut |dx| add_into(dx, g));
            }
            Op::Sum(x) => {
                acc(*x, &mut |dx| dx.iter_mut().for_each(|d| *d += g[0]));
            }
            Op::Mean(x) => {
                let n = val(*x).numel() as f32;
                acc(*x, &mut |dx| dx.iter_mut().for_each(|d| *d += g[0] / n));
            }
            Op::Dropout { x, mask } => {
                acc(*x, &mut |dx| {
                    for ((d, &gg), &m) in dx.iter_mut().zip(g).zip(mask) {
                        *d += gg * m;
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                let vocab = val(*logits).cols();
                let s = g[0] / *count as f32;
                acc(*logits, &mut |dl| {
                    for (r, t) in targets.iter().enumerate() {
                        let Some(t) = *t else { continue };
                        let row = &mut dl[r * vocab..(r + 1) * vocab];
                        for (d, &p) in row.iter_mut().zip(&probs[r * vocab..(r + 1) * vocab]) {
                            *d += s * p;
                        }
                        row[t] -= s;
                    }
                });
            }
            Op::Mse { pred, truth } => {
                let pv = val(*pred).data();
                let s = 2.0 * g[0] / pv.len() as f32;
                acc(*pred, &mut |dp| {
                    for ((d, &a), &b) in dp.iter_mut().zip(pv).zip(truth) {
                        *d += s * (a - b);
                    }
                });
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                segments,
                probs,
            } => {
                let (qv, kv, vv) = (val(*q), val(*k), val(*v));
                let d = qv.cols();
                let dh = d / heads;
                let scale = 1.0 / (dh as f32).sqrt();
                let mut dq = vec![0.0; qv.numel()];
                let mut dk = vec![0.0; kv.numel()];
                let mut dv = vec![0.0; vv.numel()];
                let mut off = 0;
                let mut dp = Vec::new();
                for s in segments {
                    for h in 0..*heads {
                        let c0 = h * dh;
                        for i in 0..s.q_len {
                            let p = &probs[off..off + s.kv_len];
                            off += s.kv_len;
                            let qrow = (s.q_start + i) * d + c0;
                            let go = &g[qrow..qrow + dh];
                            dp.clear();
                            for (j, &pj) in p.iter().enumerate() {
                                let vrow = (s.kv_start + j) * d + c0;
                                let vj = &vv.data()[vrow..vrow + dh];
                                dp.push(go.iter().zip(vj).map(|(a, b)| a * b).sum::<f32>());
                                if pj != 0.0 {
                                    for (dvv, &gg) in dv[vrow..vrow + dh].iter_mut().zip(go) {
                                        *dvv += pj * gg;
                                    }
                                }
                            }
                            let dot: f32 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
                            for j in 0..s.kv_len {
                                let ds = p[j] * (dp[j] - dot) * scale;
                                if ds == 0.0 {
                                    continue;
                                }
                                let krow = (s.kv_start + j) * d + c0;
                                for c in 0..dh {
                                    dq[qrow + c] += ds * kv.data()[krow + c];
                                    dk[krow + c] += ds * qv.data()[qrow + c];
                                }
                            }
                        }
                    }
                }
                acc(*q, &mut |x| add_into(x, &dq));
                acc(*k, &mut |x| add_into(x, &dk));
                acc(*v, &mut |x| add_into(x, &dv));
            }
        }
    }
}

fn add_into(dst: &mut [f32], src: &[f32]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub(crate) fn softmax_in_place(row: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut z = 0.0f32;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        z += *x;
    }
    let inv = 1.0 / z;
    row.iter_mut().for_each(|x| *x *= inv);
}

/// `sqrt(Σ x²)` over every element of every tensor.
pub fn global_norm<'t>(grads: impl IntoIterator<Item = &'t Tensor>) -> f32 {
    grads
        .into_iter()
        .map(Tensor::sum_squares)
        .sum::<f64>()
        .sqrt() as f32
}
