//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] records every primitive in evaluation order, so operands
//! always precede their results. [`Tape::backward`] sweeps the record once
//! in reverse and returns the gradients of all leaves that require them;
//! [`Gradients::accumulate_into`] adds those into the owning
//! [`ParamStore`]. Gradients accumulate until [`ParamStore::zero_grad`] is
//! called, so several losses can be backpropagated before reading.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::{ParamId, ParamStore, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Minimum(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    ScaleBy(Var, Var),
    Scale(Var, f64),
    MulConst(Var, Vec<f64>),
    AddConst(Var),
    Sum(Var),
    Mean(Var),
    WeightedSum(Var, Vec<f64>),
    L1(Var),
    SumRows(Var),
    Softmax(Var),
    LogSoftmax(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<f64>,
        count: usize,
    },
    LayerNorm {
        x: Var,
        inv_std: Vec<f64>,
    },
    Silu(Var),
    Exp(Var),
    Clamp(Var, f64, f64),
    GatherRows(Var, Vec<usize>),
    PickPerRow(Var, Vec<usize>),
    CausalAttention {
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        seq: usize,
        heads: usize,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
    param: Option<ParamId>,
}

/// Single-threaded computation record.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    no_grad: bool,
}

/// Leaf gradients produced by one backward sweep.
#[derive(Debug, Default)]
pub struct Gradients {
    by_var: HashMap<Var, Vec<f64>>,
    by_param: Vec<(ParamId, Var)>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.by_var.get(&var).map(Vec::as_slice)
    }

    pub fn param(&self, id: ParamId) -> Option<&[f64]> {
        self.by_param
            .iter()
            .find(|(p, _)| *p == id)
            .and_then(|(_, v)| self.get(*v))
    }

    /// Adds every parameter gradient into the store's grad buffers.
    pub fn accumulate_into(&self, store: &mut ParamStore) {
        for (id, var) in &self.by_param {
            if let Some(g) = self.by_var.get(var) {
                store.get_mut(*id).accumulate_grad(g);
            }
        }
    }
}

fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> Error {
    Error::ShapeMismatch {
        op,
        left: a.to_vec(),
        right: b.to_vec(),
    }
}

fn rows_cols(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.dims2() {
        Some((r, c)) if r > 0 && c > 0 => Ok((r, c)),
        Some(_) => Err(Error::ZeroExtent {
            op,
            shape: t.shape().to_vec(),
        }),
        None => Err(mismatch(op, t.shape(), &[0, 0])),
    }
}

fn softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &x) in out.iter_mut().zip(row) {
        *o = (x - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

fn log_softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
    for (o, &x) in out.iter_mut().zip(row) {
        *o = x - lse;
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `c[m,n] += a[m,k] * b[k,n]`
fn gemm(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += aip * bv;
            }
        }
    }
}

/// `c[m,k] += a[m,n] * b[k,n]^T`
fn gemm_bt(a: &[f64], b: &[f64], c: &mut [f64], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            c[i * k + p] += arow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `c[k,n] += a[m,k]^T * b[m,n]`
fn gemm_at(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += aip * bv;
            }
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape that never tracks gradients; used for sampling and evaluation.
    pub fn inference() -> Self {
        Self {
            no_grad: true,
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = !self.no_grad && inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf holding a copy of `tensor`.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let needs_grad = tensor.requires_grad && !self.no_grad;
        let mut value = tensor;
        value.grad = None;
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf for a constant (never differentiated).
    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    /// Leaf bound to a stored parameter. Repeated calls return the same var.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let var = self.leaf(store.get(id).clone());
        self.nodes[var.0].param = Some(id);
        self.params.insert(id, var);
        var
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = rows_cols("matmul", self.value(a))?;
        let (k2, n) = rows_cols("matmul", self.value(b))?;
        if k != k2 {
            return Err(mismatch("matmul", self.value(a).shape(), self.value(b).shape()));
        }
        let mut out = vec![0.0; m * n];
        gemm(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let t = Tensor::new(vec![m, n], out)?;
        Ok(self.push(t, Op::MatMul(a, b), &[a, b]))
    }

    fn zip_same(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch(name, ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same("add", a, b, |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same("sub", a, b, |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same("mul", a, b, |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b), &[a, b]))
    }

    /// Elementwise minimum; ties route the gradient to `a`.
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same("minimum", a, b, |x, y| if x <= y { x } else { y })?;
        Ok(self.push(t, Op::Minimum(a, b), &[a, b]))
    }

    fn row_broadcast(&self, name: &'static str, a: Var, v: Var) -> Result<(usize, usize)> {
        let (m, n) = rows_cols(name, self.value(a))?;
        if self.value(v).shape() != [n] {
            return Err(mismatch(name, self.value(a).shape(), self.value(v).shape()));
        }
        Ok((m, n))
    }

    /// `a[m,n] + b[n]` broadcast over rows.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (_, n) = self.row_broadcast("add_row", a, b)?;
        let bv = self.value(b).data();
        let data = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + bv[i % n])
            .collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(t, Op::AddRow(a, b), &[a, b]))
    }

    /// `a[m,n] * v[n]` broadcast over rows; equivalent to `a · diag(v)`.
    pub fn mul_row(&mut self, a: Var, v: Var) -> Result<Var> {
        let (_, n) = self.row_broadcast("mul_row", a, v)?;
        let vv = self.value(v).data();
        let data = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x * vv[i % n])
            .collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(t, Op::MulRow(a, v), &[a, v]))
    }

    /// Multiplies every element of `a` by the rank-0 tensor `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        if !self.value(s).is_scalar() {
            return Err(mismatch("scale_by", self.value(a).shape(), self.value(s).shape()));
        }
        let sv = self.value(s).item();
        let ta = self.value(a);
        let t = Tensor::new(ta.shape().to_vec(), ta.data().iter().map(|x| x * sv).collect())?;
        Ok(self.push(t, Op::ScaleBy(a, s), &[a, s]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let ta = self.value(a);
        let t = Tensor::new(ta.shape().to_vec(), ta.data().iter().map(|x| x * c).collect())?;
        Ok(self.push(t, Op::Scale(a, c), &[a]))
    }

    /// Elementwise product with a constant array.
    pub fn mul_const(&mut self, a: Var, c: Vec<f64>) -> Result<Var> {
        let ta = self.value(a);
        if c.len() != ta.numel() {
            return Err(mismatch("mul_const", ta.shape(), &[c.len()]));
        }
        let t = Tensor::new(
            ta.shape().to_vec(),
            ta.data().iter().zip(&c).map(|(x, y)| x * y).collect(),
        )?;
        Ok(self.push(t, Op::MulConst(a, c), &[a]))
    }

    /// Elementwise masking by a `{0,1}` array.
    pub fn mask(&mut self, a: Var, mask: Vec<f64>) -> Result<Var> {
        if let Some(bad) = mask.iter().find(|&&m| m != 0.0 && m != 1.0) {
            return Err(Error::InvalidArgument(format!("mask entry {bad} not in {{0,1}}")));
        }
        self.mul_const(a, mask)
    }

    /// Elementwise sum with a constant array.
    pub fn add_const(&mut self, a: Var, c: &[f64]) -> Result<Var> {
        let ta = self.value(a);
        if c.len() != ta.numel() {
            return Err(mismatch("add_const", ta.shape(), &[c.len()]));
        }
        let t = Tensor::new(
            ta.shape().to_vec(),
            ta.data().iter().zip(c).map(|(x, y)| x + y).collect(),
        )?;
        Ok(self.push(t, Op::AddConst(a), &[a]))
    }

    fn nonempty(&self, op: &'static str, a: Var) -> Result<()> {
        if self.value(a).numel() == 0 {
            return Err(Error::ZeroExtent {
                op,
                shape: self.value(a).shape().to_vec(),
            });
        }
        Ok(())
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.nonempty("sum", a)?;
        let s = self.value(a).data().iter().sum();
        Ok(self.push(Tensor::scalar(s), Op::Sum(a), &[a]))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.nonempty("mean", a)?;
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        Ok(self.push(Tensor::scalar(s), Op::Mean(a), &[a]))
    }

    /// `Σ w_i a_i` with constant weights.
    pub fn weighted_sum(&mut self, a: Var, w: Vec<f64>) -> Result<Var> {
        self.nonempty("weighted_sum", a)?;
        let t = self.value(a);
        if w.len() != t.numel() {
            return Err(mismatch("weighted_sum", t.shape(), &[w.len()]));
        }
        let s = t.data().iter().zip(&w).map(|(x, y)| x * y).sum();
        Ok(self.push(Tensor::scalar(s), Op::WeightedSum(a, w), &[a]))
    }

    /// L1 norm; the subgradient at zero is taken as zero.
    pub fn l1(&mut self, a: Var) -> Result<Var> {
        self.nonempty("l1", a)?;
        let s = self.value(a).data().iter().map(|x| x.abs()).sum();
        Ok(self.push(Tensor::scalar(s), Op::L1(a), &[a]))
    }

    /// `a[m,n] -> [m]` row sums.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = rows_cols("sum_rows", self.value(a))?;
        let d = self.value(a).data();
        let data = (0..m).map(|i| d[i * n..(i + 1) * n].iter().sum()).collect();
        Ok(self.push(Tensor::vector(data), Op::SumRows(a), &[a]))
    }

    fn rowwise(&mut self, name: &'static str, a: Var, f: fn(&[f64], &mut [f64])) -> Result<Tensor> {
        let (m, n) = rows_cols(name, self.value(a))?;
        let d = self.value(a).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            f(&d[i * n..(i + 1) * n], &mut out[i * n..(i + 1) * n]);
        }
        Tensor::new(vec![m, n], out)
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let t = self.rowwise("softmax", a, softmax_row)?;
        Ok(self.push(t, Op::Softmax(a), &[a]))
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let t = self.rowwise("log_softmax", a, log_softmax_row)?;
        Ok(self.push(t, Op::LogSoftmax(a), &[a]))
    }

    /// Mean next-token cross-entropy over rows whose target is `Some`.
    pub fn cross_entropy(&mut self, logits: Var, targets: Vec<Option<usize>>) -> Result<Var> {
        let (m, n) = rows_cols("cross_entropy", self.value(logits))?;
        if targets.len() != m {
            return Err(Error::LengthMismatch {
                what: "cross_entropy targets",
                expected: m,
                got: targets.len(),
            });
        }
        let d = self.value(logits).data();
        let mut probs = vec![0.0; m * n];
        let mut total = 0.0;
        let mut count = 0;
        for (i, t) in targets.iter().enumerate() {
            let Some(t) = *t else { continue };
            if t >= n {
                return Err(Error::TokenOutOfRange { token: t, vocab: n });
            }
            let row = &d[i * n..(i + 1) * n];
            let mut lsm = vec![0.0; n];
            log_softmax_row(row, &mut lsm);
            total -= lsm[t];
            for (p, l) in probs[i * n..(i + 1) * n].iter_mut().zip(&lsm) {
                *p = l.exp();
            }
            count += 1;
        }
        if count == 0 {
            return Err(Error::EmptyInput("cross_entropy has no target positions"));
        }
        let loss = Tensor::scalar(total / count as f64);
        Ok(self.push(
            loss,
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            },
            &[logits],
        ))
    }

    /// Row-wise layer normalization without affine parameters.
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let (m, n) = rows_cols("layer_norm", self.value(x))?;
        let d = self.value(x).data();
        let mut out = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        for i in 0..m {
            let row = &d[i * n..(i + 1) * n];
            let mu = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[i] = is;
            for (o, v) in out[i * n..(i + 1) * n].iter_mut().zip(row) {
                *o = (v - mu) * is;
            }
        }
        let t = Tensor::new(vec![m, n], out)?;
        Ok(self.push(t, Op::LayerNorm { x, inv_std }, &[x]))
    }

    /// Sigmoid-weighted linear unit `x·σ(x)`.
    pub fn silu(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let t = Tensor::new(
            ta.shape().to_vec(),
            ta.data().iter().map(|&x| x * sigmoid(x)).collect(),
        )?;
        Ok(self.push(t, Op::Silu(a), &[a]))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let t = Tensor::new(ta.shape().to_vec(), ta.data().iter().map(|x| x.exp()).collect())?;
        Ok(self.push(t, Op::Exp(a), &[a]))
    }

    /// Clamp into `[lo, hi]`; gradient passes only where `lo <= x <= hi`.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        if lo > hi {
            return Err(Error::InvalidArgument(format!("clamp bounds {lo} > {hi}")));
        }
        let ta = self.value(a);
        let t = Tensor::new(
            ta.shape().to_vec(),
            ta.data().iter().map(|x| x.clamp(lo, hi)).collect(),
        )?;
        Ok(self.push(t, Op::Clamp(a, lo, hi), &[a]))
    }

    /// Selects rows of `a[m,n]` by index (embedding lookup).
    pub fn gather_rows(&mut self, a: Var, rows: Vec<usize>) -> Result<Var> {
        let (m, n) = rows_cols("gather_rows", self.value(a))?;
        if rows.is_empty() {
            return Err(Error::EmptyInput("gather_rows indices"));
        }
        let d = self.value(a).data();
        let mut out = Vec::with_capacity(rows.len() * n);
        for &r in &rows {
            if r >= m {
                return Err(Error::TokenOutOfRange { token: r, vocab: m });
            }
            out.extend_from_slice(&d[r * n..(r + 1) * n]);
        }
        let t = Tensor::new(vec![rows.len(), n], out)?;
        Ok(self.push(t, Op::GatherRows(a, rows), &[a]))
    }

    /// `out[i] = a[i, cols[i]]`.
    pub fn pick_per_row(&mut self, a: Var, cols: Vec<usize>) -> Result<Var> {
        let (m, n) = rows_cols("pick_per_row", self.value(a))?;
        if cols.len() != m {
            return Err(Error::LengthMismatch {
                what: "pick_per_row columns",
                expected: m,
                got: cols.len(),
            });
        }
        let d = self.value(a).data();
        let mut out = Vec::with_capacity(m);
        for (i, &c) in cols.iter().enumerate() {
            if c >= n {
                return Err(Error::TokenOutOfRange { token: c, vocab: n });
            }
            out.push(d[i * n + c]);
        }
        Ok(self.push(Tensor::vector(out), Op::PickPerRow(a, cols), &[a]))
    }

    /// Multi-head causal self-attention on `batch` stacked sequences of
    /// length `seq`; `q`, `k`, `v` are `[batch*seq, d]` with `d` split
    /// evenly over `heads`. Scores are scaled by `1/sqrt(d/heads)`.
    pub fn causal_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        seq: usize,
        heads: usize,
    ) -> Result<Var> {
        let (rows, d) = rows_cols("causal_attention", self.value(q))?;
        for other in [k, v] {
            if self.value(other).shape() != self.value(q).shape() {
                return Err(mismatch(
                    "causal_attention",
                    self.value(q).shape(),
                    self.value(other).shape(),
                ));
            }
        }
        if rows != batch * seq || heads == 0 || d % heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "causal_attention: {rows}x{d} does not split into batch {batch}, seq {seq}, heads {heads}"
            )));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut out = vec![0.0; rows * d];
        let mut probs = vec![0.0; batch * heads * seq * seq];
        let mut scores = vec![0.0; seq];
        for b in 0..batch {
            for h in 0..heads {
                let pbase = (b * heads + h) * seq * seq;
                for i in 0..seq {
                    let qi = &qd[(b * seq + i) * d + h * dh..][..dh];
                    for (j, s) in scores.iter_mut().enumerate().take(i + 1) {
                        let kj = &kd[(b * seq + j) * d + h * dh..][..dh];
                        *s = scale * qi.iter().zip(kj).map(|(x, y)| x * y).sum::<f64>();
                    }
                    let prow = &mut probs[pbase + i * seq..pbase + i * seq + i + 1];
                    softmax_row(&scores[..=i], prow);
                    let orow = &mut out[(b * seq + i) * d + h * dh..][..dh];
                    for (j, &p) in prow.iter().enumerate() {
                        let vj = &vd[(b * seq + j) * d + h * dh..][..dh];
                        for (o, x) in orow.iter_mut().zip(vj) {
                            *o += p * x;
                        }
                    }
                }
            }
        }
        let t = Tensor::new(vec![rows, d], out)?;
        Ok(self.push(
            t,
            Op::CausalAttention {
                q,
                k,
                v,
                batch,
                seq,
                heads,
                probs,
            },
            &[q, k, v],
        ))
    }

    /// Reverse sweep from a rank-0 `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }

        let mut out = Gradients::default();
        for (idx, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.needs_grad {
                let g = grads[idx]
                    .take()
                    .unwrap_or_else(|| vec![0.0; node.value.numel()]);
                out.by_var.insert(Var(idx), g);
                if let Some(p) = node.param {
                    out.by_param.push((p, Var(idx)));
                }
            }
        }
        Ok(out)
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let needs = |v: Var| self.nodes[v.0].needs_grad;
        let val = |v: Var| &self.nodes[v.0].value;
        // Accumulates a contribution into the gradient slot of `v`.
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.numel()]);
            f(slot);
        };

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = val(*a).dims2().unwrap();
                let n = val(*b).dims2().unwrap().1;
                if needs(*a) {
                    let bd = val(*b).data();
                    acc(*a, &mut |s| gemm_bt(g, bd, s, m, n, k));
                }
                if needs(*b) {
                    let ad = val(*a).data();
                    acc(*b, &mut |s| gemm_at(ad, g, s, m, k, n));
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    acc(v, &mut |s| s.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                }
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                acc(*b, &mut |s| s.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (val(*a).data(), val(*b).data());
                acc(*a, &mut |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * bd[i];
                    }
                });
                acc(*b, &mut |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * ad[i];
                    }
                });
            }
            Op::Minimum(a, b) => {
                let (ad, bd) = (val(*a).data(), val(*b).data());
                acc(*a, &mut |s| {
                    for i in 0..s.len() {
                        if ad[i] <= bd[i] {
                            s[i] += g[i];
                        }
                    }
                });
                acc(*b, &mut |s| {
                    for i in 0..s.len() {
                        if ad[i] > bd[i] {
                            s[i] += g[i];
                        }
                    }
                });
            }
            Op::AddRow(a, b) => {
                let n = val(*b).numel();
                acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                acc(*b, &mut |s| {
                    for (i, gv) in g.iter().enumerate() {
                        s[i % n] += gv;
                    }
                });
            }
            Op::MulRow(a, v) => {
                let n = val(*v).numel();
                let (ad, vd) = (val(*a).data(), val(*v).data());
                acc(*a, &mut |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * vd[i % n];
                    }
                });
                acc(*v, &mut |s| {
                    for (i, gv) in g.iter().enumerate() {
                        s[i % n] += gv * ad[i];
                    }
                });
            }
            Op::ScaleBy(a, sc) => {
                let sv = val(*sc).item();
                let ad = val(*a).data();
                acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(x, y)| *x += y * sv));
                acc(*sc, &mut |s| {
                    s[0] += g.iter().zip(ad).map(|(x, y)| x * y).sum::<f64>();
                });
            }
            Op::Scale(a, c) => {
                acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(x, y)| *x += y * c));
            }
            Op::MulConst(a, c) => {
                acc(*a, &mut |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * c[i];
                    }
                });
            }
            Op::AddConst(a) => {
                acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(x, y)| *x += y));
            }
            Op::Sum(a) => {
                acc(*a, &mut |s| s.iter_mut().for_each(|x| *x += g[0]));
            }
            Op::Mean(a) => {
                let n = val(*a).numel() as f64;
                acc(*a, &mut |s| s.iter_mut().for_each(|x| *x += g[0] / n));
            }
            Op::WeightedSum(a, w) => {
                acc(*a, &mut |s| s.iter_mut().zip(w).for_each(|(x, wv)| *x += g[0] * wv));
            }
            Op::L1(a) => {
                let ad = val(*a).data();
                acc(*a, &mut |s| {
                    for i in 0..s.len() {
                        let sign = if ad[i] > 0.0 {
                            1.0
                        } else if ad[i] < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                        s[i] += g[0] * sign;
                    }
                });
            }
            Op::SumRows(a) => {
                let n = val(*a).dims2().unwrap().1;
                acc(*a, &mut |s| {
                    for (i, x) in s.iter_mut().enumerate() {
                        *x += g[i / n];
                    }
                });
            }
            Op::Softmax(a) => {
                let (m, n) = val(*a).dims2().unwrap();
                let y = node.value.data();
                acc(*a, &mut |s| {
                    for i in 0..m {
                        let r = i * n..(i + 1) * n;
                        let dot: f64 = g[r.clone()].iter().zip(&y[r.clone()]).map(|(a, b)| a * b).sum();
                        for j in r {
                            s[j] += y[j] * (g[j] - dot);
                        }
                    }
                });
            }
            Op::LogSoftmax(a) => {
                let (m, n) = val(*a).dims2().unwrap();
                let y = node.value.data();
                acc(*a, &mut |s| {
                    for i in 0..m {
                        let r = i * n..(i + 1) * n;
                        let gsum: f64 = g[r.clone()].iter().sum();
                        for j in r {
                            s[j] += g[j] - y[j].exp() * gsum;
                        }
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                let n = val(*logits).dims2().unwrap().1;
                let scale = g[0] / *count as f64;
                acc(*logits, &mut |s| {
                    for (i, t) in targets.iter().enumerate() {
                        let Some(t) = *t else { continue };
                        for j in 0..n {
                            s[i * n + j] += scale * probs[i * n + j];
                        }
                        s[i * n + t] -= scale;
                    }
                });
            }
            Op::LayerNorm { x, inv_std } => {
                let (m, n) = val(*x).dims2().unwrap();
                let y = node.value.data();
                acc(*x, &mut |s| {
                    for (i, &inv) in inv_std.iter().enumerate().take(m) {
                        let r = i * n..(i + 1) * n;
                        let gm = g[r.clone()].iter().sum::<f64>() / n as f64;
                        let gy = g[r.clone()].iter().zip(&y[r.clone()]).map(|(a, b)| a * b).sum::<f64>()
                            / n as f64;
                        for j in r {
                            s[j] += inv * (g[j] - gm - y[j] * gy);
                        }
                    }
                });
            }
            Op::Silu(a) => {
                let ad = val(*a).data();
                acc(*a, &mut |s| {
                    for i in 0..s.len() {
                        let sg = sigmoid(ad[i]);
                        s[i] += g[i] * sg * (1.0 + ad[i] * (1.0 - sg));
                    }
                });
            }
            Op::Exp(a) => {
                let y = node.value.data();
                acc(*a, &mut |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * y[i];
                    }
                });
            }
            Op::Clamp(a, lo, hi) => {
                let ad = val(*a).data();
                acc(*a, &mut |s| {
                    for i in 0..s.len() {
                        if ad[i] >= *lo && ad[i] <= *hi {
                            s[i] += g[i];
                        }
                    }
                });
            }
            Op::GatherRows(a, rows) => {
                let n = val(*a).dims2().unwrap().1;
                acc(*a, &mut |s| {
                    for (i, &r) in rows.iter().enumerate() {
                        for j in 0..n {
                            s[r * n + j] += g[i * n + j];
                        }
                    }
                });
            }
            Op::PickPerRow(a, cols) => {
                let n = val(*a).dims2().unwrap().1;
                acc(*a, &mut |s| {
                    for (i, &c) in cols.iter().enumerate() {
                        s[i * n + c] += g[i];
                    }
                });
            }
            Op::CausalAttention {
                q,
                k,
                v,
                batch,
                seq,
                heads,
                probs,
            } => {
                let (batch, seq, heads) = (*batch, *seq, *heads);
                let d = val(*q).dims2().unwrap().1;
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let (qd, kd, vd) = (val(*q).data(), val(*k).data(), val(*v).data());
                let rows = batch * seq;
                let mut dq = vec![0.0; rows * d];
                let mut dk = vec![0.0; rows * d];
                let mut dv = vec![0.0; rows * d];
                let mut dp = vec![0.0; seq];
                for b in 0..batch {
                    for h in 0..heads {
                        let pbase = (b * heads + h) * seq * seq;
                        for i in 0..seq {
                            let gi = &g[(b * seq + i) * d + h * dh..][..dh];
                            let prow = &probs[pbase + i * seq..pbase + i * seq + i + 1];
                            for (j, &p) in prow.iter().enumerate() {
                                let off = (b * seq + j) * d + h * dh;
                                let vj = &vd[off..off + dh];
                                dp[j] = gi.iter().zip(vj).map(|(x, y)| x * y).sum();
                                for (dvx, gx) in dv[off..off + dh].iter_mut().zip(gi) {
                                    *dvx += p * gx;
                                }
                            }
                            let dot: f64 = prow.iter().zip(&dp).map(|(p, x)| p * x).sum();
                            let qoff = (b * seq + i) * d + h * dh;
                            for (j, &p) in prow.iter().enumerate() {
                                let ds = p * (dp[j] - dot) * scale;
                                if ds == 0.0 {
                                    continue;
                                }
                                let koff = (b * seq + j) * d + h * dh;
                                for c in 0..dh {
                                    dq[qoff + c] += ds * kd[koff + c];
                                    dk[koff + c] += ds * qd[qoff + c];
                                }
                            }
                        }
                    }
                }
                for (var, buf) in [(*q, &dq), (*k, &dk), (*v, &dv)] {
                    acc(var, &mut |s| s.iter_mut().zip(buf.iter()).for_each(|(x, y)| *x += y));
                }
            }
        }
    }
}
