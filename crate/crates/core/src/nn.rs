//! Minimal dense reverse-mode autodiff over row-major `f64` tensors, plus
//! normalization with recalibratable statistics, SGD/Adam and checkpoints.
//!
//! A [`Tape`] records every op in creation order; since parents always precede
//! children, backward is a single reverse sweep.

use std::collections::HashMap;
use std::hash::Hash;
use std::io::{Read, Write};

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::seed::Rng;

#[derive(Debug, Error, PartialEq)]
pub enum NnError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("learning rate must be positive, got {0}")]
    LearningRate(f64),
    #[error("recalibration needs at least one batch")]
    EmptyBatches,
    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

type NnResult<T> = Result<T, NnError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> NnResult<Self> {
        if shape.iter().any(|&d| d == 0) || shape.iter().product::<usize>() != data.len() {
            return Err(NnError::Shape { op: "tensor", detail: format!("shape {shape:?} vs {} values", data.len()) });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        Self { shape: shape.to_vec(), data: vec![value; shape.iter().product()] }
    }

    pub fn scalar(value: f64) -> Self {
        Self { shape: vec![1], data: vec![value] }
    }

    /// Gaussian entries with the given standard deviation.
    pub fn randn(shape: &[usize], std: f64, rng: &mut Rng) -> Self {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                z * std
            })
            .collect();
        Self { shape: shape.to_vec(), data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape.get(1).copied().unwrap_or(1)
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn dot(&self, other: &Tensor) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    /// Rows `[start, end)` of a 2-D tensor.
    pub fn slice_rows(&self, start: usize, end: usize) -> Tensor {
        let c = self.cols();
        Tensor { shape: vec![end - start, c], data: self.data[start * c..end * c].to_vec() }
    }

    /// Selected rows of a 2-D tensor, in the given order.
    pub fn gather_rows(&self, rows: &[usize]) -> Tensor {
        let c = self.cols();
        let mut data = Vec::with_capacity(rows.len() * c);
        for &r in rows {
            data.extend_from_slice(&self.data[r * c..(r + 1) * c]);
        }
        Tensor { shape: vec![rows.len(), c], data }
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    fn add_assign(&mut self, other: &Tensor) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

fn check_finite(t: Tensor, op: &'static str) -> NnResult<Tensor> {
    if t.all_finite() {
        Ok(t)
    } else {
        Err(NnError::NonFinite(op))
    }
}

/// `c = a * b` for row-major matrices, where `a` is `m x k` (or its transpose
/// stored `k x m` when `trans_a`) and likewise for `b`.
fn gemm(m: usize, k: usize, n: usize, a: &[f64], trans_a: bool, b: &[f64], trans_b: bool, c: &mut [f64]) {
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices hold exactly m*k, k*n and m*n elements and the strides
    // describe row-major layouts of those matrices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub fn matmul(a: &Tensor, b: &Tensor) -> NnResult<Tensor> {
    if a.shape.len() != 2 || b.shape.len() != 2 || a.shape[1] != b.shape[0] {
        return Err(NnError::Shape { op: "matmul", detail: format!("{:?} x {:?}", a.shape, b.shape) });
    }
    let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
    let mut out = vec![0.0; m * n];
    gemm(m, k, n, &a.data, false, &b.data, false, &mut out);
    Ok(Tensor { shape: vec![m, n], data: out })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormMode {
    /// Batch statistics; running statistics follow with momentum.
    Train,
    /// Running statistics; nothing is mutated.
    Eval,
    /// Batch statistics; running statistics are replaced by the pooled
    /// moments of every batch seen since recalibration began.
    Recalibrate,
}

#[derive(Clone, Debug, PartialEq)]
struct Moments {
    count: f64,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Moments {
    fn new(channels: usize) -> Self {
        Self { count: 0.0, mean: vec![0.0; channels], m2: vec![0.0; channels] }
    }

    /// Chan et al. pairwise merge of a batch into the running moments.
    fn merge_batch(&mut self, x: &Tensor) {
        let (n, c) = (x.rows(), x.cols());
        let nb = n as f64;
        for j in 0..c {
            let mean_b = (0..n).map(|i| x.data[i * c + j]).sum::<f64>() / nb;
            let m2_b = (0..n).map(|i| (x.data[i * c + j] - mean_b).powi(2)).sum::<f64>();
            let total = self.count + nb;
            let delta = mean_b - self.mean[j];
            self.mean[j] += delta * nb / total;
            self.m2[j] += m2_b + delta * delta * self.count * nb / total;
        }
        self.count += nb;
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub mode: NormMode,
    #[serde(skip)]
    accumulator: Option<Moments>,
}

impl NormStats {
    pub fn new(channels: usize, momentum: f64) -> Self {
        Self {
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum,
            mode: NormMode::Train,
            accumulator: None,
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }

    pub fn set_mode(&mut self, mode: NormMode) {
        if mode == NormMode::Recalibrate {
            self.accumulator = Some(Moments::new(self.channels()));
        }
        self.mode = mode;
    }

    /// Copies the pooled moments into the running statistics and switches to
    /// eval mode. A no-op if no batch was seen.
    pub fn finish_recalibration(&mut self) {
        if let Some(acc) = self.accumulator.take() {
            if acc.count > 0.0 {
                self.running_mean = acc.mean;
                self.running_var = acc.m2.iter().map(|m| m / acc.count).collect();
            }
        }
        self.mode = NormMode::Eval;
    }

    fn observe(&mut self, x: &Tensor, batch_mean: &[f64], batch_var: &[f64]) {
        match self.mode {
            NormMode::Train => {
                let m = self.momentum;
                for j in 0..self.channels() {
                    self.running_mean[j] = (1.0 - m) * self.running_mean[j] + m * batch_mean[j];
                    self.running_var[j] = (1.0 - m) * self.running_var[j] + m * batch_var[j];
                }
            }
            NormMode::Recalibrate => {
                let c = self.channels();
                self.accumulator.get_or_insert_with(|| Moments::new(c)).merge_batch(x);
            }
            NormMode::Eval => {}
        }
    }
}

/// Replaces the running statistics by the pooled mean and (population)
/// variance of exactly the given batches.
pub fn recalibrate(stats: &NormStats, batches: &[Tensor]) -> NnResult<NormStats> {
    if batches.is_empty() {
        return Err(NnError::EmptyBatches);
    }
    let mut out = stats.clone();
    out.set_mode(NormMode::Recalibrate);
    for b in batches {
        if b.shape.len() != 2 || b.cols() != out.channels() {
            return Err(NnError::Shape { op: "recalibrate", detail: format!("{:?}", b.shape) });
        }
        let (mean, var) = batch_moments(b);
        out.observe(b, &mean, &var);
    }
    out.finish_recalibration();
    Ok(out)
}

fn batch_moments(x: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let (n, c) = (x.rows(), x.cols());
    let mut mean = vec![0.0; c];
    for i in 0..n {
        for j in 0..c {
            mean[j] += x.data[i * c + j];
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = vec![0.0; c];
    for i in 0..n {
        for j in 0..c {
            var[j] += (x.data[i * c + j] - mean[j]).powi(2);
        }
    }
    var.iter_mut().for_each(|v| *v /= n as f64);
    (mean, var)
}

pub const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct VarId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Affine { x: VarId, w: VarId, b: VarId },
    Relu(VarId),
    Tanh(VarId),
    Add(VarId, VarId),
    Sum(Vec<VarId>),
    Scale(VarId, f64),
    MeanOver { x: VarId, axes: Vec<usize> },
    Normalize { x: VarId, gamma: VarId, beta: VarId, xhat: Tensor, inv_std: Vec<f64>, batch_stats: bool },
    SoftmaxCrossEntropy { logits: VarId, labels: Vec<usize>, probs: Tensor },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradient of a scalar with respect to every node that requires one.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: VarId) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> VarId {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn value(&self, v: VarId) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> VarId {
        self.nodes.push(Node { value, op, requires_grad });
        VarId(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[VarId]) -> bool {
        ids.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// `x W + b` with `x: [n, in]`, `W: [in, out]`, `b: [out]`.
    pub fn affine(&mut self, x: VarId, w: VarId, b: VarId) -> NnResult<VarId> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        if xv.shape.len() != 2 || wv.shape.len() != 2 || xv.shape[1] != wv.shape[0] || bv.len() != wv.shape[1] {
            return Err(NnError::Shape {
                op: "affine",
                detail: format!("x {:?}, W {:?}, b {:?}", xv.shape, wv.shape, bv.shape),
            });
        }
        let mut out = matmul(xv, wv)?;
        let o = wv.shape[1];
        for row in out.data.chunks_mut(o) {
            for (v, bias) in row.iter_mut().zip(&bv.data) {
                *v += bias;
            }
        }
        let out = check_finite(out, "affine")?;
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(out, Op::Affine { x, w, b }, rg))
    }

    pub fn relu(&mut self, x: VarId) -> NnResult<VarId> {
        let out = self.value(x).map(|v| v.max(0.0));
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Relu(x), rg))
    }

    pub fn tanh(&mut self, x: VarId) -> NnResult<VarId> {
        let out = self.value(x).map(f64::tanh);
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Tanh(x), rg))
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> NnResult<VarId> {
        if self.value(a).shape != self.value(b).shape {
            return Err(NnError::Shape {
                op: "add",
                detail: format!("{:?} vs {:?}", self.value(a).shape, self.value(b).shape),
            });
        }
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let out = check_finite(out, "add")?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sum(&mut self, xs: &[VarId]) -> NnResult<VarId> {
        let first = xs.first().ok_or(NnError::Shape { op: "sum", detail: "no inputs".into() })?;
        let mut out = self.value(*first).clone();
        for &x in &xs[1..] {
            if self.value(x).shape != out.shape {
                return Err(NnError::Shape { op: "sum", detail: format!("{:?} vs {:?}", self.value(x).shape, out.shape) });
            }
            out.add_assign(self.value(x));
        }
        let out = check_finite(out, "sum")?;
        let rg = self.rg(xs);
        Ok(self.push(out, Op::Sum(xs.to_vec()), rg))
    }

    pub fn scale(&mut self, x: VarId, factor: f64) -> NnResult<VarId> {
        let out = check_finite(self.value(x).map(|v| v * factor), "scale")?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Scale(x, factor), rg))
    }

    /// Mean over the given axes; reduced axes are dropped (a full reduction
    /// yields shape `[1]`).
    pub fn mean_over(&mut self, x: VarId, axes: &[usize]) -> NnResult<VarId> {
        let xv = self.value(x);
        let rank = xv.shape.len();
        if axes.iter().any(|&a| a >= rank) {
            return Err(NnError::Shape { op: "mean_over", detail: format!("axes {axes:?} for rank {rank}") });
        }
        let (out_shape, count) = reduced_shape(&xv.shape, axes);
        let mut out = vec![0.0; out_shape.iter().product()];
        let strides = out_strides(&xv.shape, axes);
        for (i, v) in xv.data.iter().enumerate() {
            out[reduced_index(i, &xv.shape, &strides)] += v / count as f64;
        }
        let out = check_finite(Tensor { shape: out_shape, data: out }, "mean_over")?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::MeanOver { x, axes: axes.to_vec() }, rg))
    }

    /// Per-channel normalization of `x: [n, c]` followed by `gamma * xhat + beta`.
    /// Batch statistics are used in train and recalibrate modes.
    pub fn normalize(&mut self, x: VarId, gamma: VarId, beta: VarId, stats: &mut NormStats) -> NnResult<VarId> {
        let xv = self.value(x);
        let c = xv.cols();
        if xv.shape.len() != 2 || stats.channels() != c || self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(NnError::Shape { op: "normalize", detail: format!("x {:?}, {} channels", xv.shape, stats.channels()) });
        }
        let batch_stats = stats.mode != NormMode::Eval;
        let (mean, var) = if batch_stats {
            let (m, v) = batch_moments(xv);
            stats.observe(xv, &m, &v);
            (m, v)
        } else {
            (stats.running_mean.clone(), stats.running_var.clone())
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + NORM_EPS).sqrt()).collect();
        let xv = self.value(x);
        let mut xhat = xv.clone();
        for row in xhat.data.chunks_mut(c) {
            for j in 0..c {
                row[j] = (row[j] - mean[j]) * inv_std[j];
            }
        }
        let (g, b) = (self.value(gamma), self.value(beta));
        let mut out = xhat.clone();
        for row in out.data.chunks_mut(c) {
            for j in 0..c {
                row[j] = g.data[j] * row[j] + b.data[j];
            }
        }
        let out = check_finite(out, "normalize")?;
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(out, Op::Normalize { x, gamma, beta, xhat, inv_std, batch_stats }, rg))
    }

    /// Mean cross-entropy of `softmax(logits)` against integer labels.
    pub fn softmax_cross_entropy(&mut self, logits: VarId, labels: &[usize]) -> NnResult<VarId> {
        let lv = self.value(logits);
        let (n, c) = (lv.rows(), lv.cols());
        if lv.shape.len() != 2 || labels.len() != n {
            return Err(NnError::Shape { op: "softmax_cross_entropy", detail: format!("{:?} vs {} labels", lv.shape, labels.len()) });
        }
        if let Some(&label) = labels.iter().find(|&&y| y >= c) {
            return Err(NnError::Label { label, classes: c });
        }
        let mut probs = lv.clone();
        let mut loss = 0.0;
        for (row, &y) in probs.data.chunks_mut(c).zip(labels) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
            loss -= row[y].max(f64::MIN_POSITIVE).ln();
        }
        let out = check_finite(Tensor::scalar(loss / n as f64), "softmax_cross_entropy")?;
        let rg = self.rg(&[logits]);
        Ok(self.push(out, Op::SoftmaxCrossEntropy { logits, labels: labels.to_vec(), probs }, rg))
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, output: VarId) -> NnResult<Gradients> {
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        let out = &self.nodes[output.0].value;
        grads[output.0] = Some(Tensor::filled(&out.shape, 1.0));
        for id in (0..=output.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(upstream) = grads[id].take() else { continue };
            self.propagate(node, &upstream, &mut grads)?;
            grads[id] = Some(upstream);
        }
        for (g, node) in grads.iter_mut().zip(&self.nodes) {
            if !node.requires_grad {
                *g = None;
            } else if let Some(t) = g {
                if !t.all_finite() {
                    return Err(NnError::NonFinite("backward"));
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, up: &Tensor, grads: &mut [Option<Tensor>]) -> NnResult<()> {
        let mut acc = |v: VarId, g: Tensor| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Affine { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (n, i, o) = (xv.shape[0], xv.shape[1], wv.shape[1]);
                if self.nodes[x.0].requires_grad {
                    let mut dx = vec![0.0; n * i];
                    gemm(n, o, i, &up.data, false, &wv.data, true, &mut dx);
                    acc(*x, Tensor { shape: vec![n, i], data: dx });
                }
                if self.nodes[w.0].requires_grad {
                    let mut dw = vec![0.0; i * o];
                    gemm(i, n, o, &xv.data, true, &up.data, false, &mut dw);
                    acc(*w, Tensor { shape: vec![i, o], data: dw });
                }
                if self.nodes[b.0].requires_grad {
                    let mut db = vec![0.0; o];
                    for row in up.data.chunks(o) {
                        for (d, u) in db.iter_mut().zip(row) {
                            *d += u;
                        }
                    }
                    acc(*b, Tensor { shape: self.value(*b).shape.clone(), data: db });
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                let data = xv.data.iter().zip(&up.data).map(|(&v, &u)| if v > 0.0 { u } else { 0.0 }).collect();
                acc(*x, Tensor { shape: xv.shape.clone(), data });
            }
            Op::Tanh(x) => {
                let data = node.value.data.iter().zip(&up.data).map(|(&y, &u)| u * (1.0 - y * y)).collect();
                acc(*x, Tensor { shape: node.value.shape.clone(), data });
            }
            Op::Add(a, b) => {
                acc(*a, up.clone());
                acc(*b, up.clone());
            }
            Op::Sum(xs) => {
                for x in xs {
                    acc(*x, up.clone());
                }
            }
            Op::Scale(x, f) => acc(*x, up.map(|u| u * f)),
            Op::MeanOver { x, axes } => {
                let xv = self.value(*x);
                let (_, count) = reduced_shape(&xv.shape, axes);
                let strides = out_strides(&xv.shape, axes);
                let data = (0..xv.len()).map(|i| up.data[reduced_index(i, &xv.shape, &strides)] / count as f64).collect();
                acc(*x, Tensor { shape: xv.shape.clone(), data });
            }
            Op::Normalize { x, gamma, beta, xhat, inv_std, batch_stats } => {
                let c = xhat.cols();
                let n = xhat.rows();
                let g = self.value(*gamma);
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for (urow, xrow) in up.data.chunks(c).zip(xhat.data.chunks(c)) {
                    for j in 0..c {
                        dgamma[j] += urow[j] * xrow[j];
                        dbeta[j] += urow[j];
                    }
                }
                if self.nodes[x.0].requires_grad {
                    let mut dx = vec![0.0; n * c];
                    if *batch_stats {
                        // dx = inv_std/n * (n*dxhat - sum(dxhat) - xhat*sum(dxhat*xhat))
                        for j in 0..c {
                            let gj = g.data[j];
                            let sum_d = dbeta[j] * gj;
                            let sum_dx = dgamma[j] * gj;
                            for i in 0..n {
                                let dxhat = up.data[i * c + j] * gj;
                                dx[i * c + j] = inv_std[j] / n as f64
                                    * (n as f64 * dxhat - sum_d - xhat.data[i * c + j] * sum_dx);
                            }
                        }
                    } else {
                        for i in 0..n {
                            for j in 0..c {
                                dx[i * c + j] = up.data[i * c + j] * g.data[j] * inv_std[j];
                            }
                        }
                    }
                    acc(*x, Tensor { shape: vec![n, c], data: dx });
                }
                acc(*gamma, Tensor { shape: g.shape.clone(), data: dgamma });
                acc(*beta, Tensor { shape: self.value(*beta).shape.clone(), data: dbeta });
            }
            Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                let n = probs.rows();
                let c = probs.cols();
                let scale = up.item() / n as f64;
                let mut d = probs.clone();
                for (row, &y) in d.data.chunks_mut(c).zip(labels) {
                    row[y] -= 1.0;
                    for v in row.iter_mut() {
                        *v *= scale;
                    }
                }
                acc(*logits, d);
            }
        }
        Ok(())
    }
}

fn reduced_shape(shape: &[usize], axes: &[usize]) -> (Vec<usize>, usize) {
    let mut out = Vec::new();
    let mut count = 1;
    for (d, &s) in shape.iter().enumerate() {
        if axes.contains(&d) {
            count *= s;
        } else {
            out.push(s);
        }
    }
    if out.is_empty() {
        out.push(1);
    }
    (out, count)
}

/// Stride of each input axis in the reduced output (0 for reduced axes).
fn out_strides(shape: &[usize], axes: &[usize]) -> Vec<usize> {
    let mut strides = vec![0; shape.len()];
    let mut s = 1;
    for d in (0..shape.len()).rev() {
        if !axes.contains(&d) {
            strides[d] = s;
            s *= shape[d];
        }
    }
    strides
}

fn reduced_index(mut flat: usize, shape: &[usize], strides: &[usize]) -> usize {
    let mut idx = 0;
    for d in (0..shape.len()).rev() {
        idx += (flat % shape[d]) * strides[d];
        flat /= shape[d];
    }
    idx
}

/// SGD with optional (Nesterov) momentum and L2 weight decay, with state per
/// parameter key.
#[derive(Debug, Clone)]
pub struct Sgd<K> {
    lr: f64,
    pub momentum: f64,
    pub nesterov: bool,
    pub weight_decay: f64,
    buffers: HashMap<K, Vec<f64>>,
}

impl<K: Hash + Eq + Clone> Sgd<K> {
    pub fn new(lr: f64, momentum: f64, nesterov: bool, weight_decay: f64) -> NnResult<Self> {
        check_lr(lr)?;
        Ok(Self { lr, momentum, nesterov, weight_decay, buffers: HashMap::new() })
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn set_lr(&mut self, lr: f64) -> NnResult<()> {
        check_lr(lr)?;
        self.lr = lr;
        Ok(())
    }

    pub fn forget(&mut self, key: &K) {
        self.buffers.remove(key);
    }

    pub fn retain(&mut self, keep: impl Fn(&K) -> bool) {
        self.buffers.retain(|k, _| keep(k));
    }

    pub fn state_len(&self) -> usize {
        self.buffers.len()
    }

    pub fn step(&mut self, key: &K, param: &mut Tensor, grad: &Tensor) -> NnResult<()> {
        if param.shape != grad.shape {
            return Err(NnError::Shape { op: "sgd_step", detail: format!("{:?} vs {:?}", param.shape, grad.shape) });
        }
        let d: Vec<f64> = param.data.iter().zip(&grad.data).map(|(p, g)| g + self.weight_decay * p).collect();
        let update = if self.momentum > 0.0 {
            let buf = match self.buffers.get_mut(key) {
                Some(buf) => {
                    for (b, di) in buf.iter_mut().zip(&d) {
                        *b = self.momentum * *b + di;
                    }
                    buf
                }
                None => self.buffers.entry(key.clone()).or_insert_with(|| d.clone()),
            };
            if self.nesterov {
                d.iter().zip(buf.iter()).map(|(di, b)| di + self.momentum * b).collect()
            } else {
                buf.clone()
            }
        } else {
            d
        };
        for (p, u) in param.data.iter_mut().zip(&update) {
            *p -= self.lr * u;
        }
        if !param.all_finite() {
            return Err(NnError::NonFinite("sgd_step"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

#[derive(Debug, Clone)]
pub struct Adam<K> {
    lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    state: HashMap<K, AdamState>,
}

impl<K: Hash + Eq + Clone> Adam<K> {
    pub fn new(lr: f64, betas: (f64, f64), eps: f64) -> NnResult<Self> {
        check_lr(lr)?;
        Ok(Self { lr, beta1: betas.0, beta2: betas.1, eps, state: HashMap::new() })
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn forget(&mut self, key: &K) {
        self.state.remove(key);
    }

    pub fn step(&mut self, key: &K, param: &mut [f64], grad: &[f64]) -> NnResult<()> {
        if param.len() != grad.len() {
            return Err(NnError::Shape { op: "adam_step", detail: format!("{} vs {}", param.len(), grad.len()) });
        }
        let st = self
            .state
            .entry(key.clone())
            .or_insert_with(|| AdamState { m: vec![0.0; grad.len()], v: vec![0.0; grad.len()], t: 0 });
        st.t += 1;
        let bc1 = 1.0 - self.beta1.powi(st.t);
        let bc2 = 1.0 - self.beta2.powi(st.t);
        for i in 0..param.len() {
            st.m[i] = self.beta1 * st.m[i] + (1.0 - self.beta1) * grad[i];
            st.v[i] = self.beta2 * st.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let m_hat = st.m[i] / bc1;
            let v_hat = st.v[i] / bc2;
            param[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        if param.iter().any(|p| !p.is_finite()) {
            return Err(NnError::NonFinite("adam_step"));
        }
        Ok(())
    }
}

fn check_lr(lr: f64) -> NnResult<()> {
    if lr > 0.0 && lr.is_finite() {
        Ok(())
    } else {
        Err(NnError::LearningRate(lr))
    }
}

/// Linear warm-up to `base` over `warmup` steps, then cosine decay to 0.
pub fn cosine_lr(step: usize, total: usize, warmup: usize, base: f64) -> f64 {
    if step < warmup {
        return base * (step + 1) as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup).max(1);
    let t = ((step - warmup) as f64 / span as f64).min(1.0);
    // keep strictly positive so the optimizer never sees lr = 0
    (base * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())).max(base * 1e-6)
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"NSECKPT1";

#[derive(Serialize, Deserialize)]
struct Manifest {
    tensors: Vec<ManifestEntry>,
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
}

/// Layout: 8-byte magic, little-endian `u64` manifest length, the JSON shape
/// manifest, then every tensor's values as little-endian `f64` in order.
pub fn write_checkpoint<W: Write>(mut w: W, tensors: &[(String, &Tensor)]) -> NnResult<()> {
    let manifest = Manifest {
        tensors: tensors.iter().map(|(n, t)| ManifestEntry { name: n.clone(), shape: t.shape.clone() }).collect(),
    };
    let json = serde_json::to_vec(&manifest).map_err(|e| NnError::Checkpoint(e.to_string()))?;
    let io = |e: std::io::Error| NnError::Checkpoint(e.to_string());
    w.write_all(CHECKPOINT_MAGIC).map_err(io)?;
    w.write_all(&(json.len() as u64).to_le_bytes()).map_err(io)?;
    w.write_all(&json).map_err(io)?;
    for (_, t) in tensors {
        for v in &t.data {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> NnResult<Vec<(String, Tensor)>> {
    let io = |e: std::io::Error| NnError::Checkpoint(e.to_string());
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(NnError::Checkpoint("bad magic".into()));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len).map_err(io)?;
    let mut json = vec![0u8; u64::from_le_bytes(len) as usize];
    r.read_exact(&mut json).map_err(io)?;
    let manifest: Manifest = serde_json::from_slice(&json).map_err(|e| NnError::Checkpoint(e.to_string()))?;
    let mut out = Vec::with_capacity(manifest.tensors.len());
    for entry in manifest.tensors {
        let n: usize = entry.shape.iter().product();
        let mut data = Vec::with_capacity(n);
        let mut buf = [0u8; 8];
        for _ in 0..n {
            r.read_exact(&mut buf).map_err(io)?;
            data.push(f64::from_le_bytes(buf));
        }
        out.push((entry.name, Tensor::new(entry.shape, data)?));
    }
    Ok(out)
}

/// Hex SHA-256 of the checkpoint encoding.
pub fn checkpoint_hash(tensors: &[(String, &Tensor)]) -> String {
    let mut bytes = Vec::new();
    write_checkpoint(&mut bytes, tensors).expect("writing to memory cannot fail");
    Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
}
