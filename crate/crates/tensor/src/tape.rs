//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every op appends a node whose inputs are earlier nodes, so the tape is in
//! topological order by construction and `backward` is a single reverse sweep.

use std::sync::Arc;

use rand::Rng;

use crate::error::{Result, TensorError};
use crate::gemm;
use crate::params::{ParamId, ParamStore};
use crate::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Embedding { table: ParamId, ids: Vec<usize> },
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Softmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Gelu { x: Var, tanh: Vec<f64> },
    Sigmoid(Var),
    MeanRows { x: Var, mask: Vec<bool>, count: usize },
    Concat { parts: Vec<Var>, axis: usize },
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    Sum(Var),
    Reshape(Var),
    CrossEntropy { logits: Var, target: usize, probs: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

/// Computation tape. Not shareable across threads while recording; build one
/// per forward pass.
#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    track_params: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    /// A tape whose parameter reads are differentiable.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            track_params: true,
        }
    }

    /// A tape that treats parameters as constants (forward-only evaluation).
    pub fn inference() -> Self {
        Self {
            nodes: Vec::new(),
            track_params: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.push_arc(Arc::new(value), op, requires_grad)
    }

    fn push_arc(&mut self, value: Arc<Tensor>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        self.value(v)
            .dims2()
            .expect("tape values are always rank <= 2")
    }

    /// Differentiable input (gradient is recorded for it).
    pub fn leaf(&mut self, value: Tensor) -> Result<Var> {
        value.dims2()?;
        Ok(self.push(value, Op::Leaf, true))
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        value.dims2()?;
        Ok(self.push(value, Op::Leaf, false))
    }

    /// Reads a parameter. Shares storage with the store; no copy is made.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let value = store.value_arc(id);
        let rg = self.track_params;
        self.push_arc(value, Op::Param(id), rg)
    }

    /// Gathers rows `ids` of a `[vocab, d]` table parameter.
    pub fn embedding(&mut self, store: &ParamStore, table: ParamId, ids: &[usize]) -> Result<Var> {
        let t = store.value(table);
        let (vocab, d) = t.dims2()?;
        if ids.is_empty() {
            return Err(TensorError::InvalidShape(vec![0, d]));
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            if i >= vocab {
                return Err(TensorError::IndexOutOfRange {
                    op: "embedding",
                    index: i,
                    len: vocab,
                });
            }
            data.extend_from_slice(t.row(i));
        }
        let value = Tensor::new(&[ids.len(), d], data)?;
        let rg = self.track_params;
        Ok(self.push(
            value,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(TensorError::MatmulShape {
                left: self.value(a).shape().to_vec(),
                right: self.value(b).shape().to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        gemm::gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            &mut out,
            0.0,
        );
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).transpose()?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Transpose(x), rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(usize, usize)> {
        let (da, db) = (self.dims(a), self.dims(b));
        if da != db {
            return Err(TensorError::ShapeMismatch {
                op,
                left: self.value(a).shape().to_vec(),
                right: self.value(b).shape().to_vec(),
            });
        }
        Ok(da)
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let (r, c) = self.same_shape(op_name(&op), a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(&[r, c], data)?, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// Adds a `[1, n]` row (bias) to every row of `a`. The only broadcast
    /// supported.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (r, c) = self.dims(a);
        let (br, bc) = self.dims(row);
        if br != 1 || bc != c {
            return Err(TensorError::ShapeMismatch {
                op: "add_row",
                left: self.value(a).shape().to_vec(),
                right: self.value(row).shape().to_vec(),
            });
        }
        let bias = self.value(row).data();
        let mut data = self.value(a).data().to_vec();
        for chunk in data.chunks_exact_mut(c) {
            for (v, b) in chunk.iter_mut().zip(bias) {
                *v += b;
            }
        }
        let rg = self.rg(&[a, row]);
        Ok(self.push(Tensor::new(&[r, c], data)?, Op::AddRow(a, row), rg))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let (r, c) = self.dims(x);
        let data = self.value(x).data().iter().map(|v| v * s).collect();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(&[r, c], data)?, Op::Scale(x, s), rg))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims(x);
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_exact_mut(c) {
            softmax_in_place(row);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(&[r, c], data)?, Op::Softmax(x), rg))
    }

    /// Row-wise softmax where columns with `keep[j] == false` get probability
    /// exactly zero (equivalent to a `-inf` logit).
    pub fn masked_softmax_rows(&mut self, x: Var, keep: &[bool]) -> Result<Var> {
        let (_, c) = self.dims(x);
        if keep.len() != c {
            return Err(TensorError::MaskLength {
                op: "masked_softmax_rows",
                mask: keep.len(),
                len: c,
            });
        }
        if keep.iter().all(|&k| k) {
            return self.softmax_rows(x);
        }
        if !keep.iter().any(|&k| k) {
            return Err(TensorError::FullyMasked {
                op: "masked_softmax_rows",
            });
        }
        let mut penalty = vec![0.0; c];
        for (p, &k) in penalty.iter_mut().zip(keep) {
            if !k {
                *p = f64::NEG_INFINITY;
            }
        }
        let penalty = self.constant(Tensor::new(&[1, c], penalty)?)?;
        let logits = self.add_row(x, penalty)?;
        self.softmax_rows(logits)
    }

    /// Per-row layer normalization with learned gain and bias (`[1, d]`).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (r, c) = self.dims(x);
        for p in [gamma, beta] {
            if self.dims(p) != (1, c) {
                return Err(TensorError::ShapeMismatch {
                    op: "layer_norm",
                    left: self.value(x).shape().to_vec(),
                    right: self.value(p).shape().to_vec(),
                });
            }
        }
        let xs = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; r * c];
        let mut inv_std = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &xs[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            inv_std[i] = inv;
            for j in 0..c {
                let h = (row[j] - mean) * inv;
                xhat[i * c + j] = h;
                out[i * c + j] = h * g[j] + b[j];
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            Tensor::new(&[r, c], out)?,
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

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims(x);
        let xs = self.value(x).data();
        let tanh: Vec<f64> = xs
            .iter()
            .map(|&v| fast_tanh(GELU_C * (v + 0.044715 * v * v * v)))
            .collect();
        let data = xs.iter().zip(&tanh).map(|(&v, &t)| 0.5 * v * (1.0 + t)).collect();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(&[r, c], data)?, Op::Gelu { x, tanh }, rg))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims(x);
        let data = self.value(x).data().iter().map(|&v| sigmoid(v)).collect();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(&[r, c], data)?, Op::Sigmoid(x), rg))
    }

    /// Mean over the rows where `keep` is true, giving `[1, cols]`.
    pub fn mean_rows(&mut self, x: Var, keep: &[bool]) -> Result<Var> {
        let (r, c) = self.dims(x);
        if keep.len() != r {
            return Err(TensorError::MaskLength {
                op: "mean_rows",
                mask: keep.len(),
                len: r,
            });
        }
        let count = keep.iter().filter(|&&k| k).count();
        if count == 0 {
            return Err(TensorError::FullyMasked { op: "mean_rows" });
        }
        let xs = self.value(x).data();
        let mut out = vec![0.0; c];
        for (i, _) in keep.iter().enumerate().filter(|(_, &k)| k) {
            for (o, v) in out.iter_mut().zip(&xs[i * c..(i + 1) * c]) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|o| *o /= count as f64);
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::new(&[1, c], out)?,
            Op::MeanRows {
                x,
                mask: keep.to_vec(),
                count,
            },
            rg,
        ))
    }

    /// Concatenates along `axis` 0 (rows) or 1 (columns).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        assert!(axis < 2, "concat axis must be 0 or 1");
        let first = *parts.first().ok_or(TensorError::InvalidShape(vec![0]))?;
        let (r0, c0) = self.dims(first);
        for &p in parts {
            let (r, c) = self.dims(p);
            if (axis == 0 && c != c0) || (axis == 1 && r != r0) {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    left: self.value(first).shape().to_vec(),
                    right: self.value(p).shape().to_vec(),
                });
            }
        }
        let (shape, data) = if axis == 0 {
            let rows: usize = parts.iter().map(|&p| self.dims(p).0).sum();
            let mut data = Vec::with_capacity(rows * c0);
            for &p in parts {
                data.extend_from_slice(self.value(p).data());
            }
            ([rows, c0], data)
        } else {
            let cols: usize = parts.iter().map(|&p| self.dims(p).1).sum();
            let mut data = Vec::with_capacity(r0 * cols);
            for i in 0..r0 {
                for &p in parts {
                    data.extend_from_slice(self.value(p).row(i));
                }
            }
            ([r0, cols], data)
        };
        let rg = self.rg(parts);
        Ok(self.push(
            Tensor::new(&shape, data)?,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Rows `start..end`.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.dims(x);
        if start >= end || end > r {
            return Err(TensorError::IndexOutOfRange {
                op: "slice_rows",
                index: end,
                len: r,
            });
        }
        let data = self.value(x).data()[start * c..end * c].to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::new(&[end - start, c], data)?,
            Op::SliceRows { x, start },
            rg,
        ))
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.dims(x);
        if start >= end || end > c {
            return Err(TensorError::IndexOutOfRange {
                op: "slice_cols",
                index: end,
                len: c,
            });
        }
        let xs = self.value(x);
        let mut data = Vec::with_capacity(r * (end - start));
        for i in 0..r {
            data.extend_from_slice(&xs.row(i)[start..end]);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::new(&[r, end - start], data)?,
            Op::SliceCols { x, start },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::scalar(s), Op::Sum(x), rg))
    }

    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Result<Var> {
        let t = self.value(x).reshape(&[rows, cols])?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    /// `-log softmax(logits)[target]` for a `[1, n]` logit row.
    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var> {
        let (r, n) = self.dims(logits);
        if r != 1 {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy",
                left: self.value(logits).shape().to_vec(),
                right: vec![1, n],
            });
        }
        if target >= n {
            return Err(TensorError::IndexOutOfRange {
                op: "cross_entropy",
                index: target,
                len: n,
            });
        }
        let l = self.value(logits).data();
        let max = l.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + l.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let loss = lse - l[target];
        let probs = l.iter().map(|v| (v - lse).exp()).collect();
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                target,
                probs,
            },
            rg,
        ))
    }

    /// Inverted dropout. A no-op when `rate == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, rng: &mut R) -> Result<Var> {
        if rate <= 0.0 {
            return Ok(x);
        }
        let (r, c) = self.dims(x);
        let keep = 1.0 - rate;
        let mask = (0..r * c)
            .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let mask = self.constant(Tensor::new(&[r, c], mask)?)?;
        self.mul(x, mask)
    }

    /// Back-propagates from a scalar `loss`. Gradients accumulate into every
    /// differentiable node across repeated calls.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lt = self.value(loss);
        if !lt.is_scalar() {
            return Err(TensorError::NonScalarLoss(lt.shape().to_vec()));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut grads);
            let node = &mut self.nodes[i];
            match &mut node.grad {
                Some(acc) => acc
                    .data_mut()
                    .iter_mut()
                    .zip(&g)
                    .for_each(|(a, b)| *a += b),
                None => node.grad = Some(Tensor::new(node.value.shape(), g)?),
            }
        }
        Ok(())
    }

    /// Gradient accumulator of `v`, zero-filled on first use; `None` when
    /// `v` does not require a gradient.
    fn grad_slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let n = self.value(v).numel();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let (r, c) = self.dims(Var(i));
        let mut send = |v: Var, delta: Vec<f64>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => acc.iter_mut().zip(&delta).for_each(|(a, b)| *a += b),
                slot @ None => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Leaf | Op::Param(_) | Op::Embedding { .. } => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims(*a);
                let n = c;
                if self.nodes[a.0].requires_grad {
                    let mut da = vec![0.0; m * k];
                    gemm::gemm(m, n, k, g, false, self.value(*b).data(), true, &mut da, 0.0);
                    send(*a, da);
                }
                if self.nodes[b.0].requires_grad {
                    let mut db = vec![0.0; k * n];
                    gemm::gemm(k, m, n, self.value(*a).data(), true, g, false, &mut db, 0.0);
                    send(*b, db);
                }
            }
            Op::Transpose(x) => {
                let mut dx = vec![0.0; r * c];
                for a in 0..r {
                    for b in 0..c {
                        dx[b * r + a] = g[a * c + b];
                    }
                }
                send(*x, dx);
            }
            Op::Add(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.iter().map(|v| -v).collect());
            }
            Op::AddRow(a, row) => {
                send(*a, g.to_vec());
                let mut db = vec![0.0; c];
                for chunk in g.chunks_exact(c) {
                    db.iter_mut().zip(chunk).for_each(|(d, v)| *d += v);
                }
                send(*row, db);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                send(*a, g.iter().zip(bv).map(|(g, y)| g * y).collect());
                send(*b, g.iter().zip(av).map(|(g, x)| g * x).collect());
            }
            Op::Scale(x, s) => send(*x, g.iter().map(|v| v * s).collect()),
            Op::Softmax(x) => {
                let y = node.value.data();
                let mut dx = vec![0.0; r * c];
                for ((dr, yr), gr) in dx
                    .chunks_exact_mut(c)
                    .zip(y.chunks_exact(c))
                    .zip(g.chunks_exact(c))
                {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        dr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                send(*x, dx);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let gam = self.value(*gamma).data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    let gr = &g[i * c..(i + 1) * c];
                    let hr = &xhat[i * c..(i + 1) * c];
                    let mut sum_dh = 0.0;
                    let mut sum_dh_h = 0.0;
                    for j in 0..c {
                        dgamma[j] += gr[j] * hr[j];
                        dbeta[j] += gr[j];
                        let dh = gr[j] * gam[j];
                        sum_dh += dh;
                        sum_dh_h += dh * hr[j];
                    }
                    let n = c as f64;
                    for j in 0..c {
                        let dh = gr[j] * gam[j];
                        dx[i * c + j] = inv_std[i] / n * (n * dh - sum_dh - hr[j] * sum_dh_h);
                    }
                }
                send(*x, dx);
                send(*gamma, dgamma);
                send(*beta, dbeta);
            }
            Op::Gelu { x, tanh } => {
                let xs = self.value(*x).data();
                send(
                    *x,
                    xs.iter()
                        .zip(tanh)
                        .zip(g)
                        .map(|((&v, &t), &g)| {
                            let dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * v * v);
                            g * (0.5 * (1.0 + t) + 0.5 * v * dt)
                        })
                        .collect(),
                );
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                send(*x, y.iter().zip(g).map(|(y, g)| g * y * (1.0 - y)).collect());
            }
            Op::MeanRows { x, mask, count } => {
                let mut dx = vec![0.0; mask.len() * c];
                let scale = 1.0 / *count as f64;
                for (i, _) in mask.iter().enumerate().filter(|(_, &k)| k) {
                    for j in 0..c {
                        dx[i * c + j] = g[j] * scale;
                    }
                }
                send(*x, dx);
            }
            Op::Concat { parts, axis } => {
                let mut offset = 0;
                for &p in parts {
                    let (pr, pc) = self.dims(p);
                    let mut dp = Vec::with_capacity(pr * pc);
                    if *axis == 0 {
                        dp.extend_from_slice(&g[offset * c..(offset + pr) * c]);
                        offset += pr;
                    } else {
                        for row in 0..r {
                            dp.extend_from_slice(&g[row * c + offset..row * c + offset + pc]);
                        }
                        offset += pc;
                    }
                    send(p, dp);
                }
            }
            Op::SliceRows { x, start } => {
                if let Some(acc) = self.grad_slot(grads, *x) {
                    let xc = c;
                    acc[start * xc..(start + r) * xc]
                        .iter_mut()
                        .zip(g)
                        .for_each(|(a, b)| *a += b);
                }
            }
            Op::SliceCols { x, start } => {
                let xc = self.dims(*x).1;
                if let Some(acc) = self.grad_slot(grads, *x) {
                    for row in 0..r {
                        acc[row * xc + start..row * xc + start + c]
                            .iter_mut()
                            .zip(&g[row * c..(row + 1) * c])
                            .for_each(|(a, b)| *a += b);
                    }
                }
            }
            Op::Sum(x) => {
                let n = self.value(*x).numel();
                send(*x, vec![g[0]; n]);
            }
            Op::Reshape(x) => send(*x, g.to_vec()),
            Op::CrossEntropy {
                logits,
                target,
                probs,
            } => {
                let mut dl: Vec<f64> = probs.iter().map(|p| p * g[0]).collect();
                dl[*target] -= g[0];
                send(*logits, dl);
            }
        }
    }

    /// Adds the gradients recorded for parameter reads into `store`.
    ///
    /// Call once per tape after `backward`; calling twice double-counts.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore) {
        for node in &self.nodes {
            let Some(g) = &node.grad else { continue };
            match &node.op {
                Op::Param(id) => store.accumulate_grad(*id, g.data()),
                Op::Embedding { table, ids } => store.accumulate_rows(*table, ids, g.data()),
                _ => {}
            }
        }
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        _ => "op",
    }
}

/// `tanh` through a single `exp`, which is several times cheaper than the
/// libm routine. Absolute error stays within a few ulps of 1.
fn fast_tanh(u: f64) -> f64 {
    if u.abs() < 1e-3 {
        // Avoid cancellation near zero.
        let u2 = u * u;
        return u * (1.0 - u2 / 3.0 + 2.0 * u2 * u2 / 15.0);
    }
    let e = (2.0 * u).exp();
    1.0 - 2.0 / (e + 1.0)
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Stable in-place softmax. `-inf` entries become exactly zero.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = 1.0 / sum;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn sum_gives_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2, 3], &[1., -2., 3., 0.5, 9., -1.])).unwrap();
        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn dot_self_gives_twice_x() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1, 2], &[1., 2.])).unwrap();
        let xx = tape.mul(x, x).unwrap();
        let s = tape.sum(xx).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1, 2], &[1., 2.])).unwrap();
        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 2.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1, 2], &[1., 2.])).unwrap();
        assert!(matches!(
            tape.backward(x),
            Err(TensorError::NonScalarLoss(_))
        ));
    }

    #[test]
    fn softmax_uniform_and_stable() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2, 3], &[0., 0., 0., 1000., 0., -1000.])).unwrap();
        let y = tape.softmax_rows(x).unwrap();
        let y = tape.value(y).data();
        for v in &y[..3] {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        assert_eq!(y[3], 1.0);
        assert!(y[4] >= 0.0 && y[4] < 1e-300);
        assert!(y.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn masked_softmax_zeroes_masked_columns() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 3], &[5.0, 1.0, 1.0])).unwrap();
        let y = tape.masked_softmax_rows(x, &[false, true, true]).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.5, 0.5]);
        assert!(tape.masked_softmax_rows(x, &[false; 3]).is_err());
    }

    #[test]
    fn cross_entropy_uniform_is_log_n() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1, 4], &[0.3; 4])).unwrap();
        let l = tape.cross_entropy(x, 2).unwrap();
        assert!((tape.value(l).item() - 4f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn constants_receive_no_grad() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[1, 2], &[1., 2.])).unwrap();
        let b = tape.constant(t(&[1, 2], &[3., 4.])).unwrap();
        let p = tape.mul(a, b).unwrap();
        let s = tape.sum(p).unwrap();
        tape.backward(s).unwrap();
        assert!(tape.grad(b).is_none());
        assert_eq!(tape.grad(a).unwrap().data(), &[3.0, 4.0]);
    }

    #[test]
    fn inference_tape_skips_params() {
        let mut store = ParamStore::new();
        let w = store.insert("w", t(&[1, 2], &[1., 1.])).unwrap();
        let mut tape = Tape::inference();
        let v = tape.param(&store, w);
        let s = tape.sum(v).unwrap();
        tape.backward(s).unwrap();
        tape.accumulate_param_grads(&mut store);
        assert!(store.grad(w).is_none());
    }
}
