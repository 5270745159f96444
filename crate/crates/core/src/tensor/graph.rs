use std::sync::Arc;

use super::kernels::{gemm, matmul_into};
use super::{sigmoid, Tensor};
use crate::error::{Error, Result};

use super::RMS_EPS;

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// One cell of an expanded gate matrix (see [`Graph::expand_gate`]).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GateCell {
    Zero,
    One,
    /// Takes the gate value of the cell's column token.
    Gate,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    AddConst(Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sigmoid(Var),
    Silu(Var),
    Abs(Var),
    RmsNorm { x: Var, w: Var, inv_rms: Vec<f64> },
    Softmax(Var),
    Gather { table: Var, ids: Vec<usize> },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<f64> },
    Sum(Var),
    Mean(Var),
    ConcatCols(Vec<Var>),
    SliceCols { src: Var, start: usize },
    StraightThrough(Var),
    ExpandGate { gate: Var, head: usize, cells: Arc<[GateCell]> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

/// Define-by-run tape. Node order is a valid topological order, so the
/// backward pass is a single reverse sweep.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<f64>> {
        self.nodes[v.0].grad.take()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(op, ta, tb));
        }
        Ok(())
    }

    fn map(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let t = self.value(a);
        let data = t.data().iter().map(|&x| f(x)).collect();
        let value = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        self.push(value, op, &[a])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if !ta.is_matrix() || !tb.is_matrix() || ta.shape()[1] != tb.shape()[0] {
            return Err(shape_err("matmul", ta, tb));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut out = vec![0.0; m * n];
        matmul_into(m, k, n, ta.data(), tb.data(), &mut out);
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    /// `a · bᵀ` for `a: m×k`, `b: n×k`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if !ta.is_matrix() || !tb.is_matrix() || ta.shape()[1] != tb.shape()[1] {
            return Err(shape_err("matmul_nt", ta, tb));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[0]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, ta.data(), (k as isize, 1), tb.data(), (1, k as isize), 0.0, &mut out);
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::MatMulNt(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        self.push(value, Op::Transpose(a), &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x + y);
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x - y);
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(value, Op::Sub(a, b), &[a, b]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x * y);
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    /// Adds a length-`n` bias to every row of an `m×n` matrix.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(bias));
        if !ta.is_matrix() || tb.numel() != ta.cols() {
            return Err(shape_err("add_row", ta, tb));
        }
        let cols = ta.cols();
        let mut data = ta.data().to_vec();
        for row in data.chunks_mut(cols) {
            for (x, b) in row.iter_mut().zip(tb.data()) {
                *x += b;
            }
        }
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(value, Op::AddRow(a, bias), &[a, bias]))
    }

    /// Adds a non-differentiable constant, e.g. an additive `0 / -inf` mask.
    pub fn add_const(&mut self, a: Var, c: &Tensor) -> Result<Var> {
        let ta = self.value(a);
        if ta.shape() != c.shape() {
            return Err(shape_err("add_const", ta, c));
        }
        let data = zip_map(ta, c, |x, y| x + y);
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(value, Op::AddConst(a), &[a]))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.map(a, Op::Scale(a, s), |x| x * s)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        self.map(a, Op::AddScalar(a), |x| x + s)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.map(a, Op::Silu(a), |x| x * sigmoid(x))
    }

    /// `|a|`; the subgradient at 0 is 0.
    pub fn abs(&mut self, a: Var) -> Var {
        self.map(a, Op::Abs(a), f64::abs)
    }

    /// Row-wise RMS normalization scaled by a learned `w`.
    pub fn rms_norm(&mut self, x: Var, w: Var) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        if !tx.is_matrix() || tw.numel() != tx.cols() {
            return Err(shape_err("rms_norm", tx, tw));
        }
        let cols = tx.cols();
        let mut out = tx.data().to_vec();
        let mut inv_rms = Vec::with_capacity(tx.rows());
        for row in out.chunks_mut(cols) {
            let ms = row.iter().map(|v| v * v).sum::<f64>() / cols as f64;
            let inv = 1.0 / (ms + RMS_EPS).sqrt();
            for (v, g) in row.iter_mut().zip(tw.data()) {
                *v *= inv * g;
            }
            inv_rms.push(inv);
        }
        let value = Tensor::new(tx.shape().to_vec(), out)?;
        Ok(self.push(value, Op::RmsNorm { x, w, inv_rms }, &[x, w]))
    }

    /// Row-wise softmax; `-inf` entries are masked positions.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).softmax_rows()?;
        Ok(self.push(value, Op::Softmax(a), &[a]))
    }

    /// Selects rows of `table` (embedding lookup).
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if !t.is_matrix() {
            return Err(Error::contract("gather_rows expects a matrix table"));
        }
        let (rows, cols) = (t.rows(), t.cols());
        let mut data = Vec::with_capacity(ids.len() * cols);
        for &id in ids {
            if id >= rows {
                return Err(Error::contract(format!("row index {id} out of range {rows}")));
            }
            data.extend_from_slice(t.row(id));
        }
        let value = Tensor::new(vec![ids.len(), cols], data)?;
        Ok(self.push(
            value,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    /// Mean token-level negative log-likelihood of `targets` under `logits`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        if !t.is_matrix() || t.rows() != targets.len() || targets.is_empty() {
            return Err(Error::Shape {
                op: "cross_entropy",
                lhs: t.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let cols = t.cols();
        let mut probs = t.data().to_vec();
        let mut nll = 0.0;
        for (row, &tgt) in probs.chunks_mut(cols).zip(targets) {
            if tgt >= cols {
                return Err(Error::contract(format!("target {tgt} out of vocab {cols}")));
            }
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            nll += lse - row[tgt];
            for v in row.iter_mut() {
                *v = (*v - lse).exp();
            }
        }
        let value = Tensor::scalar(nll / targets.len() as f64);
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.push(Tensor::scalar(s), Op::Mean(a), &[a])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::contract("concat_cols of nothing"))?;
        let rows = self.value(*first).rows();
        for p in parts {
            let t = self.value(*p);
            if !t.is_matrix() || t.rows() != rows {
                return Err(shape_err("concat_cols", self.value(*first), t));
            }
        }
        let total: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(self.value(*p).row(r));
            }
        }
        let value = Tensor::new(vec![rows, total], data)?;
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn slice_cols(&mut self, src: Var, start: usize, width: usize) -> Result<Var> {
        let t = self.value(src);
        if !t.is_matrix() || start + width > t.cols() {
            return Err(Error::Shape {
                op: "slice_cols",
                lhs: t.shape().to_vec(),
                rhs: vec![start, width],
            });
        }
        let rows = t.rows();
        let mut data = Vec::with_capacity(rows * width);
        for r in 0..rows {
            data.extend_from_slice(&t.row(r)[start..start + width]);
        }
        let value = Tensor::new(vec![rows, width], data)?;
        Ok(self.push(value, Op::SliceCols { src, start }, &[src]))
    }

    /// Straight-through estimator: the node carries `forward` as its value
    /// while the backward pass treats it as the identity of `soft`.
    pub fn straight_through(&mut self, soft: Var, forward: Tensor) -> Result<Var> {
        let ts = self.value(soft);
        if ts.shape() != forward.shape() {
            return Err(shape_err("straight_through", ts, &forward));
        }
        Ok(self.push(forward, Op::StraightThrough(soft), &[soft]))
    }

    /// Expands column `head` of an `n×h` gate matrix into an `n×n` matrix
    /// whose `(j, t)` entry is `0`, `1`, or `gate[t][head]` per `cells`.
    pub fn expand_gate(&mut self, gate: Var, head: usize, cells: Arc<[GateCell]>) -> Result<Var> {
        let tg = self.value(gate);
        let n = tg.rows();
        if !tg.is_matrix() || head >= tg.cols() || cells.len() != n * n {
            return Err(Error::Shape {
                op: "expand_gate",
                lhs: tg.shape().to_vec(),
                rhs: vec![head, cells.len()],
            });
        }
        let h = tg.cols();
        let g = tg.data();
        let data = cells
            .iter()
            .enumerate()
            .map(|(idx, cell)| match cell {
                GateCell::Zero => 0.0,
                GateCell::One => 1.0,
                GateCell::Gate => g[(idx % n) * h + head],
            })
            .collect();
        let value = Tensor::new(vec![n, n], data)?;
        Ok(self.push(value, Op::ExpandGate { gate, head, cells }, &[gate]))
    }

    /// Reverse sweep from a scalar `loss`. Gradients accumulate into every
    /// `requires_grad` node reached, across repeated calls.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        if !self.requires_grad(loss) {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            let node = &mut self.nodes[i];
            match &mut node.grad {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                None => node.grad = Some(g),
            }
        }
        Ok(())
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let n = self.nodes[v.0].value.numel();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if let Some(da) = self.slot(grads, *a) {
                    // dA += G · Bᵀ
                    gemm(m, n, k, g, (n as isize, 1), tb.data(), (1, n as isize), 1.0, da);
                }
                if let Some(db) = self.slot(grads, *b) {
                    // dB += Aᵀ · G
                    gemm(k, m, n, ta.data(), (1, k as isize), g, (n as isize, 1), 1.0, db);
                }
            }
            Op::MatMulNt(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[0]);
                if let Some(da) = self.slot(grads, *a) {
                    // dA += G · B
                    gemm(m, n, k, g, (n as isize, 1), tb.data(), (k as isize, 1), 1.0, da);
                }
                if let Some(db) = self.slot(grads, *b) {
                    // dB += Gᵀ · A
                    gemm(n, m, k, g, (1, n as isize), ta.data(), (k as isize, 1), 1.0, db);
                }
            }
            Op::Transpose(a) => {
                let (r, c) = (node.value.rows(), node.value.cols());
                if let Some(da) = self.slot(grads, *a) {
                    for i in 0..r {
                        for j in 0..c {
                            da[j * r + i] += g[i * c + j];
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if let Some(d) = self.slot(grads, *v) {
                        axpy(d, 1.0, g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(d) = self.slot(grads, *a) {
                    axpy(d, 1.0, g);
                }
                if let Some(d) = self.slot(grads, *b) {
                    axpy(d, -1.0, g);
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a).data(), self.value(*b).data());
                if let Some(d) = self.slot(grads, *a) {
                    for ((d, g), y) in d.iter_mut().zip(g).zip(tb) {
                        *d += g * y;
                    }
                }
                if let Some(d) = self.slot(grads, *b) {
                    for ((d, g), x) in d.iter_mut().zip(g).zip(ta) {
                        *d += g * x;
                    }
                }
            }
            Op::AddRow(a, bias) => {
                if let Some(d) = self.slot(grads, *a) {
                    axpy(d, 1.0, g);
                }
                let cols = node.value.cols();
                if let Some(d) = self.slot(grads, *bias) {
                    for row in g.chunks(cols) {
                        axpy(d, 1.0, row);
                    }
                }
            }
            Op::AddConst(a) | Op::AddScalar(a) | Op::StraightThrough(a) => {
                if let Some(d) = self.slot(grads, *a) {
                    axpy(d, 1.0, g);
                }
            }
            Op::Scale(a, s) => {
                if let Some(d) = self.slot(grads, *a) {
                    axpy(d, *s, g);
                }
            }
            Op::Sigmoid(a) => {
                if let Some(d) = self.slot(grads, *a) {
                    for ((d, g), y) in d.iter_mut().zip(g).zip(out) {
                        *d += g * y * (1.0 - y);
                    }
                }
            }
            Op::Silu(a) => {
                let x = self.value(*a).data();
                if let Some(d) = self.slot(grads, *a) {
                    for ((d, g), x) in d.iter_mut().zip(g).zip(x) {
                        let s = sigmoid(*x);
                        *d += g * (s + x * s * (1.0 - s));
                    }
                }
            }
            Op::Abs(a) => {
                let x = self.value(*a).data();
                if let Some(d) = self.slot(grads, *a) {
                    for ((d, g), x) in d.iter_mut().zip(g).zip(x) {
                        if *x > 0.0 {
                            *d += g;
                        } else if *x < 0.0 {
                            *d -= g;
                        }
                    }
                }
            }
            Op::RmsNorm { x, w, inv_rms } => {
                let (tx, tw) = (self.value(*x), self.value(*w));
                let cols = tx.cols();
                if let Some(dx) = self.slot(grads, *x) {
                    for (r, inv) in inv_rms.iter().enumerate() {
                        let xr = &tx.data()[r * cols..(r + 1) * cols];
                        let gr = &g[r * cols..(r + 1) * cols];
                        // gw = g ⊙ w; dx = inv · (gw − x̂ · mean(gw ⊙ x̂))
                        let dot: f64 = gr
                            .iter()
                            .zip(tw.data())
                            .zip(xr)
                            .map(|((g, w), x)| g * w * x * inv)
                            .sum::<f64>()
                            / cols as f64;
                        let dr = &mut dx[r * cols..(r + 1) * cols];
                        for c in 0..cols {
                            let xhat = xr[c] * inv;
                            dr[c] += inv * (gr[c] * tw.data()[c] - xhat * dot);
                        }
                    }
                }
                if let Some(dw) = self.slot(grads, *w) {
                    for (r, inv) in inv_rms.iter().enumerate() {
                        for c in 0..cols {
                            dw[c] += g[r * cols + c] * tx.data()[r * cols + c] * inv;
                        }
                    }
                }
            }
            Op::Softmax(a) => {
                let cols = node.value.cols();
                if let Some(d) = self.slot(grads, *a) {
                    for ((dr, gr), yr) in d.chunks_mut(cols).zip(g.chunks(cols)).zip(out.chunks(cols)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(g, y)| g * y).sum();
                        for ((d, g), y) in dr.iter_mut().zip(gr).zip(yr) {
                            *d += y * (g - dot);
                        }
                    }
                }
            }
            Op::Gather { table, ids } => {
                let cols = node.value.cols();
                if let Some(d) = self.slot(grads, *table) {
                    for (r, &id) in ids.iter().enumerate() {
                        axpy(&mut d[id * cols..(id + 1) * cols], 1.0, &g[r * cols..(r + 1) * cols]);
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let cols = self.value(*logits).cols();
                let scale = g[0] / targets.len() as f64;
                if let Some(d) = self.slot(grads, *logits) {
                    for (r, &t) in targets.iter().enumerate() {
                        let dr = &mut d[r * cols..(r + 1) * cols];
                        axpy(dr, scale, &probs[r * cols..(r + 1) * cols]);
                        dr[t] -= scale;
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(d) = self.slot(grads, *a) {
                    d.iter_mut().for_each(|v| *v += g[0]);
                }
            }
            Op::Mean(a) => {
                if let Some(d) = self.slot(grads, *a) {
                    let s = g[0] / d.len() as f64;
                    d.iter_mut().for_each(|v| *v += s);
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let mut offset = 0;
                for p in parts {
                    let w = self.value(*p).cols();
                    if let Some(d) = self.slot(grads, *p) {
                        for (r, dr) in d.chunks_mut(w).enumerate() {
                            axpy(dr, 1.0, &g[r * total + offset..r * total + offset + w]);
                        }
                    }
                    offset += w;
                }
            }
            Op::SliceCols { src, start } => {
                let w = node.value.cols();
                let total = self.value(*src).cols();
                if let Some(d) = self.slot(grads, *src) {
                    for (r, gr) in g.chunks(w).enumerate() {
                        axpy(&mut d[r * total + start..r * total + start + w], 1.0, gr);
                    }
                }
            }
            Op::ExpandGate { gate, head, cells } => {
                let tg = self.value(*gate);
                let (n, h) = (tg.rows(), tg.cols());
                if let Some(d) = self.slot(grads, *gate) {
                    for (idx, cell) in cells.iter().enumerate() {
                        if *cell == GateCell::Gate {
                            d[(idx % n) * h + head] += g[idx];
                        }
                    }
                }
            }
        }
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect()
}

fn axpy(dst: &mut [f64], alpha: f64, src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += alpha * s;
    }
}
