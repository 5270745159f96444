//! Dense row-major `f64` arrays and a define-by-run reverse-mode tape.
//!
//! [`Tensor`] is a plain value (shape + data). [`Graph`] records every
//! operation applied to its [`Var`] handles and replays them backwards in
//! [`Graph::backward`]. A fresh graph is built for each forward pass; model
//! parameters live outside the graph and are bound into it as leaves.

mod graph;
mod kernels;

pub use graph::{GateCell, Graph, Var};
pub(crate) use kernels::matmul_into;

use crate::error::{Error, Result};

/// Finite stand-in for the −∞ entries of an additive attention mask.
///
/// Masked scores are clamped to `-MASK_VALUE` before exponentiation so a
/// masked row never produces `exp(-inf - (-inf)) = NaN`.
pub const MASK_VALUE: f64 = 1e9;

/// Epsilon inside every RMS normalization.
pub const RMS_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape {
                op: "tensor",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != cols) {
            return Err(Error::Shape {
                op: "from_rows",
                lhs: vec![cols],
                rhs: vec![bad.len()],
            });
        }
        let data = rows.iter().flatten().copied().collect();
        Ok(Self {
            shape: vec![rows.len(), cols],
            data,
        })
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

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_matrix(&self) -> bool {
        self.shape.len() == 2
    }

    /// Row count of a matrix; 1 for vectors and scalars.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[0],
            _ => 1,
        }
    }

    /// Column count of a matrix; length for vectors.
    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    /// Standard matrix product without recording anything.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if !self.is_matrix() || !other.is_matrix() || self.shape[1] != other.shape[0] {
            return Err(Error::Shape {
                op: "matmul",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let (m, k, p) = (self.shape[0], self.shape[1], other.shape[1]);
        let mut out = vec![0.0; m * p];
        matmul_into(m, k, p, &self.data, &other.data, &mut out);
        Ok(Tensor {
            shape: vec![m, p],
            data: out,
        })
    }

    pub fn transpose(&self) -> Tensor {
        let (r, c) = (self.rows(), self.cols());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor {
            shape: vec![c, r],
            data: out,
        }
    }

    /// Row-wise softmax. `-inf` entries mark masked positions; a row with no
    /// finite entry is a contract violation. NaN rows stay NaN.
    pub fn softmax_rows(&self) -> Result<Tensor> {
        let cols = self.cols();
        let mut out = self.data.clone();
        for (r, row) in out.chunks_mut(cols.max(1)).enumerate() {
            softmax_in_place(row).map_err(|_| {
                Error::contract(format!("softmax row {r} is fully masked"))
            })?;
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: out,
        })
    }
}

/// Masked softmax on one row. Entries at `-inf` are clamped to
/// `-MASK_VALUE` and come out as exact zeros.
pub(crate) fn softmax_in_place(row: &mut [f64]) -> std::result::Result<(), ()> {
    if row.iter().any(|v| v.is_nan()) {
        row.fill(f64::NAN);
        return Ok(());
    }
    if !row.iter().any(|v| v.is_finite()) {
        return Err(());
    }
    for v in row.iter_mut() {
        if *v < -MASK_VALUE {
            *v = -MASK_VALUE;
        }
    }
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
    Ok(())
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
