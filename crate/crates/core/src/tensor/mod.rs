//! Dense row-major `f64` arrays and the handful of operations the rest of the
//! crate is built from.
//!
//! Every reduction accumulates in ascending index order starting from `0.0`,
//! so results are bitwise reproducible regardless of how work is scheduled.

mod rng;

pub use rng::{gaussian, SeededRng};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::dim("tensor", &shape, &[data.len()]));
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

    /// Rank-1 tensor owning `data`.
    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::dim("reshape", &self.shape, shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn same_shape(&self, other: &Tensor) -> bool {
        self.shape == other.shape
    }

    pub fn fill(&mut self, value: f64) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    /// `self += other`, elementwise.
    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        if !self.same_shape(other) {
            return Err(Error::dim("add", &self.shape, &other.shape));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
        Ok(())
    }

    pub fn scale(&self, factor: f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| v * factor).collect(),
        }
    }

    pub fn norm(&self) -> f64 {
        dot(&self.data, &self.data).sqrt()
    }

    /// Rounds every entry through `f32`, the storage precision of the on-disk formats.
    pub fn round_to_f32(&mut self) {
        self.data.iter_mut().for_each(|v| *v = *v as f32 as f64);
    }
}

/// Ascending-order dot product.
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// `out[r] = Σ_k w[r·cols + k]·x[k]` for a row-major `rows×cols` matrix.
///
/// Four rows are walked together so their (independent) accumulation chains
/// overlap; each chain still visits `k` in ascending order.
pub(crate) fn matvec(w: &[f64], rows: usize, cols: usize, x: &[f64], out: &mut [f64]) {
    debug_assert_eq!(w.len(), rows * cols);
    debug_assert_eq!(x.len(), cols);
    debug_assert_eq!(out.len(), rows);
    let x = &x[..cols];
    let mut r = 0;
    while r + 4 <= rows {
        let w0 = &w[r * cols..(r + 1) * cols];
        let w1 = &w[(r + 1) * cols..(r + 2) * cols];
        let w2 = &w[(r + 2) * cols..(r + 3) * cols];
        let w3 = &w[(r + 3) * cols..(r + 4) * cols];
        let (mut a0, mut a1, mut a2, mut a3) = (0.0, 0.0, 0.0, 0.0);
        for k in 0..cols {
            let xk = x[k];
            a0 += w0[k] * xk;
            a1 += w1[k] * xk;
            a2 += w2[k] * xk;
            a3 += w3[k] * xk;
        }
        out[r] = a0;
        out[r + 1] = a1;
        out[r + 2] = a2;
        out[r + 3] = a3;
        r += 4;
    }
    while r < rows {
        out[r] = dot(&w[r * cols..(r + 1) * cols], x);
        r += 1;
    }
}

/// `out[k] = Σ_r w[r·cols + k]·y[r]`, rows visited in ascending order.
pub(crate) fn matvec_transposed(w: &[f64], rows: usize, cols: usize, y: &[f64], out: &mut [f64]) {
    debug_assert_eq!(w.len(), rows * cols);
    out[..cols].iter_mut().for_each(|v| *v = 0.0);
    for r in 0..rows {
        let yr = y[r];
        let row = &w[r * cols..(r + 1) * cols];
        for (o, wv) in out[..cols].iter_mut().zip(row) {
            *o += wv * yr;
        }
    }
}

/// `acc[r·cols + k] += delta[r]·x[k]`.
pub(crate) fn outer_accumulate(acc: &mut [f64], delta: &[f64], x: &[f64]) {
    let cols = x.len();
    debug_assert_eq!(acc.len(), delta.len() * cols);
    for (row, d) in acc.chunks_exact_mut(cols).zip(delta) {
        for (a, xv) in row.iter_mut().zip(x) {
            *a += d * xv;
        }
    }
}

/// Matrix product of two rank-2 tensors, summing over the inner index in
/// ascending order.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = match a.shape() {
        [m, k] => (*m, *k),
        _ => return Err(Error::dim("matmul", a.shape(), b.shape())),
    };
    let n = match b.shape() {
        [k2, n] if *k2 == k => *n,
        _ => return Err(Error::dim("matmul", a.shape(), b.shape())),
    };
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        // Row-of-b axpy keeps every c[i][j] chain in ascending-k order.
        for (kk, av) in arow.iter().enumerate() {
            let brow = &b.data[kk * n..(kk + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

pub fn relu(x: &Tensor) -> Tensor {
    Tensor {
        shape: x.shape.clone(),
        data: x.data.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect(),
    }
}

/// Subgradient of ReLU with the convention `grad(0) = 0`.
pub fn relu_grad(x: &Tensor) -> Tensor {
    Tensor {
        shape: x.shape.clone(),
        data: x.data.iter().map(|&v| if v > 0.0 { 1.0 } else { 0.0 }).collect(),
    }
}

pub fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// Stacks the entries of `a` in front of the entries of `b` (the `|` operator).
pub fn concat(a: &Tensor, b: &Tensor) -> Tensor {
    let mut data = Vec::with_capacity(a.len() + b.len());
    data.extend_from_slice(&a.data);
    data.extend_from_slice(&b.data);
    Tensor::vector(data)
}

/// Inverse of [`concat`]: the first `at` entries and the rest.
pub fn split(t: &Tensor, at: usize) -> Result<(Tensor, Tensor)> {
    if at > t.len() {
        return Err(Error::dim("split", t.shape(), &[at]));
    }
    let (head, tail) = t.data.split_at(at);
    Ok((Tensor::vector(head.to_vec()), Tensor::vector(tail.to_vec())))
}

pub fn cosine_similarity(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::dim("cosine_similarity", a.shape(), b.shape()));
    }
    let na = a.norm();
    let nb = b.norm();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Degenerate("cosine_similarity"));
    }
    Ok((dot(&a.data, &b.data) / (na * nb)).clamp(-1.0, 1.0))
}
