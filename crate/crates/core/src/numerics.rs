//! Dense single-precision kernels.
//!
//! Everything here is a pure function over row-major `f32` buffers. Loop
//! orders are fixed so results are bit-reproducible on a given platform.

use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::error::{shape, Result};

/// Layer-norm epsilon used by the model.
pub const LAYERNORM_EPS: f32 = 1e-5;

/// Row-major matrix of `f32`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor2D {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Tensor2D {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(shape(alloc::format!("buffer of {} values cannot be {rows}x{cols}", data.len())));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    /// Builds a matrix from equally long rows.
    pub fn from_rows<R: AsRef<[f32]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(shape("ragged rows"));
            }
            data.extend_from_slice(r);
        }
        Ok(Self { rows: rows.len(), cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f32] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f32) {
        self.data[r * self.cols + c] = v;
    }

    /// Appends the rows of `other`.
    pub fn append_rows(&mut self, other: &Tensor2D) -> Result<()> {
        if self.rows == 0 && self.data.is_empty() {
            self.cols = other.cols;
        }
        if other.cols != self.cols {
            return Err(shape(alloc::format!("cannot append {} columns to {}", other.cols, self.cols)));
        }
        self.data.extend_from_slice(&other.data);
        self.rows += other.rows;
        Ok(())
    }

    /// Copy of rows `start..end`.
    pub fn slice_rows(&self, start: usize, end: usize) -> Tensor2D {
        Tensor2D { rows: end - start, cols: self.cols, data: self.data[start * self.cols..end * self.cols].to_vec() }
    }

    pub fn transpose(&self) -> Tensor2D {
        let mut out = Tensor2D::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Per-vocabulary-entry scores for the next token.
pub type LogitVector = Vec<f32>;

/// Matrix product `a × b`.
pub fn matmul(a: &Tensor2D, b: &Tensor2D) -> Result<Tensor2D> {
    if a.cols != b.rows {
        return Err(shape(alloc::format!("matmul {}x{} by {}x{}", a.rows, a.cols, b.rows, b.cols)));
    }
    let mut out = Tensor2D::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let out_row = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for k in 0..a.cols {
            let aik = a.data[i * a.cols + k];
            let b_row = &b.data[k * b.cols..(k + 1) * b.cols];
            for (o, &bkj) in out_row.iter_mut().zip(b_row) {
                *o += aik * bkj;
            }
        }
    }
    Ok(out)
}

/// Matrix product `a × bᵀ`.
pub fn matmul_transposed(a: &Tensor2D, b: &Tensor2D) -> Result<Tensor2D> {
    if a.cols != b.cols {
        return Err(shape(alloc::format!("matmul_transposed {}x{} by ({}x{})^T", a.rows, a.cols, b.rows, b.cols)));
    }
    let mut out = Tensor2D::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        let a_row = a.row(i);
        for j in 0..b.rows {
            out.data[i * b.rows + j] = dot(a_row, b.row(j));
        }
    }
    Ok(out)
}

pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = 0.0f32;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// Numerically stable softmax of one row.
pub fn softmax_row(v: &[f32]) -> Result<Vec<f32>> {
    let mut out = v.to_vec();
    softmax_in_place(&mut out)?;
    Ok(out)
}

pub fn softmax_in_place(v: &mut [f32]) -> Result<()> {
    if v.is_empty() {
        return Err(shape("softmax of empty row"));
    }
    let max = v.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f32;
    for x in v.iter_mut() {
        *x = libm::expf(*x - max);
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
    Ok(())
}

/// `v - logsumexp(v)`, computed around the row maximum.
pub fn log_softmax_row(v: &[f32]) -> Result<Vec<f32>> {
    if v.is_empty() {
        return Err(shape("log_softmax of empty row"));
    }
    let max = v.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f32;
    for &x in v {
        sum += libm::expf(x - max);
    }
    let lse = max + libm::logf(sum);
    Ok(v.iter().map(|&x| x - lse).collect())
}

/// `gain ⊙ (v - mean) / sqrt(var + eps) + bias` with population variance.
pub fn layernorm(v: &[f32], gain: &[f32], bias: &[f32], eps: f32) -> Result<Vec<f32>> {
    if v.len() != gain.len() || v.len() != bias.len() {
        return Err(shape(alloc::format!("layernorm lengths {} / {} / {}", v.len(), gain.len(), bias.len())));
    }
    if v.is_empty() {
        return Ok(Vec::new());
    }
    let n = v.len() as f32;
    let mean = v.iter().sum::<f32>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f32>() / n;
    let inv = 1.0 / libm::sqrtf(var + eps);
    Ok(v.iter().zip(gain.iter().zip(bias)).map(|(x, (g, b))| g * ((x - mean) * inv) + b).collect())
}

/// Row-wise layer norm of a matrix.
pub fn layernorm_rows(x: &Tensor2D, gain: &[f32], bias: &[f32], eps: f32) -> Result<Tensor2D> {
    let mut out = Vec::with_capacity(x.data.len());
    for r in 0..x.rows {
        out.extend(layernorm(x.row(r), gain, bias, eps)?);
    }
    Tensor2D::new(x.rows, x.cols, out)
}

/// GELU, tanh approximation.
pub fn gelu(x: f32) -> f32 {
    const SQRT_2_OVER_PI: f32 = 0.797_884_6;
    0.5 * x * (1.0 + libm::tanhf(SQRT_2_OVER_PI * (x + 0.044_715 * x * x * x)))
}

pub fn add_in_place(dst: &mut Tensor2D, src: &Tensor2D) -> Result<()> {
    if dst.shape() != src.shape() {
        return Err(shape("element-wise add of different shapes"));
    }
    for (d, s) in dst.data.iter_mut().zip(&src.data) {
        *d += s;
    }
    Ok(())
}

/// Adds `bias` to every row.
pub fn add_row_bias(dst: &mut Tensor2D, bias: &[f32]) -> Result<()> {
    if bias.len() != dst.cols {
        return Err(shape("row bias length"));
    }
    for r in 0..dst.rows {
        for (d, b) in dst.row_mut(r).iter_mut().zip(bias) {
            *d += b;
        }
    }
    Ok(())
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(v: &[f32]) -> Option<usize> {
    let mut best: Option<(usize, f32)> = None;
    for (i, &x) in v.iter().enumerate() {
        match best {
            Some((_, b)) if x <= b => {}
            _ => best = Some((i, x)),
        }
    }
    best.map(|(i, _)| i)
}

/// Indices of the `k` largest values, descending, ties by lowest index.
pub fn top_k(v: &[f32], k: usize) -> Vec<(usize, f32)> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[b].total_cmp(&v[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx.into_iter().map(|i| (i, v[i])).collect()
}
