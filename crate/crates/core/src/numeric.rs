//! Numeric domain types and stable softmax primitives.
//!
//! Every exponential in the crate goes through a max-shift; nothing here
//! calls `exp` on a raw logit.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

/// Dense row-major matrix of `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        check_dim(rows * cols, data.len())?;
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            check_dim(cols, r.len())?;
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> + '_ {
        // chunks_exact on an empty-column matrix would panic
        (0..self.rows).map(move |i| self.row(i))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Copy of columns `start..end` as a new matrix.
    pub fn column_block(&self, start: usize, end: usize) -> Matrix {
        let cols = end - start;
        let mut data = Vec::with_capacity(self.rows * cols);
        for r in self.iter_rows() {
            data.extend_from_slice(&r[start..end]);
        }
        Matrix {
            rows: self.rows,
            cols,
            data,
        }
    }
}

/// The class catalog: `N` embeddings of dimension `D`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingMatrix(Matrix);

impl EmbeddingMatrix {
    pub fn new(matrix: Matrix) -> Result<Self> {
        if matrix.rows() == 0 {
            return Err(Error::Domain("catalog needs at least one class".into()));
        }
        if matrix.cols() == 0 {
            return Err(Error::Domain("embedding dimension must be positive".into()));
        }
        if !matrix.is_finite() {
            return Err(Error::Domain("embedding contains non-finite values".into()));
        }
        Ok(Self(matrix))
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        Self::new(Matrix::from_rows(rows)?)
    }

    #[inline]
    pub fn n_classes(&self) -> usize {
        self.0.rows()
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.0.cols()
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        self.0.row(i)
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn into_matrix(self) -> Matrix {
        self.0
    }

    /// Logits `o_j = z · q_j` for every class.
    pub fn logits(&self, z: &QueryVector) -> Result<Logits> {
        check_dim(self.dim(), z.dim())?;
        Ok(Logits(
            self.0.iter_rows().map(|q| dot_unchecked(q, z)).collect(),
        ))
    }
}

/// A query (context) embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryVector(Vec<f64>);

impl QueryVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("query contains non-finite values".into()));
        }
        Ok(Self(values))
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

impl std::ops::Deref for QueryVector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

/// Class logits for one query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Logits(pub Vec<f64>);

impl Logits {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    /// `‖o‖∞`
    pub fn inf_norm(&self) -> f64 {
        inf_norm(&self.0)
    }
}

/// A categorical distribution stored densely.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbabilityVector(Vec<f64>);

impl ProbabilityVector {
    pub const SUM_TOLERANCE: f64 = 1e-9;

    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Domain("empty probability vector".into()));
        }
        if values.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
            return Err(Error::Domain(
                "probabilities must be finite and >= 0".into(),
            ));
        }
        let total: f64 = values.iter().sum();
        if (total - 1.0).abs() > Self::SUM_TOLERANCE {
            return Err(Error::Domain(format!("probabilities sum to {total}")));
        }
        Ok(Self(values))
    }

    /// Normalize nonnegative weights.
    pub fn from_weights(weights: &[f64]) -> Result<Self> {
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) || !total.is_finite() {
            return Err(Error::Weights(
                "weights must have a positive finite sum".into(),
            ));
        }
        Self::new(weights.iter().map(|w| w / total).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

impl std::ops::Index<usize> for ProbabilityVector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> Result<f64> {
    check_dim(a.len(), b.len())?;
    Ok(dot_unchecked(a, b))
}

#[inline]
pub(crate) fn dot_unchecked(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
}

pub(crate) fn max_value(v: &[f64]) -> f64 {
    v.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// `log Σ exp(v_i)`, stabilized by the maximum.
pub fn log_sum_exp(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Domain("log_sum_exp of an empty vector".into()));
    }
    let (m, rest) = lse_parts(values);
    if m == f64::NEG_INFINITY {
        return Ok(m);
    }
    Ok(m + rest.ln_1p())
}

/// `(max, Σ_{i≠argmax} exp(v_i − max))`, so `log_sum_exp = max + ln_1p(rest)`.
pub(crate) fn lse_parts(values: &[f64]) -> (f64, f64) {
    let top = argmax(values);
    let m = values[top];
    if m == f64::NEG_INFINITY {
        return (m, 0.0);
    }
    let rest = values
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != top)
        .map(|(_, v)| (v - m).exp())
        .sum();
    (m, rest)
}

/// Max-shifted softmax over raw scores.
pub fn softmax_slice(values: &[f64]) -> Vec<f64> {
    let m = max_value(values);
    let mut out: Vec<f64> = values.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = out.iter().sum();
    for p in &mut out {
        *p /= s;
    }
    out
}

pub fn softmax(o: &Logits) -> ProbabilityVector {
    ProbabilityVector(softmax_slice(&o.0))
}
