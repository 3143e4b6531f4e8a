//! Small dense linear-algebra kit: vectors, row-major matrices, power
//! iteration for the top Gram eigenvalue, central-difference gradients and
//! labelled deterministic random streams.
//!
//! Every reduction runs in ascending index order so repeated runs are
//! bit-identical.

use std::ops::{Deref, DerefMut};

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumError {
    #[error(
        "power iteration did not converge after {iterations} iterations (last estimate {estimate})"
    )]
    NotConverged { estimate: f64, iterations: usize },
    #[error("matrix has no entries")]
    EmptyMatrix,
    #[error("tolerance must be positive, got {0}")]
    BadTolerance(f64),
    #[error("cannot draw {size} distinct indices from a universe of {universe}")]
    SubsetTooLarge { size: usize, universe: usize },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("matrix is not symmetric positive definite (pivot {pivot} at row {row})")]
    NotPositiveDefinite { row: usize, pivot: f64 },
}

/// Dense real vector.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DenseVector(Vec<f64>);

impl DenseVector {
    pub fn zeros(n: usize) -> Self {
        Self(vec![0.0; n])
    }

    pub fn from_vec(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dot(&self, other: &[f64]) -> f64 {
        dot(&self.0, other)
    }

    pub fn norm_sq(&self) -> f64 {
        dot(&self.0, &self.0)
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn norm_l1(&self) -> f64 {
        self.0.iter().map(|v| v.abs()).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.0.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// `self += a * x`
    pub fn axpy(&mut self, a: f64, x: &[f64]) {
        assert_eq!(self.len(), x.len(), "axpy dimension mismatch");
        for (s, xv) in self.0.iter_mut().zip(x) {
            *s += a * xv;
        }
    }

    pub fn scale(&mut self, a: f64) {
        for s in &mut self.0 {
            *s *= a;
        }
    }

    pub fn scaled(&self, a: f64) -> Self {
        Self(self.0.iter().map(|v| a * v).collect())
    }

    /// `self - other`
    pub fn sub(&self, other: &[f64]) -> Self {
        assert_eq!(self.len(), other.len(), "sub dimension mismatch");
        Self(self.0.iter().zip(other).map(|(a, b)| a - b).collect())
    }

    /// `self + other`
    pub fn add(&self, other: &[f64]) -> Self {
        assert_eq!(self.len(), other.len(), "add dimension mismatch");
        Self(self.0.iter().zip(other).map(|(a, b)| a + b).collect())
    }

    /// Euclidean distance to `other`.
    pub fn dist(&self, other: &[f64]) -> f64 {
        assert_eq!(self.len(), other.len(), "dist dimension mismatch");
        self.0
            .iter()
            .zip(other)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

impl Deref for DenseVector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for DenseVector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

impl From<Vec<f64>> for DenseVector {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

impl FromIterator<f64> for DenseVector {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        Self(iter.into_iter().collect())
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "dot dimension mismatch");
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    values: Vec<f64>,
    rows: usize,
    cols: usize,
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            values: vec![0.0; rows * cols],
            rows,
            cols,
        }
    }

    pub fn from_row_major(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self, NumError> {
        if values.len() != rows * cols {
            return Err(NumError::DimensionMismatch {
                expected: rows * cols,
                got: values.len(),
            });
        }
        Ok(Self { values, rows, cols })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, NumError> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut values = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(NumError::DimensionMismatch {
                    expected: cols,
                    got: r.len(),
                });
            }
            values.extend_from_slice(r);
        }
        Ok(Self {
            values,
            rows: rows.len(),
            cols,
        })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.set(i, i, 1.0);
        }
        m
    }

    pub fn diag(d: &[f64]) -> Self {
        let mut m = Self::zeros(d.len(), d.len());
        for (i, v) in d.iter().enumerate() {
            m.set(i, i, *v);
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.values[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.values[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.values[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> DenseVector {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    /// `A x`, x of length `cols`.
    pub fn matvec(&self, x: &[f64]) -> DenseVector {
        assert_eq!(x.len(), self.cols, "matvec dimension mismatch");
        (0..self.rows).map(|r| dot(self.row(r), x)).collect()
    }

    /// `Aᵀ x`, x of length `rows`. Accumulates row by row.
    pub fn matvec_t(&self, x: &[f64]) -> DenseVector {
        assert_eq!(x.len(), self.rows, "matvec_t dimension mismatch");
        let mut out = DenseVector::zeros(self.cols);
        for (r, xr) in x.iter().enumerate() {
            if *xr != 0.0 {
                out.axpy(*xr, self.row(r));
            }
        }
        out
    }

    /// Copy of the listed columns, in the listed order.
    pub fn select_columns(&self, idx: &[usize]) -> DenseMatrix {
        let mut out = DenseMatrix::zeros(self.rows, idx.len());
        for r in 0..self.rows {
            let src = self.row(r);
            let dst = out.row_mut(r);
            for (k, &c) in idx.iter().enumerate() {
                dst[k] = src[c];
            }
        }
        out
    }
}

/// Largest eigenvalue of `AᵀA` by power iteration.
///
/// Starts from the normalized all-ones vector and tracks the Rayleigh
/// quotient `‖A x‖²`, stopping once two successive estimates agree to the
/// relative tolerance `tol`.
pub fn max_eigenvalue_gram(a: &DenseMatrix, tol: f64, max_iter: usize) -> Result<f64, NumError> {
    if a.is_empty() {
        return Err(NumError::EmptyMatrix);
    }
    if !(tol > 0.0) {
        return Err(NumError::BadTolerance(tol));
    }
    let n = a.cols();
    let mut x = DenseVector::from_vec(vec![1.0 / (n as f64).sqrt(); n]);
    let mut ax = a.matvec(&x);
    let mut estimate = ax.norm_sq();
    for _ in 0..max_iter {
        let g = a.matvec_t(&ax);
        let gn = g.norm();
        if gn == 0.0 {
            // x lies in the null space; the Gram matrix is zero along every
            // direction reachable from the start vector.
            return Ok(0.0);
        }
        x = g.scaled(1.0 / gn);
        ax = a.matvec(&x);
        let next = ax.norm_sq();
        let converged = (next - estimate).abs() <= tol * next.abs().max(f64::MIN_POSITIVE);
        estimate = next;
        if converged {
            return Ok(estimate);
        }
    }
    Err(NumError::NotConverged {
        estimate,
        iterations: max_iter,
    })
}

/// Solve `S x = b` for symmetric positive definite `S` by Cholesky
/// factorization. Only the lower triangle of `S` is read.
pub fn cholesky_solve(s: &DenseMatrix, b: &[f64]) -> Result<DenseVector, NumError> {
    let n = s.rows();
    if s.cols() != n {
        return Err(NumError::DimensionMismatch {
            expected: n,
            got: s.cols(),
        });
    }
    if b.len() != n {
        return Err(NumError::DimensionMismatch {
            expected: n,
            got: b.len(),
        });
    }
    let mut l = DenseMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let mut acc = s.get(i, j);
            for k in 0..j {
                acc -= l.get(i, k) * l.get(j, k);
            }
            if i == j {
                if !(acc > 0.0) {
                    return Err(NumError::NotPositiveDefinite { row: i, pivot: acc });
                }
                l.set(i, i, acc.sqrt());
            } else {
                l.set(i, j, acc / l.get(j, j));
            }
        }
    }
    let mut x = DenseVector::from_vec(b.to_vec());
    for i in 0..n {
        let mut acc = x[i];
        for k in 0..i {
            acc -= l.get(i, k) * x[k];
        }
        x[i] = acc / l.get(i, i);
    }
    for i in (0..n).rev() {
        let mut acc = x[i];
        for k in i + 1..n {
            acc -= l.get(k, i) * x[k];
        }
        x[i] = acc / l.get(i, i);
    }
    Ok(x)
}

/// Central-difference gradient of `f` at `w` with step `h`.
pub fn finite_difference_gradient<F>(f: F, w: &DenseVector, h: f64) -> DenseVector
where
    F: Fn(&DenseVector) -> f64,
{
    let mut probe = w.clone();
    let mut grad = DenseVector::zeros(w.len());
    for j in 0..w.len() {
        let orig = probe[j];
        probe[j] = orig + h;
        let fp = f(&probe);
        probe[j] = orig - h;
        let fm = f(&probe);
        probe[j] = orig;
        grad[j] = (fp - fm) / (2.0 * h);
    }
    grad
}

/// Deterministic random stream identified by a seed and a short label.
///
/// Streams with the same `(seed, label)` produce the same draws; different
/// labels under one seed are independent ChaCha streams.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    label: String,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, label: &str) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(fnv1a(label.as_bytes()));
        Self {
            seed,
            label: label.to_string(),
            rng,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn standard_normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.rng)
    }

    /// Uniform draw in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        rand::Rng::random::<f64>(&mut self.rng)
    }

    /// Fisher-Yates permutation of `0..n`.
    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut p: Vec<usize> = (0..n).collect();
        rand::seq::SliceRandom::shuffle(p.as_mut_slice(), &mut self.rng);
        p
    }

    pub(crate) fn inner(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// `size` distinct indices drawn uniformly without replacement from
/// `0..universe`, returned in ascending order.
pub fn rng_uniform_subset(
    rng: &mut RngStream,
    universe: usize,
    size: usize,
) -> Result<Vec<usize>, NumError> {
    if size > universe {
        return Err(NumError::SubsetTooLarge { size, universe });
    }
    let mut picked = index::sample(rng.inner(), universe, size).into_vec();
    picked.sort_unstable();
    Ok(picked)
}
