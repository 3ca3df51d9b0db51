//! Dense row-major matrices, l2 normalization with its exact backward pass,
//! cosine similarity, a seeded generator and a central-difference oracle.
//!
//! Everything is `f64`. Rows are samples, columns are feature dimensions.

use rand::seq::SliceRandom;
use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Norms at or below this value are treated as zero.
pub const ZERO_NORM: f64 = 1e-12;

/// Default central-difference step.
pub const FD_STEP: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch {
                expected: (rows, cols),
                found: (data.len(), 1),
            });
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from equally long rows. Panics on ragged input.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Self {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Self {
            rows: rows.len(),
            cols,
            data,
        }
    }

    /// Repeats `v` as every row.
    pub fn broadcast_row(v: &[f64], rows: usize) -> Self {
        let mut data = Vec::with_capacity(rows * v.len());
        for _ in 0..rows {
            data.extend_from_slice(v);
        }
        Self {
            rows,
            cols: v.len(),
            data,
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn random_normal(rows: usize, cols: usize, rng: &mut Rng) -> Self {
        let data = (0..rows * cols).map(|_| rng.normal()).collect();
        Self { rows, cols, data }
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.cols.max(1)).take(self.rows)
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn ensure_shape(&self, other: &Matrix) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch {
                expected: self.shape(),
                found: other.shape(),
            });
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Rows selected by index, in the given order.
    pub fn select_rows(&self, idx: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }

    /// Stacks matrices with equal column counts vertically.
    pub fn vstack(parts: &[&Matrix]) -> Result<Matrix> {
        let cols = parts.first().map_or(0, |m| m.cols);
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            if p.cols != cols {
                return Err(Error::ShapeMismatch {
                    expected: (p.rows, cols),
                    found: p.shape(),
                });
            }
            data.extend_from_slice(&p.data);
            rows += p.rows;
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::ShapeMismatch {
                expected: (self.cols, other.cols),
                found: other.shape(),
            });
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        gemm(
            (self.rows, self.cols, other.cols),
            (&self.data, self.cols as isize, 1),
            (&other.data, other.cols as isize, 1),
            &mut out.data,
        );
        Ok(out)
    }

    /// `selfᵀ · other`.
    pub fn matmul_tn(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows {
            return Err(Error::ShapeMismatch {
                expected: (self.rows, other.cols),
                found: other.shape(),
            });
        }
        let mut out = Matrix::zeros(self.cols, other.cols);
        gemm(
            (self.cols, self.rows, other.cols),
            (&self.data, 1, self.cols as isize),
            (&other.data, other.cols as isize, 1),
            &mut out.data,
        );
        Ok(out)
    }

    /// `self · otherᵀ`.
    pub fn matmul_nt(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(Error::ShapeMismatch {
                expected: (other.rows, self.cols),
                found: other.shape(),
            });
        }
        let mut out = Matrix::zeros(self.rows, other.rows);
        gemm(
            (self.rows, self.cols, other.rows),
            (&self.data, self.cols as isize, 1),
            (&other.data, 1, other.cols as isize),
            &mut out.data,
        );
        Ok(out)
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.ensure_shape(other)?;
        Ok(self.zip_map(other, |a, b| a + b))
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.ensure_shape(other)?;
        Ok(self.zip_map(other, |a, b| a - b))
    }

    pub fn add_assign(&mut self, other: &Matrix) -> Result<()> {
        self.ensure_shape(other)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&self, s: f64) -> Matrix {
        self.map(|v| v * s)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    fn zip_map(&self, other: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    /// Adds `v` to every row.
    pub fn add_row_vector(&self, v: &[f64]) -> Result<Matrix> {
        if v.len() != self.cols {
            return Err(Error::ShapeMismatch {
                expected: (1, self.cols),
                found: (1, v.len()),
            });
        }
        let mut out = self.clone();
        for row in out.data.chunks_exact_mut(self.cols.max(1)) {
            for (a, b) in row.iter_mut().zip(v) {
                *a += b;
            }
        }
        Ok(out)
    }

    pub fn col_mean(&self) -> Vec<f64> {
        let mut mean = self.col_sum();
        let inv = 1.0 / self.rows.max(1) as f64;
        mean.iter_mut().for_each(|m| *m *= inv);
        mean
    }

    pub fn col_sum(&self) -> Vec<f64> {
        let mut sum = vec![0.0; self.cols];
        for row in self.iter_rows() {
            for (s, v) in sum.iter_mut().zip(row) {
                *s += v;
            }
        }
        sum
    }

    /// Each column minus its mean.
    pub fn centered(&self) -> Matrix {
        let mean = self.col_mean();
        let neg: Vec<f64> = mean.iter().map(|m| -m).collect();
        self.add_row_vector(&neg).expect("same width")
    }

    pub fn row_norms(&self) -> Vec<f64> {
        self.iter_rows().map(norm).collect()
    }

    pub fn frobenius(&self) -> f64 {
        norm(&self.data)
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// A batch of unit-norm rows with the norms they had before normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedBatch {
    z: Matrix,
    raw_norms: Vec<f64>,
}

impl NormalizedBatch {
    pub fn z(&self) -> &Matrix {
        &self.z
    }

    pub fn raw_norms(&self) -> &[f64] {
        &self.raw_norms
    }

    pub fn rows(&self) -> usize {
        self.z.rows()
    }

    pub fn cols(&self) -> usize {
        self.z.cols()
    }

    pub fn into_parts(self) -> (Matrix, Vec<f64>) {
        (self.z, self.raw_norms)
    }

    /// Wraps rows that are already unit norm (raw norms set to 1).
    pub fn from_unit_rows(z: Matrix) -> Result<Self> {
        l2_normalize(&z)
    }
}

/// Divides every row by its l2 norm.
pub fn l2_normalize(batch: &Matrix) -> Result<NormalizedBatch> {
    let mut z = batch.clone();
    let mut raw_norms = Vec::with_capacity(batch.rows());
    for i in 0..batch.rows() {
        let row = z.row_mut(i);
        let n = norm(row);
        if !(n > ZERO_NORM) {
            return Err(Error::ZeroNormRow { row: i, norm: n });
        }
        row.iter_mut().for_each(|v| *v /= n);
        raw_norms.push(n);
    }
    Ok(NormalizedBatch { z, raw_norms })
}

/// Pulls a gradient on the normalized rows back to the raw rows:
/// `dL/dz = (I − Z Zᵀ) dL/dZ / ‖z‖` per row.
pub fn normalize_backward(grad_on_z: &Matrix, raw: &Matrix, raw_norms: &[f64]) -> Result<Matrix> {
    grad_on_z.ensure_shape(raw)?;
    if raw_norms.len() != raw.rows() {
        return Err(Error::ShapeMismatch {
            expected: (raw.rows(), 1),
            found: (raw_norms.len(), 1),
        });
    }
    let mut out = Matrix::zeros(raw.rows(), raw.cols());
    for (i, &n) in raw_norms.iter().enumerate() {
        if !(n > ZERO_NORM) {
            return Err(Error::ZeroNormRow { row: i, norm: n });
        }
        let inv = 1.0 / n;
        let g = grad_on_z.row(i);
        let r = raw.row(i);
        // Z = r / n, so Zᵀg = rᵀg / n
        let proj = dot(r, g) * inv * inv;
        for ((o, &gv), &rv) in out.row_mut(i).iter_mut().zip(g).zip(r) {
            *o = (gv - rv * proj) * inv;
        }
    }
    Ok(out)
}

pub fn cosine_sim(a: &[f64], b: &[f64]) -> Result<f64> {
    let (na, nb) = (norm(a), norm(b));
    check_norm(na)?;
    check_norm(nb)?;
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Gradient of `cosine_sim(a, b)` with respect to `a`:
/// `b/(‖a‖‖b‖) − cos(a,b)·a/‖a‖²`.
pub fn cosine_sim_grad(a: &[f64], b: &[f64]) -> Result<Vec<f64>> {
    let (na, nb) = (norm(a), norm(b));
    check_norm(na)?;
    check_norm(nb)?;
    let cos = dot(a, b) / (na * nb);
    let inv_ab = 1.0 / (na * nb);
    let c = cos / (na * na);
    Ok(a.iter()
        .zip(b)
        .map(|(&ai, &bi)| bi * inv_ab - c * ai)
        .collect())
}

fn check_norm(n: f64) -> Result<()> {
    if n > ZERO_NORM {
        Ok(())
    } else {
        Err(Error::ZeroNormVector(n))
    }
}

/// Central-difference gradient estimate of `f` at `point`.
pub fn finite_diff_grad<F>(f: F, point: &[f64], step: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> f64,
{
    if !(1e-7..=1e-3).contains(&step) {
        return Err(Error::BadStep(step));
    }
    let mut x = point.to_vec();
    let mut grad = Vec::with_capacity(point.len());
    for i in 0..point.len() {
        let orig = x[i];
        x[i] = orig + step;
        let fp = f(&x);
        x[i] = orig - step;
        let fm = f(&x);
        x[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFiniteEvaluation(i));
        }
        grad.push((fp - fm) / (2.0 * step));
    }
    Ok(grad)
}

/// Relative error used by all gradient checks: `‖a − b‖ / max(‖a‖, ‖b‖, floor)`.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let scale = norm(a).max(norm(b)).max(1e-8);
    diff / scale
}

/// Seeded ChaCha8 stream.
#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent child stream; same `(seed, stream)` gives the same child.
    pub fn fork(&self, stream: u64) -> Rng {
        let mut inner = ChaCha8Rng::seed_from_u64(self.seed);
        inner.set_stream(stream.wrapping_add(1));
        Rng {
            seed: self.seed,
            inner,
        }
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.inner);
    }

    /// A permutation of `0..n` with no fixed points (rejection on fixed points).
    pub fn derangement(&mut self, n: usize) -> Vec<usize> {
        assert!(n >= 2, "derangement needs n >= 2");
        let mut p: Vec<usize> = (0..n).collect();
        loop {
            self.shuffle(&mut p);
            if p.iter().enumerate().all(|(i, &j)| i != j) {
                return p;
            }
        }
    }
}

/// `out = A · B` for an `m×k` A and `k×n` B given by row/col strides; `out`
/// is a zeroed row-major `m×n` buffer.
fn gemm(
    (m, k, n): (usize, usize, usize),
    (a, rsa, csa): (&[f64], isize, isize),
    (b, rsb, csb): (&[f64], isize, isize),
    out: &mut [f64],
) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    // SAFETY: the strides describe exactly the row-major buffers of the
    // operand matrices, whose shapes were checked by the callers.
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
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
