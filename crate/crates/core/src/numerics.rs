//! Dense vector and matrix primitives, plus the finite-difference gradient
//! oracle that every analytic gradient in the crate is checked against.

use std::ops::Deref;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Norm floor below which cosine similarity refuses to answer.
pub const NORM_EPS: f64 = 1e-12;

/// Default central-difference step.
pub const FD_STEP: f64 = 1e-5;

/// A fixed-length vector of finite reals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Vector(Vec<f64>);

impl Vector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("vector entry {pos} is {}", values[pos])));
        }
        Ok(Self(values))
    }

    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn dot(&self, other: &[f64]) -> f64 {
        dot(&self.0, other)
    }

    pub fn norm(&self) -> f64 {
        self.dot(&self.0).sqrt()
    }

    /// Returns `c * self`.
    pub fn scaled(&self, c: f64) -> Result<Self> {
        Self::new(self.0.iter().map(|v| v * c).collect())
    }
}

impl Deref for Vector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl AsRef<[f64]> for Vector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

impl TryFrom<Vec<f64>> for Vector {
    type Error = Error;

    fn try_from(values: Vec<f64>) -> Result<Self> {
        Self::new(values)
    }
}

impl From<Vector> for Vec<f64> {
    fn from(v: Vector) -> Self {
        v.0
    }
}

/// Row-major dense matrix of finite reals.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::Shape(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("matrix entry".into()));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Stacks equal-length slices as rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::Shape(format!("row {i} has length {}, expected {cols}", r.len())));
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[f64]> {
        // chunks_exact panics on zero; an empty-column matrix has no meaningful rows
        self.data.chunks_exact(self.cols.max(1))
    }

    /// Rows `start..end` as a new matrix.
    pub fn slice_rows(&self, start: usize, end: usize) -> Matrix {
        Matrix {
            rows: end - start,
            cols: self.cols,
            data: self.data[start * self.cols..end * self.cols].to_vec(),
        }
    }

    /// Vertical concatenation.
    pub fn vstack(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(Error::Shape(format!("vstack {} vs {} columns", self.cols, other.cols)));
        }
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Ok(Matrix { rows: self.rows + other.rows, cols: self.cols, data })
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::Shape(format!(
                "{}x{} minus {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Ok(Matrix { rows: self.rows, cols: self.cols, data })
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub(crate) fn map_in_place(&mut self, f: impl Fn(f64) -> f64) {
        for v in &mut self.data {
            *v = f(*v);
        }
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn check_pair(a: &[f64], b: &[f64]) -> Result<(f64, f64)> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("cosine of lengths {} and {}", a.len(), b.len())));
    }
    let (na, nb) = (norm(a), norm(b));
    if na <= NORM_EPS || nb <= NORM_EPS {
        return Err(Error::Degenerate(format!("cosine of near-zero vector (norms {na:e}, {nb:e})")));
    }
    Ok((na, nb))
}

/// Cosine similarity, clamped to [-1, 1].
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    let (na, nb) = check_pair(a, b)?;
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Cosine plus its gradients with respect to `a` and `b`.
///
/// The gradients are those of the unclamped expression so that they stay
/// consistent with finite differences at |cos| = 1.
pub fn cosine_with_grad(a: &[f64], b: &[f64]) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let (na, nb) = check_pair(a, b)?;
    let inv = 1.0 / (na * nb);
    let c = dot(a, b) * inv;
    let ga = a.iter().zip(b).map(|(x, y)| y * inv - c * x / (na * na)).collect();
    let gb = a.iter().zip(b).map(|(x, y)| x * inv - c * y / (nb * nb)).collect();
    Ok((c.clamp(-1.0, 1.0), ga, gb))
}

/// Unbiased sample covariance of the rows of `samples` (divisor n - 1).
pub fn covariance(samples: &Matrix) -> Result<Matrix> {
    let (n, d) = (samples.rows(), samples.cols());
    if n < 2 {
        return Err(Error::InsufficientSamples { needed: 2, got: n });
    }
    let mean = column_mean(samples);
    let mut cov = Matrix::zeros(d, d);
    for row in samples.row_iter() {
        for i in 0..d {
            let di = row[i] - mean[i];
            for j in i..d {
                cov.data[i * d + j] += di * (row[j] - mean[j]);
            }
        }
    }
    let scale = 1.0 / (n as f64 - 1.0);
    for i in 0..d {
        for j in i..d {
            let v = cov.data[i * d + j] * scale;
            cov.data[i * d + j] = v;
            cov.data[j * d + i] = v;
        }
    }
    Ok(cov)
}

pub fn column_mean(samples: &Matrix) -> Vec<f64> {
    let mut mean = vec![0.0; samples.cols()];
    for row in samples.row_iter() {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    let n = samples.rows().max(1) as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    mean
}

/// Sum of squared entries.
pub fn frobenius_sq(m: &Matrix) -> f64 {
    m.data.iter().map(|v| v * v).sum()
}

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
///
/// Returns eigenvalues in descending order and the matching unit eigenvectors
/// (one per entry of the second vector).
pub fn symmetric_eigen(m: &Matrix) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let n = m.rows();
    if m.cols() != n {
        return Err(Error::Shape(format!("eigen of non-square {}x{}", n, m.cols())));
    }
    let mut a = m.data.clone();
    let mut v = Matrix::identity(n).data;
    let scale = m.max_abs().max(f64::MIN_POSITIVE);
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i * n + j] * a[i * n + j])
            .sum();
        if off.sqrt() <= 1e-15 * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq.abs() <= f64::MIN_POSITIVE {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[j * n + j].total_cmp(&a[i * n + i]).then(i.cmp(&j)));
    let values = order.iter().map(|&i| a[i * n + i]).collect();
    let vectors = order.iter().map(|&i| (0..n).map(|k| v[k * n + i]).collect()).collect();
    Ok((values, vectors))
}

/// Central-difference gradient of `f` at `p`.
pub fn finite_diff_grad<F>(mut f: F, p: &[f64], h: f64) -> Result<Vector>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::InvalidConfig(format!("finite-difference step must be positive, got {h}")));
    }
    let mut x = p.to_vec();
    let mut grad = Vec::with_capacity(p.len());
    for i in 0..p.len() {
        let orig = x[i];
        x[i] = orig + h;
        let fp = f(&x)?;
        x[i] = orig - h;
        let fm = f(&x)?;
        x[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFinite(format!("objective at coordinate {i}")));
        }
        grad.push((fp - fm) / (2.0 * h));
    }
    Vector::new(grad)
}

/// Agreement between an analytic and a numerical gradient.
///
/// `max_rel_err` is the worst absolute deviation divided by the larger of the
/// two gradients' infinity norms, so near-zero coordinates are judged on the
/// scale of the whole gradient.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub param_count: usize,
}

impl GradCheckReport {
    pub fn compare(analytic: &[f64], numeric: &[f64]) -> Result<Self> {
        if analytic.len() != numeric.len() {
            return Err(Error::Shape(format!(
                "gradient lengths {} vs {}",
                analytic.len(),
                numeric.len()
            )));
        }
        let inf = |g: &[f64]| g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let scale = inf(analytic).max(inf(numeric));
        let max_abs_err = analytic.iter().zip(numeric).fold(0.0f64, |m, (a, n)| m.max((a - n).abs()));
        let max_rel_err = if scale > 0.0 { max_abs_err / scale } else { 0.0 };
        Ok(Self { max_rel_err, max_abs_err, param_count: analytic.len() })
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err <= tol
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_basics() {
        let x = [0.3, -1.2, 4.0];
        assert!((cosine(&x, &x).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
    }

    #[test]
    fn cosine_reference_value() {
        // 32 / sqrt(14 * 77), evaluated by hand to 20 digits
        let expected = 0.974_631_846_197_076_2;
        let got = cosine(&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]).unwrap();
        assert!((got - expected).abs() < 1e-15, "{got}");
    }

    #[test]
    fn cosine_rejects_zero_vector() {
        assert!(matches!(cosine(&[0.0, 0.0], &[1.0, 0.0]), Err(Error::Degenerate(_))));
        assert!(matches!(cosine(&[1.0], &[1.0, 0.0]), Err(Error::Shape(_))));
    }

    #[test]
    fn covariance_examples() {
        let same = Matrix::from_rows(&[[1.0, 2.0], [1.0, 2.0]]).unwrap();
        assert_eq!(frobenius_sq(&covariance(&same).unwrap()), 0.0);

        let rows = Matrix::from_rows(&[[0.0, 0.0], [2.0, 0.0]]).unwrap();
        assert_eq!(covariance(&rows).unwrap().data(), &[2.0, 0.0, 0.0, 0.0]);

        let one = Matrix::from_rows(&[[1.0, 2.0]]).unwrap();
        assert!(matches!(covariance(&one), Err(Error::InsufficientSamples { .. })));
    }

    #[test]
    fn frobenius_examples() {
        assert_eq!(frobenius_sq(&Matrix::zeros(3, 3)), 0.0);
        assert_eq!(frobenius_sq(&Matrix::identity(3)), 3.0);
        let m = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap();
        assert_eq!(frobenius_sq(&m), 30.0);
        assert_eq!(frobenius_sq(&m.sub(&m).unwrap()), 0.0);
    }

    #[test]
    fn fd_examples() {
        let g = finite_diff_grad(|p| Ok(p.iter().map(|v| v * v).sum()), &[1.0, -2.0], FD_STEP).unwrap();
        assert!((g[0] - 2.0).abs() < 1e-6 && (g[1] + 4.0).abs() < 1e-6);
        let g = finite_diff_grad(|_| Ok(3.5), &[1.0, 2.0, 3.0], FD_STEP).unwrap();
        assert!(g.iter().all(|v| *v == 0.0));
        assert!(finite_diff_grad(|_| Ok(f64::NAN), &[1.0], FD_STEP).is_err());
        assert!(finite_diff_grad(|_| Ok(0.0), &[1.0], 0.0).is_err());
    }

    #[test]
    fn cosine_grad_matches_fd() {
        let a = [0.4, -1.1, 2.0];
        let b = [1.5, 0.2, -0.7];
        let (_, ga, gb) = cosine_with_grad(&a, &b).unwrap();
        let na = finite_diff_grad(|p| cosine(p, &b), &a, FD_STEP).unwrap();
        let nb = finite_diff_grad(|p| cosine(&a, p), &b, FD_STEP).unwrap();
        assert!(GradCheckReport::compare(&ga, &na).unwrap().passes(1e-8));
        assert!(GradCheckReport::compare(&gb, &nb).unwrap().passes(1e-8));
    }

    #[test]
    fn eigen_of_diagonal_and_rotated() {
        let m = Matrix::from_rows(&[[1.0, 0.0], [0.0, 3.0]]).unwrap();
        let (vals, vecs) = symmetric_eigen(&m).unwrap();
        assert_eq!(vals, vec![3.0, 1.0]);
        assert!((vecs[0][1].abs() - 1.0).abs() < 1e-15);

        let m = Matrix::from_rows(&[[2.0, 1.0], [1.0, 2.0]]).unwrap();
        let (vals, _) = symmetric_eigen(&m).unwrap();
        assert!((vals[0] - 3.0).abs() < 1e-12 && (vals[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn vector_rejects_nan() {
        assert!(Vector::new(vec![1.0, f64::INFINITY]).is_err());
        let v: std::result::Result<Vector, _> = serde_json::from_str("[1.0, 2.0]");
        assert_eq!(v.unwrap().as_slice(), &[1.0, 2.0]);
    }
}
