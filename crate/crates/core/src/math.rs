//! Dense linear algebra, activations, losses and a central-difference
//! gradient oracle.
//!
//! Everything here is double precision and row-major. The kernels are plain
//! loops written so the compiler can vectorize them; layer sizes in this crate
//! never exceed a few thousand columns.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Floor applied to the target probability inside [`cross_entropy`].
pub const PROB_FLOOR: f64 = 1e-12;

/// A dense vector of reals.
pub type Vector = Vec<f64>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MathError {
    #[error("empty logits")]
    EmptyLogits,
    #[error("target index {target} out of range for {dim} classes")]
    TargetOutOfRange { target: usize, dim: usize },
    #[error("matrix data length {len} does not match {rows}x{cols}")]
    BadShape { rows: usize, cols: usize, len: usize },
    #[error("non-finite entry at index {0}")]
    NonFinite(usize),
    #[error("non-finite function value while perturbing coordinate {0}")]
    NonFiniteAt(usize),
    #[error("step size must be positive, got {0}")]
    BadStep(f64),
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Builds a matrix from row-major data, rejecting bad lengths and
    /// non-finite entries.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, MathError> {
        if data.len() != rows * cols {
            return Err(MathError::BadShape {
                rows,
                cols,
                len: data.len(),
            });
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(MathError::NonFinite(i));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Matrix { rows, cols, data }
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
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// `out += self * x`
    pub fn matvec_add(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.cols);
        debug_assert_eq!(out.len(), self.rows);
        for (o, row) in out.iter_mut().zip(self.data.chunks_exact(self.cols.max(1))) {
            *o += dot(row, x);
        }
    }

    /// `self * x` as a fresh vector.
    pub fn matvec(&self, x: &[f64]) -> Vector {
        let mut out = vec![0.0; self.rows];
        self.matvec_add(x, &mut out);
        out
    }

    /// `out += selfᵀ * y`
    pub fn matvec_t_add(&self, y: &[f64], out: &mut [f64]) {
        debug_assert_eq!(y.len(), self.rows);
        debug_assert_eq!(out.len(), self.cols);
        for (&yi, row) in y.iter().zip(self.data.chunks_exact(self.cols.max(1))) {
            if yi != 0.0 {
                axpy(yi, row, out);
            }
        }
    }

    /// `self += y xᵀ`
    pub fn add_outer(&mut self, y: &[f64], x: &[f64]) {
        debug_assert_eq!(y.len(), self.rows);
        debug_assert_eq!(x.len(), self.cols);
        for (&yi, row) in y.iter().zip(self.data.chunks_exact_mut(self.cols.max(1))) {
            if yi != 0.0 {
                axpy(yi, x, row);
            }
        }
    }
}

/// Dot product with four independent accumulators.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; 4];
    let chunks = n / 4;
    for k in 0..chunks {
        let i = 4 * k;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in 4 * chunks..n {
        s += a[i] * b[i];
    }
    s
}

/// `y += alpha * x`
#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Max-subtracted softmax.
pub fn softmax(logits: &[f64]) -> Result<Vector, MathError> {
    if logits.is_empty() {
        return Err(MathError::EmptyLogits);
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vector = logits.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for v in &mut out {
        *v /= sum;
    }
    Ok(out)
}

/// `-ln(max(probs[target], PROB_FLOOR))`
pub fn cross_entropy(probs: &[f64], target: usize) -> Result<f64, MathError> {
    let p = *probs.get(target).ok_or(MathError::TargetOutOfRange {
        target,
        dim: probs.len(),
    })?;
    Ok(-p.max(PROB_FLOOR).ln())
}

/// Central-difference gradient of `f` at `params`.
pub fn finite_diff_grad<F>(mut f: F, params: &[f64], eps: f64) -> Result<Vector, MathError>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(eps > 0.0) {
        return Err(MathError::BadStep(eps));
    }
    let mut p = params.to_vec();
    let mut grad = Vec::with_capacity(p.len());
    for i in 0..p.len() {
        let orig = p[i];
        p[i] = orig + eps;
        let up = f(&p);
        p[i] = orig - eps;
        let down = f(&p);
        p[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(MathError::NonFiniteAt(i));
        }
        grad.push((up - down) / (2.0 * eps));
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn sigmoid_values() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!((sigmoid(50.0) - 1.0).abs() < 1e-12);
        assert!((sigmoid(3f64.ln()) - 0.75).abs() < 1e-15);
        assert!(sigmoid(-800.0) >= 0.0);
        assert!(sigmoid(-1.0) < sigmoid(-0.5));
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&[0.0, 0.0]).unwrap(), vec![0.5, 0.5]);
        let p = softmax(&[2f64.ln(), 0.0]).unwrap();
        assert!((p[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((p[1] - 1.0 / 3.0).abs() < 1e-15);
        let p = softmax(&[1000.0, 0.0]).unwrap();
        assert!((p[0] - 1.0).abs() < 1e-12 && p[1] < 1e-12);
        assert!(p.iter().all(|v| v.is_finite()));
        assert_eq!(softmax(&[]), Err(MathError::EmptyLogits));
    }

    #[test]
    fn cross_entropy_examples() {
        assert_eq!(cross_entropy(&[1.0, 0.0], 0).unwrap(), 0.0);
        assert!((cross_entropy(&[0.5, 0.5], 1).unwrap() - 2f64.ln()).abs() < 1e-15);
        let floored = cross_entropy(&[0.0, 1.0], 0).unwrap();
        assert!((floored - 27.631021115928547).abs() < 1e-9);
        assert!(matches!(
            cross_entropy(&[0.5, 0.5], 2),
            Err(MathError::TargetOutOfRange { target: 2, dim: 2 })
        ));
    }

    #[test]
    fn finite_diff_examples() {
        let g = finite_diff_grad(|p| p[0] * p[0], &[3.0], 1e-5).unwrap();
        assert!((g[0] - 6.0).abs() < 1e-8);
        let g = finite_diff_grad(|_| 4.2, &[1.0, -2.0, 0.5], 1e-5).unwrap();
        assert_eq!(g, vec![0.0; 3]);
        let g = finite_diff_grad(|p| sigmoid(p[0]), &[0.0], 1e-5).unwrap();
        assert!((g[0] - 0.25).abs() < 1e-8);
    }

    #[test]
    fn finite_diff_reports_bad_coordinate() {
        let err = finite_diff_grad(
            |p| if p[1] > 1.0 { f64::NAN } else { p[0] },
            &[0.0, 1.0],
            1e-3,
        )
        .unwrap_err();
        assert_eq!(err, MathError::NonFiniteAt(1));
        assert_eq!(
            finite_diff_grad(|p| p[0], &[0.0], 0.0).unwrap_err(),
            MathError::BadStep(0.0)
        );
    }

    #[test]
    fn matrix_kernels_match_naive() {
        let m = Matrix::from_fn(3, 5, |r, c| (r as f64 + 1.0) * 0.3 - c as f64 * 0.7);
        let x = [0.5, -1.0, 2.0, 0.25, 3.0];
        let y = [1.0, -2.0, 0.5];
        let got = m.matvec(&x);
        for r in 0..3 {
            let want: f64 = (0..5).map(|c| m.get(r, c) * x[c]).sum();
            assert!((got[r] - want).abs() < 1e-12);
        }
        let mut t = vec![0.0; 5];
        m.matvec_t_add(&y, &mut t);
        for c in 0..5 {
            let want: f64 = (0..3).map(|r| m.get(r, c) * y[r]).sum();
            assert!((t[c] - want).abs() < 1e-12);
        }
        let mut o = Matrix::zeros(3, 5);
        o.add_outer(&y, &x);
        assert!((o.get(2, 4) - 1.5).abs() < 1e-15);
    }

    #[test]
    fn from_vec_rejects_bad_input() {
        assert!(matches!(
            Matrix::from_vec(2, 2, vec![1.0; 3]),
            Err(MathError::BadShape { .. })
        ));
        assert_eq!(
            Matrix::from_vec(1, 2, vec![1.0, f64::INFINITY]),
            Err(MathError::NonFinite(1))
        );
    }

    proptest! {
        #[test]
        fn softmax_on_simplex(v in proptest::collection::vec(-1e3f64..1e3, 1..12), c in -50.0f64..50.0) {
            let p = softmax(&v).unwrap();
            let s: f64 = p.iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
            prop_assert!(p.iter().all(|&x| x >= 0.0));
            let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
            let q = softmax(&shifted).unwrap();
            for (a, b) in p.iter().zip(&q) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }

        #[test]
        fn cross_entropy_nonnegative(v in proptest::collection::vec(-20f64..20.0, 1..8), t in 0usize..8) {
            let p = softmax(&v).unwrap();
            let t = t % p.len();
            let ce = cross_entropy(&p, t).unwrap();
            prop_assert!(ce >= 0.0);
        }

        #[test]
        fn finite_diff_exact_on_quadratics(a in -3f64..3.0, b in -3f64..3.0, c in -3f64..3.0, x in -5f64..5.0, y in -5f64..5.0) {
            let eps = 1e-3;
            let f = |p: &[f64]| a * p[0] * p[0] + b * p[0] * p[1] + c * p[1] + 1.0;
            let g = finite_diff_grad(f, &[x, y], eps).unwrap();
            // Central differences are exact for quadratics up to rounding.
            prop_assert!((g[0] - (2.0 * a * x + b * y)).abs() < eps * eps + 1e-8);
            prop_assert!((g[1] - (b * x + c)).abs() < eps * eps + 1e-8);
        }
    }
}
