//! Dense Cholesky factorisation with a jitter ladder, and triangular solves.
//!
//! Kernel Gram matrices are symmetric positive definite in exact arithmetic but
//! can lose definiteness in floating point; when the plain factorisation fails
//! we retry with jitter proportional to the mean diagonal.

use super::Tensor;
use crate::error::{Error, Result};

const JITTER_SCALES: [f64; 3] = [1e-8, 1e-6, 1e-4];

/// Lower-triangular Cholesky factor of a symmetric positive definite matrix.
/// On failure, retries with `scale * mean(diag)` added to the diagonal for
/// each scale in the jitter ladder before giving up.
pub fn cholesky(a: &Tensor, n: usize) -> Result<Tensor> {
    if a.numel() != n * n {
        return Err(Error::shape("cholesky", format!("expected {n}x{n}")));
    }
    let mean_diag = (0..n).map(|i| a.get2(i, i)).sum::<f64>() / n.max(1) as f64;
    let mut attempted = Vec::new();
    for jitter in std::iter::once(0.0).chain(JITTER_SCALES.iter().map(|s| s * mean_diag)) {
        attempted.push(jitter);
        if let Some(l) = try_factor(a.data(), n, jitter) {
            return Tensor::matrix(n, n, l);
        }
    }
    Err(Error::CholeskyFailed { attempted })
}

fn try_factor(a: &[f64], n: usize, jitter: f64) -> Option<Vec<f64>> {
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[i * n + j];
            if i == j {
                s += jitter;
            }
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if s <= 0.0 || !s.is_finite() {
                    return None;
                }
                l[i * n + i] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    Some(l)
}

/// Solve L x = b for lower-triangular L.
pub fn solve_lower(l: &Tensor, b: &[f64]) -> Vec<f64> {
    let n = l.rows();
    assert_eq!(b.len(), n);
    let mut x = b.to_vec();
    for i in 0..n {
        for k in 0..i {
            x[i] -= l.get2(i, k) * x[k];
        }
        x[i] /= l.get2(i, i);
    }
    x
}

/// Solve Lᵀ x = b for lower-triangular L.
pub fn solve_upper(l: &Tensor, b: &[f64]) -> Vec<f64> {
    let n = l.rows();
    assert_eq!(b.len(), n);
    let mut x = b.to_vec();
    for i in (0..n).rev() {
        for k in i + 1..n {
            x[i] -= l.get2(k, i) * x[k];
        }
        x[i] /= l.get2(i, i);
    }
    x
}
