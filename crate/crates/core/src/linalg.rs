//! Small dense linear-algebra helpers not covered by `nalgebra` directly.

use nalgebra::{DMatrix, DVector};

/// Matrix exponential by scaling and squaring with a truncated Taylor series.
///
/// The argument is scaled so that its 1-norm is at most 1/2; 24 Taylor terms
/// then leave a truncation error far below 1e-15 before squaring back.
pub fn expm(a: &DMatrix<f64>) -> DMatrix<f64> {
    assert!(a.is_square(), "expm needs a square matrix");
    let n = a.nrows();
    let norm = one_norm(a);
    let mut squarings = 0u32;
    if norm > 0.5 {
        squarings = (norm / 0.5).log2().ceil() as u32;
    }
    let scaled = a / 2f64.powi(squarings as i32);

    let mut result = DMatrix::<f64>::identity(n, n);
    let mut term = DMatrix::<f64>::identity(n, n);
    for k in 1..=24 {
        term = &term * &scaled / k as f64;
        result += &term;
        if one_norm(&term) <= f64::EPSILON * one_norm(&result) {
            break;
        }
    }
    for _ in 0..squarings {
        result = &result * &result;
    }
    result
}

/// Maximum absolute column sum.
pub fn one_norm(a: &DMatrix<f64>) -> f64 {
    a.column_iter()
        .map(|c| c.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Spectral (induced 2-) norm.
pub fn op_norm(a: &DMatrix<f64>) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    a.clone()
        .svd(false, false)
        .singular_values
        .iter()
        .cloned()
        .fold(0.0, f64::max)
}

/// Spectral radius from the complex eigenvalues of a real square matrix.
pub fn spectral_radius(a: &DMatrix<f64>) -> f64 {
    assert!(a.is_square());
    if a.nrows() == 2 {
        return spectral_radius_2x2(a[(0, 0)], a[(0, 1)], a[(1, 0)], a[(1, 1)]);
    }
    a.complex_eigenvalues()
        .iter()
        .map(|l| l.norm())
        .fold(0.0, f64::max)
}

fn spectral_radius_2x2(a: f64, b: f64, c: f64, d: f64) -> f64 {
    let half_trace = 0.5 * (a + d);
    let det = a * d - b * c;
    let disc = half_trace * half_trace - det;
    if disc >= 0.0 {
        let r = disc.sqrt();
        (half_trace + r).abs().max((half_trace - r).abs())
    } else {
        // complex pair: |lambda|^2 = det
        det.sqrt()
    }
}

/// Power-iteration estimate of the spectral radius of a nonnegative matrix.
///
/// Starts from the all-ones vector, which has a nonzero component along the
/// Perron vector of any nonnegative matrix.
pub fn power_iteration(a: &DMatrix<f64>, iterations: usize) -> f64 {
    let n = a.nrows();
    let mut v = DVector::from_element(n, 1.0 / (n as f64).sqrt());
    let mut estimate = 0.0;
    for _ in 0..iterations {
        let w = a * &v;
        let norm = w.norm();
        if norm == 0.0 {
            return 0.0;
        }
        estimate = norm / v.norm();
        v = w / norm;
    }
    estimate
}

/// Stacks `blocks` vertically into one vector.
pub fn stack(blocks: &[DVector<f64>]) -> DVector<f64> {
    let len = blocks.iter().map(|b| b.len()).sum();
    let mut out = DVector::zeros(len);
    let mut offset = 0;
    for b in blocks {
        out.rows_mut(offset, b.len()).copy_from(b);
        offset += b.len();
    }
    out
}

pub fn is_symmetric(a: &DMatrix<f64>, tol: f64) -> bool {
    a.is_square() && (a - a.transpose()).abs().max() <= tol * (1.0 + a.abs().max())
}

/// Positive definiteness through a Cholesky attempt on the symmetric part.
pub fn is_positive_definite(a: &DMatrix<f64>) -> bool {
    let sym = (a + a.transpose()) * 0.5;
    sym.cholesky().is_some()
}

/// Positive semidefiniteness through the smallest symmetric eigenvalue.
pub fn is_positive_semidefinite(a: &DMatrix<f64>, tol: f64) -> bool {
    let sym = (a + a.transpose()) * 0.5;
    let scale = 1.0 + sym.abs().max();
    sym.symmetric_eigenvalues()
        .iter()
        .all(|&l| l >= -tol * scale)
}
