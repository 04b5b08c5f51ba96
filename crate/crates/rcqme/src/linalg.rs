//! Small dense complex linear algebra helpers shared across the crate.
//!
//! Matrices are `ndarray::Array2<Complex64>` throughout; the Hermitian
//! eigensolver bridges to `nalgebra` and returns eigenvalues in ascending
//! order with the matching eigenvector columns.

use nalgebra::DMatrix;
use ndarray::{Array1, Array2};
use num_complex::Complex64;
use thiserror::Error;

pub type CMat = Array2<Complex64>;

pub const C_ZERO: Complex64 = Complex64::new(0.0, 0.0);
pub const C_ONE: Complex64 = Complex64::new(1.0, 0.0);

#[derive(Debug, Error)]
pub enum LinalgError {
    #[error("matrix is not square: {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
    #[error("matrix is not Hermitian (max |A - A^dag| = {0:.3e})")]
    NotHermitian(f64),
}

pub fn identity(n: usize) -> CMat {
    Array2::from_diag_elem(n, C_ONE)
}

pub fn dagger(m: &CMat) -> CMat {
    m.t().mapv(|z| z.conj())
}

pub fn mat_trace(m: &CMat) -> Complex64 {
    m.diag().sum()
}

/// Largest entry magnitude.
pub fn max_abs(m: &CMat) -> f64 {
    m.iter().map(|z| z.norm()).fold(0.0, f64::max)
}

pub fn max_abs_diff(a: &CMat, b: &CMat) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).norm())
        .fold(0.0, f64::max)
}

/// max_{ij} |A_ij - conj(A_ji)|.
pub fn hermiticity_error(m: &CMat) -> f64 {
    let n = m.nrows();
    let mut err: f64 = 0.0;
    for i in 0..n {
        for j in i..n {
            err = err.max((m[(i, j)] - m[(j, i)].conj()).norm());
        }
    }
    err
}

/// Eigendecomposition of a Hermitian matrix.
///
/// Returns eigenvalues in ascending order and the unitary whose columns are
/// the corresponding eigenvectors, so that `U diag(E) U^dag = A`.
pub fn eigh(m: &CMat) -> Result<(Array1<f64>, CMat), LinalgError> {
    let (rows, cols) = m.dim();
    if rows != cols {
        return Err(LinalgError::NotSquare { rows, cols });
    }
    let herm_err = hermiticity_error(m);
    if herm_err > 1e-10 * max_abs(m).max(1.0) {
        return Err(LinalgError::NotHermitian(herm_err));
    }
    let dm = DMatrix::from_fn(rows, cols, |i, j| m[(i, j)]);
    let eig = dm.symmetric_eigen();

    let mut order: Vec<usize> = (0..rows).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));

    let eigvals = Array1::from_iter(order.iter().map(|&k| eig.eigenvalues[k]));
    let u = Array2::from_shape_fn((rows, cols), |(i, j)| eig.eigenvectors[(i, order[j])]);
    Ok((eigvals, u))
}

/// Smallest eigenvalue of a Hermitian matrix (positivity diagnostic).
pub fn min_eigenvalue(m: &CMat) -> Result<f64, LinalgError> {
    let (vals, _) = eigh(m)?;
    Ok(vals[0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn sample_hermitian() -> CMat {
        array![
            [Complex64::new(2.0, 0.0), Complex64::new(0.3, -0.7), Complex64::new(0.0, 1.1)],
            [Complex64::new(0.3, 0.7), Complex64::new(-1.0, 0.0), Complex64::new(0.5, 0.0)],
            [Complex64::new(0.0, -1.1), Complex64::new(0.5, 0.0), Complex64::new(0.4, 0.0)],
        ]
    }

    #[test]
    fn eigh_reconstructs_and_sorts() {
        let a = sample_hermitian();
        let (vals, u) = eigh(&a).unwrap();
        assert!(vals.windows(2).into_iter().all(|w| w[0] <= w[1]));
        let d = Array2::from_diag(&vals.mapv(|v| Complex64::new(v, 0.0)));
        let rec = u.dot(&d).dot(&dagger(&u));
        assert!(max_abs_diff(&rec, &a) < 1e-12);
        let uu = dagger(&u).dot(&u);
        assert!(max_abs_diff(&uu, &identity(3)) < 1e-12);
    }

    #[test]
    fn eigh_rejects_non_hermitian() {
        let mut a = sample_hermitian();
        a[(0, 1)] = Complex64::new(9.0, 9.0);
        assert!(matches!(eigh(&a), Err(LinalgError::NotHermitian(_))));
    }

    #[test]
    fn trace_and_dagger() {
        let a = sample_hermitian();
        assert!((mat_trace(&a) - Complex64::new(1.4, 0.0)).norm() < 1e-14);
        assert!(max_abs_diff(&dagger(&a), &a) < 1e-14);
    }
}
