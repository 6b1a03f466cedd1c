//! Small dense helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

pub const SYMMETRY_TOL: f64 = 1e-12;
pub const PSD_TOL: f64 = 1e-12;

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

pub fn check_symmetric(m: &DMatrix<f64>, tol: f64) -> Result<()> {
    if !m.is_square() {
        return Err(Error::InvalidCovariance(format!(
            "matrix is {}x{}, not square",
            m.nrows(),
            m.ncols()
        )));
    }
    let asym = (m - m.transpose()).amax();
    if asym > tol {
        return Err(Error::InvalidCovariance(format!("asymmetry {asym:e} exceeds {tol:e}")));
    }
    Ok(())
}

/// Symmetric eigendecomposition with eigenvalues clamped at zero, returning `M^{1/2}`.
pub fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    psd_map(m, |l| l.max(0.0).sqrt())
}

pub fn psd_map(m: &DMatrix<f64>, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(symmetrize(m));
    let mapped = DVector::from_iterator(eig.eigenvalues.len(), eig.eigenvalues.iter().map(|&l| f(l)));
    &eig.eigenvectors * DMatrix::from_diagonal(&mapped) * eig.eigenvectors.transpose()
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(symmetrize(m)).eigenvalues.min()
}

pub fn eigenvalues(m: &DMatrix<f64>) -> Vec<f64> {
    SymmetricEigen::new(symmetrize(m)).eigenvalues.iter().copied().collect()
}

/// Largest singular value.
pub fn op_norm(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.singular_values().max()
}

/// `x - ln(1 + x)` without cancellation for small `x`; with `x = lambda - 1` this is
/// the per-eigenvalue term `lambda - 1 - ln lambda` of a Gaussian relative entropy.
pub fn entropy_gap(x: f64) -> f64 {
    if x.abs() < 1e-4 {
        // x^2/2 - x^3/3 + x^4/4 - x^5/5
        x * x * (0.5 - x * (1.0 / 3.0 - x * (0.25 - x * 0.2)))
    } else {
        x - x.ln_1p()
    }
}

pub fn matrix_from_rows(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let nrows = rows.len();
    if nrows == 0 {
        return Err(Error::Config("empty matrix".into()));
    }
    let ncols = rows[0].len();
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::Config("ragged matrix rows".into()));
    }
    if rows.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Config("non-finite matrix entry".into()));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sqrt_squares_back() {
        let m = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let r = psd_sqrt(&m);
        assert!((&r * &r - &m).amax() < 1e-13);
    }

    #[test]
    fn sqrt_clamps_tiny_negative() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1e-13]);
        let r = psd_sqrt(&m);
        assert_eq!(r[(1, 1)], 0.0);
    }

    #[test]
    fn entropy_gap_is_accurate_across_branch() {
        for &l in &[1.0 + 1e-6, 1.0 - 1e-5, 1.00009, 1.5, 0.3] {
            let x: f64 = l - 1.0;
            let reference = if x.abs() > 1e-3 { x - x.ln_1p() } else {
                // long series as reference
                let mut s = 0.0;
                for k in 2..30 {
                    s += (-1f64).powi(k) * x.powi(k) / k as f64;
                }
                s
            };
            assert!((entropy_gap(x) - reference).abs() <= 1e-15 * reference.abs().max(1e-300) + 1e-30,
                "lambda={l}");
        }
    }
}
