//! Small dense linear-algebra helpers shared by the estimators.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};

/// Eigenvalues below this (after symmetrisation) mark a covariance as not PSD.
pub const PSD_TOLERANCE: f64 = 1e-10;

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

pub fn check_square(m: &DMatrix<f64>, context: &'static str) -> Result<usize> {
    if m.nrows() != m.ncols() {
        return Err(Error::shape(context, "square matrix", format!("{}x{}", m.nrows(), m.ncols())));
    }
    Ok(m.nrows())
}

pub fn check_same_shape(a: &DMatrix<f64>, b: &DMatrix<f64>, context: &'static str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            context,
            format!("{}x{}", a.nrows(), a.ncols()),
            format!("{}x{}", b.nrows(), b.ncols()),
        ));
    }
    Ok(())
}

/// Symmetric eigendecomposition that rejects matrices with eigenvalues below
/// `-PSD_TOLERANCE`.
pub fn psd_eigen(m: &DMatrix<f64>) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    check_square(m, "psd_eigen")?;
    let eig = SymmetricEigen::new(symmetrize(m));
    let min = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    if min < -PSD_TOLERANCE {
        return Err(Error::NotPositiveSemidefinite { min_eigenvalue: min });
    }
    Ok(eig)
}

/// `(C + reg·I)^{-1/2}` with eigenvalues clamped at `max(reg, 1e-12)`.
pub fn inverse_sqrt_psd(c: &DMatrix<f64>, reg: f64) -> Result<DMatrix<f64>> {
    let eig = psd_eigen(c)?;
    let floor = reg.max(1e-12);
    let scaled = eig.eigenvalues.map(|l| 1.0 / (l + reg).max(floor).sqrt());
    let v = &eig.eigenvectors;
    Ok(v * DMatrix::from_diagonal(&scaled) * v.transpose())
}

/// Ratio of extreme eigenvalues of a symmetric matrix (infinite if singular).
pub fn symmetric_condition(m: &DMatrix<f64>) -> f64 {
    let eig = SymmetricEigen::new(symmetrize(m));
    let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
    for &l in eig.eigenvalues.iter() {
        lo = lo.min(l.abs());
        hi = hi.max(l.abs());
    }
    if lo == 0.0 {
        f64::INFINITY
    } else {
        hi / lo
    }
}

/// Solves `(A + reg·I) X = B` for symmetric positive-definite `A + reg·I`.
pub fn spd_solve(a: &DMatrix<f64>, reg: f64, b: &DMatrix<f64>, what: &'static str) -> Result<DMatrix<f64>> {
    let d = check_square(a, what)?;
    if b.nrows() != d {
        return Err(Error::shape(what, format!("{d} rows"), format!("{} rows", b.nrows())));
    }
    let shifted = symmetrize(a) + DMatrix::identity(d, d) * reg;
    let condition = symmetric_condition(&shifted);
    if !condition.is_finite() || condition > 1e12 {
        return Err(Error::Singular { what, condition });
    }
    let chol = shifted
        .cholesky()
        .ok_or(Error::Singular { what, condition })?;
    Ok(chol.solve(b))
}

pub fn frobenius(m: &DMatrix<f64>) -> f64 {
    m.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub fn all_finite(m: &DMatrix<f64>) -> bool {
    m.iter().all(|v| v.is_finite())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inverse_sqrt_of_diagonal() {
        let c = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![4.0, 0.25]));
        let r = inverse_sqrt_psd(&c, 0.0).unwrap();
        assert!((r[(0, 0)] - 0.5).abs() < 1e-14);
        assert!((r[(1, 1)] - 2.0).abs() < 1e-14);
    }

    #[test]
    fn rejects_indefinite() {
        let c = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(matches!(psd_eigen(&c), Err(Error::NotPositiveSemidefinite { .. })));
    }

    #[test]
    fn singular_solve_is_reported() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let b = DMatrix::identity(2, 2);
        assert!(matches!(spd_solve(&a, 0.0, &b, "test"), Err(Error::Singular { .. })));
        assert!(spd_solve(&a, 1e-3, &b, "test").is_ok());
    }
}
