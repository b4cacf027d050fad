use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

pub(crate) fn symmetrize(m: DMatrix<f64>) -> DMatrix<f64> {
    (&m + m.transpose()) * 0.5
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(symmetrize(m.clone()))
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

/// Jacobi-scaled Cholesky inverse of a symmetric positive-definite matrix.
pub fn inverse_spd(m: &DMatrix<f64>, what: &'static str) -> Result<DMatrix<f64>> {
    let n = m.nrows();
    let scale: Vec<f64> = (0..n)
        .map(|k| {
            let d = m[(k, k)];
            if d > 0.0 && d.is_finite() {
                1.0 / d.sqrt()
            } else {
                1.0
            }
        })
        .collect();
    let scaled = DMatrix::from_fn(n, n, |i, j| m[(i, j)] * scale[i] * scale[j]);
    let scaled = symmetrize(scaled);
    let Some(chol) = scaled.clone().cholesky() else {
        return Err(Error::Singular {
            what,
            min_eigenvalue: min_eigenvalue(m),
        });
    };
    let inv = chol.inverse();
    let out = DMatrix::from_fn(n, n, |i, j| inv[(i, j)] * scale[i] * scale[j]);
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::Singular {
            what,
            min_eigenvalue: min_eigenvalue(m),
        });
    }
    Ok(symmetrize(out))
}

pub(crate) fn solve_spd(m: &DMatrix<f64>, rhs: &DVector<f64>, what: &'static str) -> Result<DVector<f64>> {
    match m.clone().cholesky() {
        Some(chol) => Ok(chol.solve(rhs)),
        None => Err(Error::Singular {
            what,
            min_eigenvalue: min_eigenvalue(m),
        }),
    }
}
