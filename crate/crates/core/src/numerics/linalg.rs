//! Small dense linear algebra on top of nalgebra.

use nalgebra::{DMatrix, SymmetricEigen};

use super::mat::Mat;
use crate::error::{Error, Result};

pub fn to_dmatrix(m: &Mat) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.rows(), m.cols(), m.as_slice())
}

pub fn from_dmatrix(m: &DMatrix<f64>) -> Mat {
    let mut out = Mat::zeros(m.nrows(), m.ncols());
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            out[(i, j)] = m[(i, j)];
        }
    }
    out
}

pub fn is_symmetric(m: &Mat, tol: f64) -> bool {
    m.rows() == m.cols()
        && (0..m.rows()).all(|i| (0..i).all(|j| (m[(i, j)] - m[(j, i)]).abs() <= tol * (1.0 + m[(i, j)].abs())))
}

/// Lower Cholesky factor; errors unless `m` is symmetric positive definite.
pub fn cholesky(m: &Mat) -> Result<Mat> {
    if !is_symmetric(m, 1e-12) {
        return Err(Error::Numeric("matrix is not symmetric".into()));
    }
    to_dmatrix(m)
        .cholesky()
        .map(|c| from_dmatrix(&c.l()))
        .ok_or_else(|| Error::Numeric("matrix is not positive definite".into()))
}

pub fn spd_inverse(m: &Mat) -> Result<Mat> {
    cholesky(m)?;
    let c = to_dmatrix(m).cholesky().expect("checked above");
    Ok(from_dmatrix(&c.inverse()))
}

pub fn spd_log_det(m: &Mat) -> Result<f64> {
    let l = cholesky(m)?;
    Ok(2.0 * (0..l.rows()).map(|i| l[(i, i)].ln()).sum::<f64>())
}

/// Principal square root of a symmetric positive semi-definite matrix.
/// Eigenvalues within rounding of zero are clamped.
pub fn psd_sqrt(m: &Mat) -> Result<Mat> {
    if !is_symmetric(m, 1e-10) {
        return Err(Error::Numeric("matrix is not symmetric".into()));
    }
    let eig = SymmetricEigen::new(to_dmatrix(m));
    let scale = eig.eigenvalues.iter().fold(0.0f64, |a, &b| a.max(b.abs())).max(1.0);
    if eig.eigenvalues.iter().any(|&l| l < -1e-10 * scale) {
        return Err(Error::Numeric("matrix has a negative eigenvalue".into()));
    }
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| l.max(0.0).sqrt()));
    let r = &eig.eigenvectors * d * eig.eigenvectors.transpose();
    // Symmetrize away rounding.
    Ok(from_dmatrix(&((&r + r.transpose()) * 0.5)))
}

pub fn determinant(m: &Mat) -> f64 {
    match m.rows() {
        0 => 1.0,
        1 => m[(0, 0)],
        2 => m[(0, 0)] * m[(1, 1)] - m[(0, 1)] * m[(1, 0)],
        _ => to_dmatrix(m).determinant(),
    }
}

pub fn trace(m: &Mat) -> f64 {
    (0..m.rows().min(m.cols())).map(|i| m[(i, i)]).sum()
}
