//! Thin wrappers over faer for the SPD algebra the engine needs.

use faer::linalg::matmul::triangular::{self, BlockStructure};
use faer::linalg::matmul::matmul;
use faer::linalg::triangular_solve::solve_lower_triangular_in_place;
use faer::{Accum, Mat, MatRef, Par, Side};

use crate::error::{Error, Result};

/// Relative diagonal jitter added on the single retry after a failed factorization.
pub const JITTER: f64 = 1e-10;

/// Lower Cholesky factor of a symmetric matrix; only the lower triangle is read.
pub(crate) fn cholesky(m: MatRef<'_, f64>, what: &str) -> Result<Mat<f64>> {
    if let Ok(llt) = m.llt(Side::Lower) {
        return Ok(llt.L().to_owned());
    }
    let n = m.nrows();
    let mean_diag = (0..n).map(|i| m[(i, i)]).sum::<f64>() / n as f64;
    let mut jittered = m.to_owned();
    for i in 0..n {
        jittered[(i, i)] += JITTER * mean_diag.abs();
    }
    jittered
        .llt(Side::Lower)
        .map(|llt| llt.L().to_owned())
        .map_err(|_| Error::NotPositiveDefinite { what: what.to_string() })
}

pub(crate) fn log_det_from_factor(l: MatRef<'_, f64>) -> f64 {
    2.0 * (0..l.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>()
}

/// `L^{-1}` for a lower-triangular `L`.
pub(crate) fn lower_inverse(l: MatRef<'_, f64>) -> Mat<f64> {
    let mut inv = Mat::<f64>::identity(l.nrows(), l.ncols());
    solve_lower_triangular_in_place(l, inv.as_mut(), Par::Seq);
    inv
}

/// `B^T B` for the lower-triangular `B = L^{-1}`, i.e. `(L L^T)^{-1}`, as a full symmetric matrix.
pub(crate) fn inverse_from_lower_inverse(linv: MatRef<'_, f64>) -> Mat<f64> {
    let n = linv.nrows();
    let mut out = Mat::<f64>::zeros(n, n);
    triangular::matmul(
        out.as_mut(),
        BlockStructure::TriangularLower,
        Accum::Replace,
        linv.transpose(),
        BlockStructure::TriangularUpper,
        linv,
        BlockStructure::TriangularLower,
        1.0,
        Par::Seq,
    );
    symmetrize_from_lower(&mut out);
    out
}

/// Inverse and log-determinant of an SPD matrix given by its lower triangle.
pub(crate) fn spd_inverse(m: MatRef<'_, f64>, what: &str) -> Result<(Mat<f64>, f64)> {
    let l = cholesky(m, what)?;
    let inv = inverse_from_lower_inverse(lower_inverse(l.as_ref()).as_ref());
    Ok((inv, log_det_from_factor(l.as_ref())))
}

/// `dst += alpha * B^T B`, touching only the lower triangle of `dst`.
pub(crate) fn add_gram_lower(dst: &mut Mat<f64>, b: MatRef<'_, f64>, alpha: f64) {
    triangular::matmul(
        dst.as_mut(),
        BlockStructure::TriangularLower,
        Accum::Add,
        b.transpose(),
        BlockStructure::Rectangular,
        b,
        BlockStructure::Rectangular,
        alpha,
        Par::Seq,
    );
}

pub(crate) fn symmetrize_from_lower(m: &mut Mat<f64>) {
    for j in 0..m.ncols() {
        for i in 0..j {
            m[(i, j)] = m[(j, i)];
        }
    }
}

/// `L^{-1} B` for a lower-triangular `L^{-1}` given explicitly.
pub(crate) fn lower_times(linv: MatRef<'_, f64>, b: MatRef<'_, f64>) -> Mat<f64> {
    let mut out = Mat::<f64>::zeros(linv.nrows(), b.ncols());
    triangular::matmul(
        out.as_mut(),
        BlockStructure::Rectangular,
        Accum::Replace,
        linv,
        BlockStructure::TriangularLower,
        b,
        BlockStructure::Rectangular,
        1.0,
        Par::Seq,
    );
    out
}

pub(crate) fn mat_vec(m: MatRef<'_, f64>, v: &[f64]) -> Vec<f64> {
    let rhs = MatRef::from_column_major_slice(v, v.len(), 1);
    let mut out = Mat::<f64>::zeros(m.nrows(), 1);
    matmul(out.as_mut(), Accum::Replace, m, rhs, 1.0, Par::Seq);
    (0..m.nrows()).map(|i| out[(i, 0)]).collect()
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `sum_ij A_ij B_ij`.
pub(crate) fn frobenius_dot(a: MatRef<'_, f64>, b: MatRef<'_, f64>) -> f64 {
    let mut s = 0.0;
    for j in 0..a.ncols() {
        s += dot(a.col(j).try_as_col_major().unwrap().as_slice(), b.col(j).try_as_col_major().unwrap().as_slice());
    }
    s
}

/// Symmetric factor `G` with `G G^T = S` for a symmetric PSD `S`; negative
/// eigenvalues from rounding are clipped to zero.
pub(crate) fn psd_factor(s: MatRef<'_, f64>) -> Result<Mat<f64>> {
    let n = s.nrows();
    let evd = s
        .self_adjoint_eigen(Side::Lower)
        .map_err(|_| Error::Breakdown("eigendecomposition of registration covariance failed".into()))?;
    let (u, d) = (evd.U(), evd.S());
    let mut g = Mat::<f64>::zeros(n, n);
    for k in 0..n {
        let w = d[k].max(0.0).sqrt();
        for i in 0..n {
            g[(i, k)] = u[(i, k)] * w;
        }
    }
    Ok(g)
}
