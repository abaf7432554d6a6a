use log::warn;
use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Relative singular-value threshold below which a system counts as singular.
pub const PINV_RTOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SolveOptions {
    /// Fall back to an SVD pseudo-inverse instead of failing on singular systems.
    pub pinv_fallback: bool,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions { pinv_fallback: true }
    }
}

/// `A⁻¹ B` for square `A`, through an SVD. Singular values below
/// `PINV_RTOL · σ_max` are dropped when the fallback is enabled.
pub fn solve(a: &DMatrix<f64>, b: &DMatrix<f64>, opts: SolveOptions, what: &str) -> Result<DMatrix<f64>> {
    if a.nrows() != a.ncols() || a.nrows() != b.nrows() {
        return Err(Error::input(format!(
            "{what}: shapes {:?} and {:?} do not form a linear system",
            a.shape(),
            b.shape()
        )));
    }
    if !a.iter().chain(b.iter()).all(|v| v.is_finite()) {
        return Err(Error::numeric(format!("{what}: non-finite system")));
    }
    if a.nrows() == 0 {
        return Ok(DMatrix::zeros(0, b.ncols()));
    }
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if smax == 0.0 || smin <= PINV_RTOL * smax {
        if !opts.pinv_fallback {
            return Err(Error::numeric(format!(
                "{what}: singular system (σ_min/σ_max = {:.3e})",
                if smax > 0.0 { smin / smax } else { 0.0 }
            )));
        }
        warn!("{what}: singular system, using pseudo-inverse");
    }
    svd.solve(b, PINV_RTOL * smax)
        .map_err(|e| Error::numeric(format!("{what}: {e}")))
}

/// `B A⁻¹` for symmetric `A`.
pub fn solve_right_sym(b: &DMatrix<f64>, a: &DMatrix<f64>, opts: SolveOptions, what: &str) -> Result<DMatrix<f64>> {
    Ok(solve(a, &b.transpose(), opts, what)?.transpose())
}

/// Orthonormal basis of the column span of `k` (rank by `PINV_RTOL`).
pub fn column_basis(k: &DMatrix<f64>) -> DMatrix<f64> {
    if k.ncols() == 0 {
        return DMatrix::zeros(k.nrows(), 0);
    }
    let svd = k.clone().svd(true, false);
    let u = svd.u.expect("requested U");
    let smax = svd.singular_values.max();
    let keep: Vec<usize> = (0..svd.singular_values.len())
        .filter(|&i| smax > 0.0 && svd.singular_values[i] > PINV_RTOL * smax)
        .collect();
    DMatrix::from_fn(k.nrows(), keep.len(), |r, c| u[(r, keep[c])])
}

/// Orthogonal projector onto the complement of span(`k`).
pub fn null_space_projector(k: &DMatrix<f64>) -> DMatrix<f64> {
    let u = column_basis(k);
    let n = k.nrows();
    DMatrix::identity(n, n) - &u * u.transpose()
}

/// Columns that lie (numerically) in the span of the columns before them.
pub fn dependent_columns(k: &DMatrix<f64>) -> Vec<usize> {
    let mut basis: Vec<DVector<f64>> = Vec::new();
    let mut out = Vec::new();
    for j in 0..k.ncols() {
        let col = k.column(j).into_owned();
        let norm = col.norm();
        let mut r = col;
        // two passes of Gram-Schmidt for stability
        for _ in 0..2 {
            for b in &basis {
                let c = b.dot(&r);
                r.axpy(-c, b, 1.0);
            }
        }
        let rn = r.norm();
        if norm == 0.0 || rn <= 1e-8 * norm {
            out.push(j);
        } else {
            basis.push(r / rn);
        }
    }
    out
}

/// Symmetric square root of a PSD matrix (negative eigenvalues clipped).
pub fn psd_sqrt(c: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = c.clone().symmetric_eigen();
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|v| v.max(0.0).sqrt()));
    &eig.eigenvectors * d * eig.eigenvectors.transpose()
}
