//! Closed-form updates of a linear memory `W` (`d_out × d_key`).

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::linalg::{dependent_columns, null_space_projector, solve, solve_right_sym, SolveOptions};
use crate::error::{Error, Result};

/// Edit keys, target values and their residual under the current weights.
#[derive(Debug, Clone, PartialEq)]
pub struct KvSet {
    /// `d_key × m`
    pub k: DMatrix<f64>,
    /// `d_out × m`
    pub v: DMatrix<f64>,
    /// `V − W K`
    pub r: DMatrix<f64>,
}

impl KvSet {
    pub fn new(w: &DMatrix<f64>, k: DMatrix<f64>, v: DMatrix<f64>) -> Result<Self> {
        if k.ncols() != v.ncols() || w.ncols() != k.nrows() || w.nrows() != v.nrows() {
            return Err(Error::input(format!(
                "inconsistent shapes W {:?}, K {:?}, V {:?}",
                w.shape(),
                k.shape(),
                v.shape()
            )));
        }
        let r = &v - w * &k;
        Ok(KvSet { k, v, r })
    }

    pub fn len(&self) -> usize {
        self.k.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.k.ncols() == 0
    }
}

/// Uncentered key covariance `C = λ_c / N · Σ k kᵀ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovMatrix {
    #[serde(skip)]
    pub c: DMatrix<f64>,
    pub scale: f64,
    pub samples: usize,
}

impl CovMatrix {
    pub fn from_keys(keys: &DMatrix<f64>, scale: f64) -> Result<Self> {
        if keys.ncols() == 0 {
            return Err(Error::input("covariance needs at least one key sample"));
        }
        if !(scale >= 0.0) {
            return Err(Error::input("covariance scale must be non-negative"));
        }
        let n = keys.ncols();
        let mut c = keys * keys.transpose();
        c *= scale / n as f64;
        // exact symmetry
        let c = (&c + c.transpose()) * 0.5;
        Ok(CovMatrix { c, scale, samples: n })
    }
}

/// `Δ = R Kᵀ (C + K Kᵀ)⁻¹`.
pub fn solve_memit(kv: &KvSet, c: &DMatrix<f64>, opts: SolveOptions) -> Result<DMatrix<f64>> {
    let a = c + &kv.k * kv.k.transpose();
    solve_right_sym(&(&kv.r * kv.k.transpose()), &a, opts, "memit")
}

/// Rank-one update with `Ŵ k* = v*` that is minimal in the `C`-weighted norm:
/// `Ŵ = W + ((v* − W k*) / (k*ᵀ C⁻¹ k*)) (C⁻¹ k*)ᵀ`.
pub fn solve_rome(
    w: &DMatrix<f64>,
    k_star: &DVector<f64>,
    v_star: &DVector<f64>,
    c: &DMatrix<f64>,
    opts: SolveOptions,
) -> Result<DMatrix<f64>> {
    if k_star.iter().all(|&x| x == 0.0) {
        return Err(Error::input("rome: zero key"));
    }
    if k_star.len() != w.ncols() || v_star.len() != w.nrows() {
        return Err(Error::input("rome: key or value dimension mismatch"));
    }
    let ck = solve(c, &DMatrix::from_column_slice(k_star.len(), 1, k_star.as_slice()), opts, "rome")?;
    let ck = ck.column(0).into_owned();
    let denom = k_star.dot(&ck);
    if !(denom > 0.0) {
        return Err(Error::numeric(format!("rome: k*ᵀ C⁻¹ k* = {denom:e} is not positive")));
    }
    let resid = v_star - w * k_star;
    Ok(w + (resid / denom) * ck.transpose())
}

/// Null-space constrained update. With `P` the projector onto the complement
/// of span(`K_E`):
/// `Δ = R (PK)ᵀ ((PK)(PK)ᵀ + P C P + λ_r I)⁻¹ P`, so `Δ K_E = 0`.
pub fn solve_alphaedit(
    kv: &KvSet,
    c: &DMatrix<f64>,
    preserved: &DMatrix<f64>,
    lambda_r: f64,
    opts: SolveOptions,
) -> Result<DMatrix<f64>> {
    if !(lambda_r >= 0.0) {
        return Err(Error::input("alphaedit: lambda_r must be non-negative"));
    }
    let p = null_space_projector(preserved);
    alphaedit_with_projector(kv, c, &p, lambda_r, opts)
}

pub fn alphaedit_with_projector(
    kv: &KvSet,
    c: &DMatrix<f64>,
    p: &DMatrix<f64>,
    lambda_r: f64,
    opts: SolveOptions,
) -> Result<DMatrix<f64>> {
    let n = p.nrows();
    let pk = p * &kv.k;
    let a = &pk * pk.transpose() + p * c * p + DMatrix::identity(n, n) * lambda_r;
    let a = (&a + a.transpose()) * 0.5;
    let left = solve_right_sym(&(&kv.r * pk.transpose()), &a, opts, "alphaedit")?;
    Ok(left * p)
}

/// Equality-constrained batch update:
/// `Ŵ = W + R (Kᵀ C₀⁻¹ K)⁻¹ Kᵀ C₀⁻¹`, so `Ŵ K = V`.
pub fn solve_emmet(w: &DMatrix<f64>, kv: &KvSet, c0: &DMatrix<f64>, opts: SolveOptions) -> Result<DMatrix<f64>> {
    let dep = dependent_columns(&kv.k);
    if !dep.is_empty() {
        return Err(Error::numeric(format!(
            "emmet: edit keys are linearly dependent (columns {dep:?})"
        )));
    }
    let ci_k = solve(c0, &kv.k, opts, "emmet covariance")?;
    let gram = kv.k.transpose() * &ci_k;
    let gram = (&gram + gram.transpose()) * 0.5;
    let inner = solve(&gram, &kv.r.transpose(), SolveOptions { pinv_fallback: false }, "emmet gram")?;
    Ok(w + inner.transpose() * ci_k.transpose())
}

/// Norm-penalized batch update:
/// `Δ = R Kᵀ (λ_p K₀ K₀ᵀ + K Kᵀ + λ_n I)⁻¹`.
pub fn solve_encore(
    kv: &KvSet,
    k0: &DMatrix<f64>,
    lambda_p: f64,
    lambda_n: f64,
    opts: SolveOptions,
) -> Result<DMatrix<f64>> {
    if !(lambda_p >= 0.0) || !(lambda_n >= 0.0) {
        return Err(Error::input("encore: weights must be non-negative"));
    }
    let n = kv.k.nrows();
    let a = k0 * k0.transpose() * lambda_p + &kv.k * kv.k.transpose() + DMatrix::identity(n, n) * lambda_n;
    solve_right_sym(&(&kv.r * kv.k.transpose()), &a, opts, "encore")
}
