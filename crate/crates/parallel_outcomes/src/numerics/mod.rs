//! Shared numeric kernels: eigendecomposition, least squares, masked ridge
//! regression, and deterministic cross validation splits.

mod eig;

pub use eig::{eig_real, inf_norm, EigenPairs};

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Condition number threshold above which a normal system is treated as
/// singular.
pub const COND_LIMIT: f64 = 1e12;

/// Relative singular value cutoff for rank decisions in least squares.
pub const RANK_TOL: f64 = 1e-10;

/// Least squares solution of X b = y via singular value decomposition.
///
/// Singular values below `RANK_TOL` times the largest are treated as zero,
/// which yields the minimum-norm solution on rank-deficient designs.
pub fn solve_ols(x: &DMatrix<f64>, y: &DVector<f64>) -> Result<DVector<f64>> {
    if x.nrows() != y.len() {
        return Err(Error::Validation(format!(
            "solve_ols: {} rows in X but {} responses",
            x.nrows(),
            y.len()
        )));
    }
    if x.nrows() == 0 || x.ncols() == 0 {
        return Err(Error::Validation("solve_ols: empty design".into()));
    }
    if x.iter().any(|v| !v.is_finite()) || y.iter().any(|v| !v.is_finite()) {
        return Err(Error::Validation("solve_ols: non-finite input".into()));
    }
    let svd = x.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let eps = if smax > 0.0 { RANK_TOL * smax } else { f64::MIN_POSITIVE };
    svd.solve(y, eps)
        .map(|m| DVector::from_column_slice(m.as_slice()))
        .map_err(|e| Error::Validation(format!("solve_ols: {e}")))
}

/// Ridge regression with a per-coefficient penalty mask.
///
/// Solves (B'B + lambda * diag(mask)) b = B'y. Mask entries are 0 or 1, so
/// unpenalized coordinates (mask 0) are left untouched by the penalty.
pub fn ridge_masked(
    b: &DMatrix<f64>,
    y: &DVector<f64>,
    lambda: f64,
    mask: &[f64],
) -> Result<DVector<f64>> {
    if b.nrows() != y.len() {
        return Err(Error::Validation(format!(
            "ridge_masked: {} rows in B but {} responses",
            b.nrows(),
            y.len()
        )));
    }
    if mask.len() != b.ncols() {
        return Err(Error::Validation(format!(
            "ridge_masked: mask length {} but {} columns",
            mask.len(),
            b.ncols()
        )));
    }
    if !(lambda.is_finite() && lambda >= 0.0) {
        return Err(Error::Validation("ridge_masked: lambda must be finite and nonnegative".into()));
    }
    if mask.iter().any(|&m| m != 0.0 && m != 1.0) {
        return Err(Error::Validation("ridge_masked: mask entries must be 0 or 1".into()));
    }
    if b.iter().any(|v| !v.is_finite()) || y.iter().any(|v| !v.is_finite()) {
        return Err(Error::Validation("ridge_masked: non-finite input".into()));
    }

    let mut g = b.transpose() * b;
    for (j, &m) in mask.iter().enumerate() {
        g[(j, j)] += lambda * m;
    }
    let c = b.transpose() * y;
    solve_spd(&g, &c)
}

/// Solve a symmetric positive definite system, rejecting numerically
/// singular matrices by their eigenvalue condition number.
pub(crate) fn solve_spd(g: &DMatrix<f64>, c: &DVector<f64>) -> Result<DVector<f64>> {
    let eig = g.clone().symmetric_eigen();
    let emax = eig.eigenvalues.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let emin = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    let cond = if emin > 0.0 { emax / emin } else { f64::INFINITY };
    if !(cond.is_finite() && cond <= COND_LIMIT) {
        return Err(Error::SingularSystem { cond });
    }
    // Solve through the spectral factorization already in hand.
    let ut_c = eig.eigenvectors.transpose() * c;
    let scaled = DVector::from_fn(ut_c.len(), |i, _| ut_c[i] / eig.eigenvalues[i]);
    Ok(&eig.eigenvectors * scaled)
}

/// Deterministic k-fold split of row indices 0..n.
///
/// Folds partition 0..n, their sizes differ by at most one, and the output
/// depends only on (n, k, seed). Indices within a fold are ascending.
pub fn kfold_split(n: usize, k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if k < 2 || k > n {
        return Err(Error::Validation(format!(
            "kfold_split: need 2 <= k <= n, got k={k}, n={n}"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    idx.shuffle(&mut rng);
    let mut folds = vec![Vec::with_capacity(n / k + 1); k];
    for (pos, row) in idx.into_iter().enumerate() {
        folds[pos % k].push(row);
    }
    for fold in &mut folds {
        fold.sort_unstable();
    }
    Ok(folds)
}
