//! Effect estimation for continuous outcomes under a linear structural
//! model with a shared latent confounder.
//!
//! The workflow has three stages. [`fit_factors`] estimates the joint
//! loading matrix of the latent factors from the outcome covariance.
//! [`select_negative_controls`] searches the rotation freedom of that
//! loading matrix for the direction with the most below-threshold
//! entries; outcomes in that near-null set are treated as unaffected by
//! the exposure. [`estimate_effects`] then estimates each remaining
//! outcome's effect by two-stage least squares, instrumenting the latent
//! confounder with the fitted negative controls and applying a ridge
//! penalty to every coefficient except the exposure's.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::numerics::{kfold_split, ridge_masked};


/// Exposure vector plus outcome matrix, the input to every estimator in
/// this module.
#[derive(Debug, Clone)]
pub struct Dataset {
    /// Exposure, length n.
    pub x: DVector<f64>,
    /// Outcomes, n rows by p columns.
    pub y: DMatrix<f64>,
    /// Whether columns have been mean-centered.
    pub centered: bool,
}

impl Dataset {
    pub fn new(x: DVector<f64>, y: DMatrix<f64>) -> Result<Self> {
        if x.len() != y.nrows() {
            return Err(Error::Validation(format!(
                "dataset: {} exposure rows but {} outcome rows",
                x.len(),
                y.nrows()
            )));
        }
        if x.iter().any(|v| !v.is_finite()) || y.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("dataset: non-finite entry".into()));
        }
        Ok(Dataset { x, y, centered: false })
    }

    pub fn n(&self) -> usize {
        self.x.len()
    }

    pub fn p(&self) -> usize {
        self.y.ncols()
    }

    /// Mean-center the exposure and every outcome column.
    pub fn center(&self) -> Dataset {
        let n = self.n() as f64;
        let mut x = self.x.clone();
        let xm = x.sum() / n;
        x.iter_mut().for_each(|v| *v -= xm);
        let mut y = self.y.clone();
        for mut col in y.column_iter_mut() {
            let m = col.sum() / n;
            col.iter_mut().for_each(|v| *v -= m);
        }
        Dataset { x, y, centered: true }
    }

    /// Keep only the outcome columns at `indices` (0-based).
    pub fn with_outcomes(&self, indices: &[usize]) -> Result<Dataset> {
        if indices.is_empty() {
            return Err(Error::Validation("with_outcomes: no columns kept".into()));
        }
        if let Some(&bad) = indices.iter().find(|&&j| j >= self.p()) {
            return Err(Error::Validation(format!(
                "with_outcomes: column {bad} out of range for p={}",
                self.p()
            )));
        }
        let y = DMatrix::from_fn(self.n(), indices.len(), |r, c| self.y[(r, indices[c])]);
        Ok(Dataset { x: self.x.clone(), y, centered: self.centered })
    }

    fn require_centered(&self, what: &str) -> Result<()> {
        if !self.centered {
            return Err(Error::Validation(format!("{what}: dataset must be centered first")));
        }
        Ok(())
    }
}

/// Factor-model fit of the outcome covariance.
#[derive(Debug, Clone)]
pub struct FactorFit {
    /// Number of fitted factors (latent confounder dimension plus one,
    /// the extra direction carrying the exposure noise).
    pub num_factors: usize,
    /// p by num_factors loading matrix; column j is sqrt(lambda_j) times
    /// the j-th covariance eigenvector.
    pub loadings: DMatrix<f64>,
    /// All p covariance eigenvalues, descending.
    pub spectrum: Vec<f64>,
    /// Residual noise level: mean of the eigenvalues below the kept
    /// block.
    pub sigma2_hat: f64,
    /// Threshold separating structural zeros from estimation noise in a
    /// rotated loading column: sqrt(2 log(p) sigma2 / n).
    pub delta: f64,
}

/// Outcome of the rotation search.
#[derive(Debug, Clone)]
pub struct Selection {
    /// Outcomes whose rotated loading is at most delta in magnitude:
    /// the estimated negative controls (zero exposure effect).
    pub s0_hat: Vec<usize>,
    /// The unit direction found by the search.
    pub w_star: DVector<f64>,
    /// Rotated loading column: loadings * w_star.
    pub y_star: DVector<f64>,
    /// Count of entries above delta (the minimized quantity).
    pub objective: usize,
    /// Which search produced the result.
    pub method: SelectionMethod,
    /// Threshold the selection was made at.
    pub delta: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SelectionMethod {
    Enumeration,
    BranchAndBound,
    /// Dense sphere grid, used when every row subset is rank deficient.
    GridFallback,
}

/// Per-outcome effect estimates with the ridge metadata needed to
/// reproduce them.
#[derive(Debug, Clone)]
pub struct EffectEstimate {
    /// Length p; exactly zero on the selected negative controls.
    pub beta_hat: DVector<f64>,
    /// Chosen ridge penalty per estimated coordinate, indexed like
    /// beta_hat (zero coordinates carry 0).
    pub lambda: Vec<f64>,
    /// Optional per-coordinate percentile intervals.
    pub intervals: Option<Vec<(f64, f64)>>,
    /// First-stage condition number per estimated coordinate.
    pub first_stage_cond: Vec<f64>,
    /// Indices where the exposure was nearly collinear with the fitted
    /// controls (a shared-confounding identification concern).
    pub collinearity_warnings: Vec<usize>,
}

/// Options for [`estimate_effects`].
#[derive(Debug, Clone)]
pub struct EffectOptions {
    /// Ridge penalty grid; `None` builds the default 50-point log grid
    /// spanning [1e-4, 1e4] times the mean design Gram diagonal.
    pub lambda_grid: Option<Vec<f64>>,
    /// Cross-validation folds.
    pub folds: usize,
    /// Seed for the fold split.
    pub fold_seed: u64,
}

impl Default for EffectOptions {
    fn default() -> Self {
        EffectOptions { lambda_grid: None, folds: 10, fold_seed: 0 }
    }
}

/// Fit the factor model by principal components.
///
/// The factor count defaults to the number of correlation-matrix
/// eigenvalues above one; loadings and the noise level come from the
/// covariance matrix.
pub fn fit_factors(data: &Dataset, num_factors_override: Option<usize>) -> Result<FactorFit> {
    data.require_centered("fit_factors")?;
    let n = data.n();
    let p = data.p();
    if p < 3 {
        return Err(Error::Validation(format!(
            "fit_factors: {p} outcomes, need at least 3 for factor identification"
        )));
    }
    if n <= p {
        return Err(Error::Validation(format!(
            "fit_factors: n={n} must exceed p={p}"
        )));
    }
    let cov = data.y.transpose() * &data.y / (n as f64 - 1.0);
    let eig = cov.clone().symmetric_eigen();
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let spectrum: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect();

    let num_factors = match num_factors_override {
        Some(k) => {
            if k == 0 || k > p {
                return Err(Error::Validation(format!(
                    "fit_factors: factor override {k} outside 1..={p}"
                )));
            }
            k
        }
        None => {
            let sd: Vec<f64> = (0..p).map(|j| cov[(j, j)].max(f64::MIN_POSITIVE).sqrt()).collect();
            let corr = DMatrix::from_fn(p, p, |i, j| cov[(i, j)] / (sd[i] * sd[j]));
            let ceig = corr.symmetric_eigen();
            // Strictly above one, with a roundoff guard so exactly
            // orthogonal columns report no factors instead of counting
            // eigenvalues inflated by a few ulps.
            let k = ceig.eigenvalues.iter().filter(|&&l| l > 1.0 + 1e-12).count();
            if k == 0 {
                return Err(Error::NoFactors);
            }
            k
        }
    };
    let positive = spectrum.iter().filter(|&&l| l > 0.0).count();
    if positive < num_factors {
        return Err(Error::DegenerateSpectrum { positive, requested: num_factors });
    }

    let mut loadings = DMatrix::zeros(p, num_factors);
    for (slot, &src) in order.iter().take(num_factors).enumerate() {
        let scale = spectrum[slot].sqrt();
        loadings.set_column(slot, &(eig.eigenvectors.column(src) * scale));
    }
    let tail = &spectrum[num_factors.min(p)..];
    let sigma2_hat = tail.iter().sum::<f64>() / p as f64;
    let delta = (2.0 * (p as f64).ln() * sigma2_hat / n as f64).sqrt();
    Ok(FactorFit { num_factors, loadings, spectrum, sigma2_hat, delta })
}

/// Count of rotated loadings above the threshold, the quantity the
/// search minimizes.
fn objective(y: &DVector<f64>, delta: f64) -> usize {
    y.iter().filter(|v| v.abs() > delta).count()
}

/// Deterministic tie-break score: total magnitude inside the zero
/// pattern, smaller is better (more decisive zeros).
fn tie_score(y: &DVector<f64>, delta: f64) -> f64 {
    y.iter().map(|v| v.abs()).filter(|a| *a <= delta).sum()
}

/// Fix the overall sign so the largest-magnitude rotated entry is
/// positive.
fn canonical_sign(w: &mut DVector<f64>, y: &mut DVector<f64>) {
    let mut big = 0usize;
    for i in 0..y.len() {
        if y[i].abs() > y[big].abs() {
            big = i;
        }
    }
    if y[big] < 0.0 {
        *w = -&*w;
        *y = -&*y;
    }
}

struct Candidate {
    w: DVector<f64>,
    y: DVector<f64>,
    objective: usize,
    score: f64,
}

impl Candidate {
    fn build(gamma: &DMatrix<f64>, w: DVector<f64>, delta: f64) -> Self {
        let y = gamma * &w;
        let objective = objective(&y, delta);
        let score = tie_score(&y, delta);
        Candidate { w, y, objective, score }
    }

    fn better_than(&self, other: &Candidate) -> bool {
        (self.objective, self.score) < (other.objective, other.score)
    }
}

/// Unit null vector of a row block. The block is zero-padded square
/// before the decomposition because the thin SVD of a wide matrix omits
/// the null space from its right basis. With `exact` the orthogonal
/// complement must be exactly one-dimensional, making the direction
/// unique up to sign.
fn padded_null_vector(sub: DMatrix<f64>, exact: bool) -> Option<DVector<f64>> {
    let d = sub.ncols();
    let square = if sub.nrows() < d { sub.resize_vertically(d, 0.0) } else { sub };
    let svd = square.svd(false, true);
    let vt = svd.v_t.as_ref()?;
    let smax = svd.singular_values.max();
    let rank_tol = 1e-10 * smax.max(1.0);
    let rank = svd.singular_values.iter().filter(|&&s| s > rank_tol).count();
    if rank >= d || (exact && rank != d - 1) {
        return None;
    }
    let w = DVector::from_fn(d, |j, _| vt[(vt.nrows() - 1, j)]);
    let norm = w.norm();
    if norm == 0.0 {
        return None;
    }
    Some(w / norm)
}

/// Unit null vector of the span of the given rows, when the span has a
/// one-dimensional orthogonal complement.
fn null_direction(gamma: &DMatrix<f64>, rows: &[usize]) -> Option<DVector<f64>> {
    let d = gamma.ncols();
    let sub = DMatrix::from_fn(rows.len(), d, |i, j| gamma[(rows[i], j)]);
    padded_null_vector(sub, true)
}

/// Visit the stationary directions of min over the unit sphere of
/// max_i |rows_i . w|: unit null vectors of row subsets (any optimum
/// attaining zero lies in one) and signed equalizer directions, where
/// several rows are active with a common magnitude (the first-order
/// condition for a positive optimum). Together these reach the exact
/// minimax value on generic inputs.
fn for_each_stationary_direction(rows: &DMatrix<f64>, f: &mut impl FnMut(DVector<f64>)) {
    let k = rows.nrows();
    let d = rows.ncols();
    if k == 0 || d == 0 {
        return;
    }
    for size in 1..d.min(k + 1) {
        for sub in subsets(k, size) {
            let m = DMatrix::from_fn(sub.len(), d, |i, j| rows[(sub[i], j)]);
            if let Some(w) = padded_null_vector(m, false) {
                f(w);
            }
        }
    }
    for size in 2..=d.min(k) {
        for sub in subsets(k, size) {
            let signs = 1usize << (size - 1);
            for pat in 0..signs {
                let mut c = DMatrix::zeros(size, d);
                for (i, &r) in sub.iter().enumerate() {
                    let s = if i > 0 && (pat >> (i - 1)) & 1 == 1 { -1.0 } else { 1.0 };
                    for j in 0..d {
                        c[(i, j)] = s * rows[(r, j)];
                    }
                }
                let gram = &c * c.transpose();
                let Some(inv) = gram.try_inverse() else { continue };
                let alpha = inv * DVector::from_element(size, 1.0);
                let w = c.transpose() * alpha;
                let norm = w.norm();
                if norm < 1e-12 {
                    continue;
                }
                f(w / norm);
            }
        }
    }
}

fn subsets(p: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur = Vec::with_capacity(k);
    fn rec(start: usize, p: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..p {
            cur.push(i);
            rec(i + 1, p, k, cur, out);
            cur.pop();
        }
    }
    rec(0, p, k, &mut cur, &mut out);
    out
}

/// Coordinate-plane rotation descent from the best candidate, for optima
/// that sit strictly inside the threshold band rather than on a row null
/// space.
fn polish(gamma: &DMatrix<f64>, start: Candidate, delta: f64, iters: usize) -> Candidate {
    let d = gamma.ncols();
    if d < 2 {
        return start;
    }
    let angles = [0.25f64, 0.5, 1.0, 2.0, 4.0].map(|deg| deg.to_radians());
    let mut best = start;
    for _ in 0..iters {
        let mut improved = false;
        for i in 0..d {
            for j in (i + 1)..d {
                for &a in &angles {
                    for sign in [1.0, -1.0] {
                        let (s, c) = (a * sign).sin_cos();
                        let mut w = best.w.clone();
                        let (wi, wj) = (w[i], w[j]);
                        w[i] = c * wi - s * wj;
                        w[j] = s * wi + c * wj;
                        let cand = Candidate::build(gamma, w, delta);
                        if cand.better_than(&best) {
                            best = cand;
                            improved = true;
                        }
                    }
                }
            }
        }
        if !improved {
            break;
        }
    }
    best
}

/// Dense unit-sphere grid with the stated per-axis angular resolution,
/// in degrees. Covers half the sphere; the other half is sign-equivalent.
fn sphere_grid(d: usize, step_deg: f64) -> Vec<DVector<f64>> {
    let step = step_deg.to_radians();
    match d {
        1 => vec![DVector::from_vec(vec![1.0])],
        _ => {
            let mut out = Vec::new();
            let mut stack: Vec<(usize, Vec<f64>, f64)> = vec![(0, Vec::new(), 1.0)];
            while let Some((axis, partial, remainder)) = stack.pop() {
                if axis == d - 1 {
                    let mut v = partial.clone();
                    v.push(remainder);
                    out.push(DVector::from_vec(v));
                    continue;
                }
                // First angle spans a half-circle, the rest full circles;
                // the grid then covers every direction up to global sign.
                let span = if axis == 0 { std::f64::consts::PI } else { 2.0 * std::f64::consts::PI };
                let steps = (span / step).ceil() as usize;
                for k in 0..steps {
                    let theta = k as f64 * step;
                    let mut v = partial.clone();
                    v.push(remainder * theta.cos());
                    stack.push((axis + 1, v, remainder * theta.sin()));
                }
            }
            out
        }
    }
}

/// Best rotation over a dense sphere grid; the documented fallback when
/// no row subset yields a candidate, and the brute-force oracle in tests.
pub fn grid_search(gamma: &DMatrix<f64>, delta: f64, step_deg: f64) -> Selection {
    let mut best: Option<Candidate> = None;
    for w in sphere_grid(gamma.ncols(), step_deg) {
        let cand = Candidate::build(gamma, w, delta);
        if best.as_ref().is_none_or(|b| cand.better_than(b)) {
            best = Some(cand);
        }
    }
    finish_selection(best.expect("sphere grid is never empty"), delta, SelectionMethod::GridFallback)
}

fn finish_selection(mut cand: Candidate, delta: f64, method: SelectionMethod) -> Selection {
    canonical_sign(&mut cand.w, &mut cand.y);
    let s0_hat: Vec<usize> = (0..cand.y.len()).filter(|&j| cand.y[j].abs() <= delta).collect();
    Selection {
        s0_hat,
        w_star: cand.w,
        y_star: cand.y,
        objective: cand.objective,
        method,
        delta,
    }
}

/// Search the rotation freedom of the loading matrix for the direction
/// whose rotated column has the most entries inside the threshold band.
pub fn select_negative_controls(
    fit: &FactorFit,
    m_bound: f64,
    method: SelectionMethod,
) -> Result<Selection> {
    let gamma = &fit.loadings;
    let delta = fit.delta;
    let d = gamma.ncols();
    let p = gamma.nrows();
    let reachable = gamma
        .row_iter()
        .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
        .fold(0.0f64, f64::max);
    if m_bound < reachable {
        return Err(Error::BadBound { m: m_bound, needed: reachable });
    }

    match method {
        SelectionMethod::Enumeration => {
            let mut best: Option<Candidate> = None;
            let consider = |cand: Candidate, best: &mut Option<Candidate>| {
                if best.as_ref().is_none_or(|b| cand.better_than(b)) {
                    *best = Some(cand);
                }
            };
            if d == 1 {
                let cand = Candidate::build(gamma, DVector::from_vec(vec![1.0]), delta);
                consider(cand, &mut best);
            } else {
                // Core candidates: exact null vectors of (d-1)-row
                // subsets, which realize every zero pattern attainable by
                // annihilating d-1 rows.
                for rows in subsets(p, d - 1) {
                    let Some(w) = null_direction(gamma, &rows) else { continue };
                    consider(Candidate::build(gamma, w, delta), &mut best);
                }
                // Stationary candidates cover optima that sit strictly
                // inside the threshold band: the witness of any optimal
                // zero set is a stationary direction of its minimax
                // problem, so this family makes the search exact on
                // generic inputs.
                for_each_stationary_direction(gamma, &mut |w| {
                    consider(Candidate::build(gamma, w, delta), &mut best);
                });
            }
            let Some(best) = best else {
                // Documented fallback: every row subset was rank
                // deficient, so scan a dense grid instead.
                return Ok(grid_search(gamma, delta, 2.0));
            };
            let polished = polish(gamma, best, delta, 100);
            Ok(finish_selection(polished, delta, SelectionMethod::Enumeration))
        }
        SelectionMethod::BranchAndBound => branch_and_bound(gamma, delta),
        SelectionMethod::GridFallback => Ok(grid_search(gamma, delta, 2.0)),
    }
}

fn eval_linf(rows: &DMatrix<f64>, w: &DVector<f64>) -> f64 {
    let d = rows.ncols();
    (0..rows.nrows())
        .map(|i| (0..d).map(|j| rows[(i, j)] * w[j]).sum::<f64>().abs())
        .fold(0.0f64, f64::max)
}

/// Exact minimum of max_j |rows_j . w| over the unit sphere, for small
/// column counts, by evaluating the stationary directions.
fn min_linf_on_sphere(rows: &DMatrix<f64>) -> f64 {
    if rows.nrows() == 0 {
        return 0.0;
    }
    let mut best = f64::INFINITY;
    for_each_stationary_direction(rows, &mut |w| best = best.min(eval_linf(rows, &w)));
    best
}

/// Exact search over zero patterns: depth-first branch and bound on
/// which rows are required to fall inside the threshold band, feasibility
/// checked by exact minimax rotation over the candidate zero set.
fn branch_and_bound(gamma: &DMatrix<f64>, delta: f64) -> Result<Selection> {
    let p = gamma.nrows();
    let d = gamma.ncols();
    if d == 1 {
        let cand = Candidate::build(gamma, DVector::from_vec(vec![1.0]), delta);
        return Ok(finish_selection(cand, delta, SelectionMethod::BranchAndBound));
    }
    // Rows ordered by norm ascending: small rows are the likeliest
    // members of the zero set, so they are decided first.
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&a, &b| {
        let na: f64 = gamma.row(a).iter().map(|v| v * v).sum();
        let nb: f64 = gamma.row(b).iter().map(|v| v * v).sum();
        na.total_cmp(&nb)
    });

    struct State<'a> {
        gamma: &'a DMatrix<f64>,
        order: &'a [usize],
        delta: f64,
        best_size: usize,
        best_set: Vec<usize>,
    }

    fn feasible(gamma: &DMatrix<f64>, set: &[usize], delta: f64) -> bool {
        if set.is_empty() {
            return true;
        }
        let sub = DMatrix::from_fn(set.len(), gamma.ncols(), |i, j| gamma[(set[i], j)]);
        min_linf_on_sphere(&sub) <= delta
    }

    fn dfs(st: &mut State, idx: usize, current: &mut Vec<usize>) {
        if current.len() + (st.order.len() - idx) <= st.best_size {
            return;
        }
        if idx == st.order.len() {
            if current.len() > st.best_size {
                st.best_size = current.len();
                st.best_set = current.clone();
            }
            return;
        }
        // Include branch first: feasibility is monotone, so an
        // infeasible prefix prunes the whole subtree.
        current.push(st.order[idx]);
        if feasible(st.gamma, current, st.delta) {
            dfs(st, idx + 1, current);
        }
        current.pop();
        dfs(st, idx + 1, current);
    }

    let mut st = State { gamma, order: &order, delta, best_size: 0, best_set: Vec::new() };
    let mut current = Vec::new();
    dfs(&mut st, 0, &mut current);

    // Recover the witness rotation for the winning zero set.
    let w = if st.best_set.is_empty() {
        // No row can be annihilated; any direction attains the trivial
        // objective, pick the first enumeration candidate for
        // determinism.
        let mut best: Option<Candidate> = None;
        for rows in subsets(p, d - 1) {
            let Some(w) = null_direction(gamma, &rows) else { continue };
            let cand = Candidate::build(gamma, w, delta);
            if best.as_ref().is_none_or(|b| cand.better_than(b)) {
                best = Some(cand);
            }
        }
        match best {
            Some(c) => c.w,
            None => return Ok(grid_search(gamma, delta, 2.0)),
        }
    } else {
        let sub = DMatrix::from_fn(st.best_set.len(), d, |i, j| gamma[(st.best_set[i], j)]);
        minimax_direction(&sub)
    };
    let cand = Candidate::build(gamma, w, delta);
    Ok(finish_selection(cand, delta, SelectionMethod::BranchAndBound))
}

/// Argmin of max_j |rows_j . w| over the unit sphere (same candidate
/// enumeration as [`min_linf_on_sphere`], returning the witness).
fn minimax_direction(rows: &DMatrix<f64>) -> DVector<f64> {
    let d = rows.ncols();
    let mut best_w = DVector::from_fn(d, |j, _| if j == 0 { 1.0 } else { 0.0 });
    let mut best = eval_linf(rows, &best_w);
    for_each_stationary_direction(rows, &mut |w| {
        let v = eval_linf(rows, &w);
        if v < best {
            best = v;
            best_w = w;
        }
    });
    best_w
}

/// Two-stage least squares with a masked ridge second stage.
///
/// For each outcome outside the selected zero set, the first stage
/// regresses the negative-control block on the exposure and the
/// remaining outcomes; the second stage regresses the target outcome on
/// the exposure and the fitted controls, penalizing every coefficient
/// except the exposure's. The penalty is chosen by k-fold cross
/// validation of second-stage prediction error, with the first stage
/// held fixed at its full-sample fit.
pub fn estimate_effects(
    data: &Dataset,
    sel: &Selection,
    opts: &EffectOptions,
) -> Result<EffectEstimate> {
    data.require_centered("estimate_effects")?;
    let n = data.n();
    let p = data.p();
    if sel.s0_hat.is_empty() {
        return Err(Error::Validation(
            "estimate_effects: no negative controls selected".into(),
        ));
    }
    if sel.s0_hat.len() >= p {
        // Everything declared zero: nothing to estimate.
        return Ok(EffectEstimate {
            beta_hat: DVector::zeros(p),
            lambda: vec![0.0; p],
            intervals: None,
            first_stage_cond: vec![0.0; p],
            collinearity_warnings: Vec::new(),
        });
    }
    if opts.folds < 2 || opts.folds > n {
        return Err(Error::Validation(format!(
            "estimate_effects: fold count {} outside 2..={n}",
            opts.folds
        )));
    }
    let in_s0 = membership(p, &sel.s0_hat);
    let w_block = columns(&data.y, &sel.s0_hat);

    let targets: Vec<usize> = (0..p).filter(|j| !in_s0[*j]).collect();
    let folds = kfold_split(n, opts.folds, opts.fold_seed)?;

    let per_target: Vec<Result<(usize, f64, f64, f64, bool)>> = targets
        .par_iter()
        .map(|&ell| {
            let z_cols: Vec<usize> =
                (0..p).filter(|&j| !in_s0[j] && j != ell).collect();
            let mut a = DMatrix::zeros(n, 1 + z_cols.len());
            a.set_column(0, &data.x);
            for (slot, &j) in z_cols.iter().enumerate() {
                a.set_column(1 + slot, &data.y.column(j));
            }
            let (w_hat, cond) = project_onto(&a, &w_block)
                .map_err(|_| first_stage_error(ell, &a))?;
            let mut b = DMatrix::zeros(n, 1 + w_hat.ncols());
            b.set_column(0, &data.x);
            for c in 0..w_hat.ncols() {
                b.set_column(1 + c, &w_hat.column(c));
            }
            // The exposure nearly lying in the span of the fitted
            // controls breaks the estimand; flag it via the second-stage
            // design's condition number.
            let bsvd = b.clone().svd(false, false);
            let bmax = bsvd.singular_values.max();
            let bmin = bsvd.singular_values.iter().cloned().fold(f64::INFINITY, f64::min);
            let collinear = bmin <= 0.0 || bmax / bmin > 1e10;
            let y_ell = DVector::from_column_slice(data.y.column(ell).as_slice());
            let grid = match &opts.lambda_grid {
                Some(g) => g.clone(),
                None => default_lambda_grid(&b),
            };
            let mask: Vec<f64> =
                std::iter::once(0.0).chain(std::iter::repeat_n(1.0, w_hat.ncols())).collect();
            let lambda = pick_lambda(&b, &y_ell, &grid, &mask, &folds)?;
            let coef = ridge_masked(&b, &y_ell, lambda, &mask)?;
            Ok((ell, coef[0], lambda, cond, collinear))
        })
        .collect();

    let mut beta_hat = DVector::zeros(p);
    let mut lambda = vec![0.0; p];
    let mut first_stage_cond = vec![0.0; p];
    let mut collinearity_warnings = Vec::new();
    for r in per_target {
        let (ell, b0, lam, cond, collinear) = r?;
        beta_hat[ell] = b0;
        lambda[ell] = lam;
        first_stage_cond[ell] = cond;
        if collinear {
            collinearity_warnings.push(ell);
        }
    }
    collinearity_warnings.sort_unstable();
    Ok(EffectEstimate {
        beta_hat,
        lambda,
        intervals: None,
        first_stage_cond,
        collinearity_warnings,
    })
}

fn first_stage_error(ell: usize, a: &DMatrix<f64>) -> Error {
    let svd = a.clone().svd(false, false);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.iter().cloned().fold(f64::INFINITY, f64::min);
    Error::FirstStageSingular {
        outcome: ell + 1,
        cond: if smin > 0.0 { smax / smin } else { f64::INFINITY },
    }
}

fn membership(p: usize, set: &[usize]) -> Vec<bool> {
    let mut m = vec![false; p];
    for &j in set {
        m[j] = true;
    }
    m
}

fn columns(y: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(y.nrows(), idx.len());
    for (slot, &j) in idx.iter().enumerate() {
        out.set_column(slot, &y.column(j));
    }
    out
}

/// OLS projection of every column of `w` onto the column span of `a`.
/// Returns the fitted values and the condition number of `a`.
fn project_onto(a: &DMatrix<f64>, w: &DMatrix<f64>) -> Result<(DMatrix<f64>, f64)> {
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.iter().cloned().fold(f64::INFINITY, f64::min);
    let cond = if smin > 0.0 { smax / smin } else { f64::INFINITY };
    if !(cond.is_finite()) || cond > 1e12 {
        return Err(Error::SingularSystem { cond });
    }
    let mut fitted = DMatrix::zeros(w.nrows(), w.ncols());
    for c in 0..w.ncols() {
        let col = DVector::from_column_slice(w.column(c).as_slice());
        let coef = svd
            .solve(&col, 1e-12 * smax)
            .map_err(|e| Error::Validation(format!("first stage: {e}")))?;
        fitted.set_column(c, &(a * coef));
    }
    Ok((fitted, cond))
}

/// Default ridge grid: 50 log-spaced points spanning [1e-4, 1e4] times
/// the mean diagonal of the design Gram matrix.
pub fn default_lambda_grid(b: &DMatrix<f64>) -> Vec<f64> {
    let m = b.ncols() as f64;
    let scale = (b.transpose() * b).trace() / m;
    let lo = 1e-4 * scale;
    let hi = 1e4 * scale;
    let count = 50;
    (0..count)
        .map(|i| lo * (hi / lo).powf(i as f64 / (count - 1) as f64))
        .collect()
}

fn pick_lambda(
    b: &DMatrix<f64>,
    y: &DVector<f64>,
    grid: &[f64],
    mask: &[f64],
    folds: &[Vec<usize>],
) -> Result<f64> {
    if grid.is_empty() {
        return Err(Error::Validation("estimate_effects: empty lambda grid".into()));
    }
    if grid.len() == 1 {
        return Ok(grid[0]);
    }
    let n = b.nrows();
    let mut best = (f64::INFINITY, grid[0]);
    for &lam in grid {
        let mut err = 0.0;
        let mut ok = true;
        for fold in folds {
            let mut hold = vec![false; n];
            for &i in fold {
                hold[i] = true;
            }
            let train: Vec<usize> = (0..n).filter(|&i| !hold[i]).collect();
            let bt = rows(b, &train);
            let yt = DVector::from_fn(train.len(), |i, _| y[train[i]]);
            let coef = match ridge_masked(&bt, &yt, lam, mask) {
                Ok(c) => c,
                Err(_) => {
                    ok = false;
                    break;
                }
            };
            for &i in fold {
                let pred: f64 = (0..b.ncols()).map(|j| b[(i, j)] * coef[j]).sum();
                let r = y[i] - pred;
                err += r * r;
            }
        }
        if ok && err < best.0 {
            best = (err, lam);
        }
    }
    if best.0.is_infinite() {
        return Err(Error::Validation(
            "estimate_effects: every ridge solve failed across the grid".into(),
        ));
    }
    Ok(best.1)
}

fn rows(m: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(idx.len(), m.ncols(), |i, j| m[(idx[i], j)])
}

/// Nonparametric pairs bootstrap for the effect estimates.
///
/// Rows are resampled with replacement; the selection and the per-target
/// ridge penalties stay fixed at their full-sample values, so the
/// intervals reflect sampling noise given the selected controls.
/// Resamples where estimation fails are dropped and counted.
pub fn bootstrap_ci(
    data: &Dataset,
    sel: &Selection,
    level: f64,
    b_reps: usize,
    seed: u64,
) -> Result<(Vec<(f64, f64)>, usize)> {
    data.require_centered("bootstrap_ci")?;
    if b_reps < 100 {
        return Err(Error::Validation(format!(
            "bootstrap_ci: {b_reps} resamples, need at least 100"
        )));
    }
    if !(0.5..1.0).contains(&level) {
        return Err(Error::Validation(format!(
            "bootstrap_ci: level {level} outside [0.5, 1)"
        )));
    }
    let n = data.n();
    let p = data.p();
    let full = estimate_effects(data, sel, &EffectOptions::default())?;
    let fixed_grid: Vec<Vec<f64>> = full.lambda.iter().map(|&l| vec![l]).collect();

    let draws: Vec<Option<DVector<f64>>> = (0..b_reps)
        .into_par_iter()
        .map(|rep| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (rep as u64).wrapping_mul(0x9E3779B97F4A7C15));
            let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
            let x = DVector::from_fn(n, |i, _| data.x[idx[i]]);
            let y = DMatrix::from_fn(n, p, |i, j| data.y[(idx[i], j)]);
            let resampled = Dataset { x, y, centered: true };
            resample_effects(&resampled, sel, &fixed_grid).ok()
        })
        .collect();

    let mut kept: Vec<DVector<f64>> = Vec::with_capacity(b_reps);
    let mut failed = 0usize;
    for d in draws {
        match d {
            Some(v) => kept.push(v),
            None => failed += 1,
        }
    }
    if kept.is_empty() {
        return Err(Error::Validation("bootstrap_ci: every resample failed".into()));
    }
    let alpha = 1.0 - level;
    let mut intervals = Vec::with_capacity(p);
    for j in 0..p {
        let mut vals: Vec<f64> = kept.iter().map(|v| v[j]).collect();
        vals.sort_by(f64::total_cmp);
        let lo = percentile(&vals, alpha / 2.0);
        let hi = percentile(&vals, 1.0 - alpha / 2.0);
        intervals.push((lo, hi));
    }
    Ok((intervals, failed))
}

/// One bootstrap replicate: the same two-stage estimator with the ridge
/// penalty pinned per target.
fn resample_effects(
    data: &Dataset,
    sel: &Selection,
    fixed_grid: &[Vec<f64>],
) -> Result<DVector<f64>> {
    let p = data.p();
    let in_s0 = membership(p, &sel.s0_hat);
    let w_block = columns(&data.y, &sel.s0_hat);
    let mut beta = DVector::zeros(p);
    for ell in (0..p).filter(|j| !in_s0[*j]) {
        let z_cols: Vec<usize> = (0..p).filter(|&j| !in_s0[j] && j != ell).collect();
        let n = data.n();
        let mut a = DMatrix::zeros(n, 1 + z_cols.len());
        a.set_column(0, &data.x);
        for (slot, &j) in z_cols.iter().enumerate() {
            a.set_column(1 + slot, &data.y.column(j));
        }
        let (w_hat, _cond) = project_onto(&a, &w_block)?;
        let mut b = DMatrix::zeros(n, 1 + w_hat.ncols());
        b.set_column(0, &data.x);
        for c in 0..w_hat.ncols() {
            b.set_column(1 + c, &w_hat.column(c));
        }
        let y_ell = DVector::from_column_slice(data.y.column(ell).as_slice());
        let mask: Vec<f64> =
            std::iter::once(0.0).chain(std::iter::repeat_n(1.0, w_hat.ncols())).collect();
        let lam = fixed_grid[ell][0];
        let coef = ridge_masked(&b, &y_ell, lam, &mask)?;
        beta[ell] = coef[0];
    }
    Ok(beta)
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] * (1.0 - frac) + sorted[hi] * frac
}

/// OLS slope of each outcome on the exposure, the confounded baseline.
pub fn crude_slopes(data: &Dataset) -> Result<DVector<f64>> {
    data.require_centered("crude_slopes")?;
    let xx: f64 = data.x.iter().map(|v| v * v).sum();
    if xx == 0.0 {
        return Err(Error::Validation("crude_slopes: exposure has zero variance".into()));
    }
    Ok(DVector::from_fn(data.p(), |j, _| {
        let xy: f64 = data
            .x
            .iter()
            .zip(data.y.column(j).iter())
            .map(|(a, b)| a * b)
            .sum();
        xy / xx
    }))
}
