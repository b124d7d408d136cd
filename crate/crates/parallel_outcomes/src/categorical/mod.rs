//! Nonparametric identification and estimation for categorical data.
//!
//! The observed variables are an exposure X and three outcomes Y1, Y2, Y3
//! that are mutually independent given (U, X), where U is an unobserved
//! categorical confounder. The joint law of (Y2, Y3) given X factors as
//! B_x D_x C_x' with B_x, C_x the outcome laws given (U, X) and D_x the
//! diagonal law of U given X. Conditioning additionally on Y1 = t and
//! multiplying by the inverse of the unconditioned table produces a matrix
//! whose eigenvalues are pr(Y1 = t | U, X = x) and whose eigenvectors,
//! scaled to unit l1 norm, are the columns of B_x. That observation drives
//! the plug-in estimator; a least squares refinement polishes it on sample
//! data.
//!
//! Latent classes are coded so pr(Y1 = first level | U = u, X = x) is
//! strictly increasing in u, which fixes the eigenvalue order. The coding
//! must be the same at every exposure level; the estimator checks this by
//! matching eigenvector columns across exposure levels and refuses tables
//! where a non-identity matching beats the eigenvalue coding decisively.
//! Sampling noise is absorbed by projecting every recovered column onto
//! the probability simplex, with the moved mass reported in diagnostics.

mod gls;

pub use gls::{gls_refine, GlsFit, GlsOptions};

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{eig_real, EigenPairs};

/// Condition number cutoff applied to each conditional joint table of
/// (Y2, Y3).
pub const RANK_EPS: f64 = 1e-8;

/// Imaginary parts above this multiple of the spectral radius make the
/// decomposition fail rather than be silently truncated.
pub const IMAG_EPS: f64 = 1e-6;

/// Total clipped probability mass above this level marks a plug-in fit
/// as unreliable in reports. Clipping itself never fails: the projected
/// estimate is still the defined output and the refinement step repairs
/// most of the damage.
pub const CLIP_WARN: f64 = 0.05;

/// A non-identity cross-exposure column pairing must beat the identity
/// pairing by this much total absolute cosine similarity before the
/// coding is declared inconsistent.
pub const ORDER_MARGIN: f64 = 0.5;

/// Smallest class weight kept after projection.
const CLASS_FLOOR: f64 = 1e-9;

/// Failure thresholds for the plug-in decomposition.
///
/// The defaults enforce the identification requirements strictly:
/// spectra must be real up to rounding and the cross-exposure coding
/// must not flip. [`PluginOptions::lenient`] disables both gates for use
/// as a warm-start builder inside the full estimation pipeline, where
/// the least squares refinement only needs a feasible starting point and
/// sampling noise routinely produces mildly complex spectra; condition
/// verdicts are then reported instead of enforced.
#[derive(Debug, Clone, Copy)]
pub struct PluginOptions {
    /// Complex parts above this multiple of the spectral radius fail the
    /// decomposition.
    pub imag_limit_rel: f64,
    /// Margin for declaring the cross-exposure coding inconsistent.
    pub order_margin: f64,
}

impl Default for PluginOptions {
    fn default() -> Self {
        PluginOptions {
            imag_limit_rel: IMAG_EPS,
            order_margin: ORDER_MARGIN,
        }
    }
}

impl PluginOptions {
    /// Project everything instead of failing; used for warm starts.
    pub fn lenient() -> Self {
        PluginOptions {
            imag_limit_rel: f64::INFINITY,
            order_margin: f64::INFINITY,
        }
    }
}

/// Full parameter set of the categorical model. Levels are 0-based
/// indices; files and reports use 1-based labels.
#[derive(Debug, Clone)]
pub struct CategoricalParams {
    pub k_u: usize,
    pub k_x: usize,
    pub k_y: [usize; 3],
    /// pr(U = u), length k_u.
    pub pr_u: DVector<f64>,
    /// pr(X = x | U = u), k_x rows by k_u columns.
    pub pr_x_given_u: DMatrix<f64>,
    /// Outcome laws: entry j holds one matrix per exposure level, each
    /// k_y[j] rows by k_u columns, column u being the law of the outcome
    /// given (U = u, X = x).
    pub pr_y_given_ux: [Vec<DMatrix<f64>>; 3],
}

impl CategoricalParams {
    pub fn new(
        pr_u: DVector<f64>,
        pr_x_given_u: DMatrix<f64>,
        pr_y_given_ux: [Vec<DMatrix<f64>>; 3],
    ) -> Result<Self> {
        let k_u = pr_u.len();
        let k_x = pr_x_given_u.nrows();
        if k_u == 0 || k_x == 0 {
            return Err(Error::Validation("categorical params: empty dimensions".into()));
        }
        if pr_x_given_u.ncols() != k_u {
            return Err(Error::Validation(
                "categorical params: pr_x_given_u columns must match k_u".into(),
            ));
        }
        let mut k_y = [0usize; 3];
        for (j, mats) in pr_y_given_ux.iter().enumerate() {
            if mats.len() != k_x {
                return Err(Error::Validation(format!(
                    "categorical params: outcome {} needs one matrix per exposure level",
                    j + 1
                )));
            }
            k_y[j] = mats[0].nrows();
            for m in mats {
                if m.nrows() != k_y[j] || m.ncols() != k_u {
                    return Err(Error::Validation(format!(
                        "categorical params: outcome {} matrix has inconsistent shape",
                        j + 1
                    )));
                }
            }
            if k_y[j] == 0 {
                return Err(Error::Validation("categorical params: outcome with no levels".into()));
            }
        }
        let params = Self {
            k_u,
            k_x,
            k_y,
            pr_u,
            pr_x_given_u,
            pr_y_given_ux,
        };
        params.validate()?;
        Ok(params)
    }

    /// Check all probability constraints to a fixed tolerance.
    pub fn validate(&self) -> Result<()> {
        let tol = 1e-8;
        check_simplex(self.pr_u.as_slice(), tol, "pr_u")?;
        for u in 0..self.k_u {
            let col: Vec<f64> = (0..self.k_x).map(|x| self.pr_x_given_u[(x, u)]).collect();
            check_simplex(&col, tol, "pr_x_given_u")?;
        }
        for (j, mats) in self.pr_y_given_ux.iter().enumerate() {
            for (x, m) in mats.iter().enumerate() {
                for u in 0..self.k_u {
                    let col: Vec<f64> = (0..m.nrows()).map(|y| m[(y, u)]).collect();
                    check_simplex(
                        &col,
                        tol,
                        &format!("pr_y{}_given_ux at x={x}, u={u}", j + 1),
                    )?;
                }
            }
        }
        Ok(())
    }

    /// pr(Y^j = y | U = u, X = x), all indices 0-based.
    pub fn pr_y(&self, j: usize, y: usize, u: usize, x: usize) -> f64 {
        self.pr_y_given_ux[j][x][(y, u)]
    }

    /// Random parameter set with the outcome-one coding constraint
    /// (first-level probability strictly increasing in the latent class)
    /// enforced by per-exposure sorting. Used as a dispersed starting
    /// point for the least squares refinement.
    pub fn random_feasible<R: Rng>(
        k_u: usize,
        k_x: usize,
        k_y: [usize; 3],
        rng: &mut R,
    ) -> Self {
        let draw_simplex = |rng: &mut R, len: usize| -> Vec<f64> {
            let mut v: Vec<f64> = (0..len).map(|_| rng.random::<f64>().max(1e-6)).collect();
            let s: f64 = v.iter().sum();
            for e in &mut v {
                *e /= s;
            }
            v
        };
        let pr_u = DVector::from_vec(draw_simplex(rng, k_u));
        let mut pr_x_given_u = DMatrix::zeros(k_x, k_u);
        for u in 0..k_u {
            let col = draw_simplex(rng, k_x);
            for x in 0..k_x {
                pr_x_given_u[(x, u)] = col[x];
            }
        }
        let mut pr_y_given_ux: [Vec<DMatrix<f64>>; 3] = [Vec::new(), Vec::new(), Vec::new()];
        for (j, store) in pr_y_given_ux.iter_mut().enumerate() {
            for _x in 0..k_x {
                let mut m = DMatrix::zeros(k_y[j], k_u);
                for u in 0..k_u {
                    let col = draw_simplex(rng, k_y[j]);
                    for y in 0..k_y[j] {
                        m[(y, u)] = col[y];
                    }
                }
                if j == 0 {
                    // Sort latent columns by the first-level probability so
                    // the draw satisfies the coding constraint.
                    let mut order: Vec<usize> = (0..k_u).collect();
                    order.sort_by(|&a, &b| m[(0, a)].partial_cmp(&m[(0, b)]).unwrap());
                    let sorted = DMatrix::from_fn(k_y[j], k_u, |y, u| m[(y, order[u])]);
                    m = sorted;
                    // Break exact ties so the increase is strict.
                    for u in 1..k_u {
                        if m[(0, u)] <= m[(0, u - 1)] {
                            let bump = (m[(0, u - 1)] - m[(0, u)]) + 1e-4;
                            let take = bump.min(m[(1.min(k_y[j] - 1), u)] * 0.5);
                            m[(0, u)] += take;
                            m[(1.min(k_y[j] - 1), u)] -= take;
                        }
                    }
                }
                store.push(m);
            }
        }
        Self {
            k_u,
            k_x,
            k_y,
            pr_u,
            pr_x_given_u,
            pr_y_given_ux,
        }
    }
}

fn check_simplex(v: &[f64], tol: f64, what: &str) -> Result<()> {
    let mut sum = 0.0;
    for &p in v {
        if !(p.is_finite() && (-tol..=1.0 + tol).contains(&p)) {
            return Err(Error::Validation(format!("{what}: entry {p} outside [0, 1]")));
        }
        sum += p;
    }
    if (sum - 1.0).abs() > tol.max(1e-9 * v.len() as f64) {
        return Err(Error::Validation(format!("{what}: column sums to {sum}, not 1")));
    }
    Ok(())
}

/// Joint law of (X, Y1, Y2, Y3) stored as a dense probability tensor.
#[derive(Debug, Clone)]
pub struct JointTable {
    pub k_x: usize,
    pub k_y: [usize; 3],
    p: Vec<f64>,
}

impl JointTable {
    pub fn new(k_x: usize, k_y: [usize; 3], p: Vec<f64>) -> Result<Self> {
        let len = k_x * k_y[0] * k_y[1] * k_y[2];
        if p.len() != len {
            return Err(Error::Validation(format!(
                "joint table needs {len} cells, got {}",
                p.len()
            )));
        }
        if p.iter().any(|&v| !(v.is_finite() && v >= -1e-12)) {
            return Err(Error::Validation("joint table has a negative or non-finite cell".into()));
        }
        let mass: f64 = p.iter().sum();
        if (mass - 1.0).abs() > 1e-9 {
            return Err(Error::Validation(format!("joint table mass is {mass}, not 1")));
        }
        Ok(Self { k_x, k_y, p })
    }

    #[inline]
    fn idx(&self, x: usize, y1: usize, y2: usize, y3: usize) -> usize {
        ((x * self.k_y[0] + y1) * self.k_y[1] + y2) * self.k_y[2] + y3
    }

    /// pr(X = x, Y1 = y1, Y2 = y2, Y3 = y3), 0-based indices.
    pub fn pr(&self, x: usize, y1: usize, y2: usize, y3: usize) -> f64 {
        self.p[self.idx(x, y1, y2, y3)]
    }

    /// Marginal pr(X = x).
    pub fn pr_x(&self, x: usize) -> f64 {
        let mut s = 0.0;
        for y1 in 0..self.k_y[0] {
            for y2 in 0..self.k_y[1] {
                for y3 in 0..self.k_y[2] {
                    s += self.pr(x, y1, y2, y3);
                }
            }
        }
        s
    }

    /// Largest absolute cell difference between two tables of equal shape.
    pub fn max_abs_diff(&self, other: &JointTable) -> Option<f64> {
        if self.k_x != other.k_x || self.k_y != other.k_y {
            return None;
        }
        Some(
            self.p
                .iter()
                .zip(&other.p)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max),
        )
    }

    pub fn cells(&self) -> &[f64] {
        &self.p
    }
}

/// One observation of (X, Y1, Y2, Y3) with 0-based level indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CatRecord {
    pub x: usize,
    pub y: [usize; 3],
}

/// Conditional frequency tables that every estimator in this module
/// consumes: the exposure marginal, the per-exposure joint of (Y2, Y3),
/// and the same joint further split by the level of Y1.
#[derive(Debug, Clone)]
pub struct EmpiricalTables {
    /// Sample size behind the tables; 0 marks exact population tables.
    pub n: usize,
    pub k_x: usize,
    pub k_y: [usize; 3],
    /// Marginal frequencies of X.
    pub pr_x: DVector<f64>,
    /// Per exposure level: pr(Y2 = i, Y3 = j | X = x), k_y[1] by k_y[2].
    pub p23: Vec<DMatrix<f64>>,
    /// Per exposure level and Y1 level t:
    /// pr(Y1 = t, Y2 = i, Y3 = j | X = x).
    pub p123: Vec<Vec<DMatrix<f64>>>,
}

impl EmpiricalTables {
    /// Exact tables obtained by conditioning a population joint law.
    pub fn from_joint(table: &JointTable) -> Result<Self> {
        let k_x = table.k_x;
        let k_y = table.k_y;
        let mut pr_x = DVector::zeros(k_x);
        let mut p23 = Vec::with_capacity(k_x);
        let mut p123 = Vec::with_capacity(k_x);
        for x in 0..k_x {
            let px = table.pr_x(x);
            if px <= 0.0 {
                return Err(Error::EmptyStratum(format!(
                    "exposure level {} has zero probability",
                    x + 1
                )));
            }
            pr_x[x] = px;
            let mut m23 = DMatrix::zeros(k_y[1], k_y[2]);
            let mut m123 = vec![DMatrix::zeros(k_y[1], k_y[2]); k_y[0]];
            for y1 in 0..k_y[0] {
                for y2 in 0..k_y[1] {
                    for y3 in 0..k_y[2] {
                        let c = table.pr(x, y1, y2, y3) / px;
                        m123[y1][(y2, y3)] = c;
                        m23[(y2, y3)] += c;
                    }
                }
            }
            p23.push(m23);
            p123.push(m123);
        }
        Ok(Self {
            n: 0,
            k_x,
            k_y,
            pr_x,
            p23,
            p123,
        })
    }
}

/// Build frequency tables from raw records.
///
/// Level counts are declared by the caller; records outside the declared
/// ranges are rejected, and an exposure level with no observations is an
/// error because nothing can be conditioned on it.
pub fn empirical_tables(
    records: &[CatRecord],
    k_x: usize,
    k_y: [usize; 3],
) -> Result<EmpiricalTables> {
    if records.is_empty() {
        return Err(Error::Validation("empirical_tables: no records".into()));
    }
    if k_x == 0 || k_y.contains(&0) {
        return Err(Error::Validation("empirical_tables: zero level counts".into()));
    }
    let mut count_x = vec![0usize; k_x];
    let mut counts = vec![vec![DMatrix::<f64>::zeros(k_y[1], k_y[2]); k_y[0]]; k_x];
    for (i, r) in records.iter().enumerate() {
        if r.x >= k_x || r.y[0] >= k_y[0] || r.y[1] >= k_y[1] || r.y[2] >= k_y[2] {
            return Err(Error::Validation(format!(
                "record {i} has a level outside the declared ranges"
            )));
        }
        count_x[r.x] += 1;
        counts[r.x][r.y[0]][(r.y[1], r.y[2])] += 1.0;
    }
    let n = records.len();
    let mut pr_x = DVector::zeros(k_x);
    let mut p23 = Vec::with_capacity(k_x);
    let mut p123 = Vec::with_capacity(k_x);
    for x in 0..k_x {
        if count_x[x] == 0 {
            return Err(Error::EmptyStratum(format!(
                "exposure level {} was never observed",
                x + 1
            )));
        }
        pr_x[x] = count_x[x] as f64 / n as f64;
        let nx = count_x[x] as f64;
        let mut m23 = DMatrix::zeros(k_y[1], k_y[2]);
        let mut m123 = Vec::with_capacity(k_y[0]);
        for y1 in 0..k_y[0] {
            let m = &counts[x][y1] / nx;
            m23 += &m;
            m123.push(m);
        }
        p23.push(m23);
        p123.push(m123);
    }
    Ok(EmpiricalTables {
        n,
        k_x,
        k_y,
        pr_x,
        p23,
        p123,
    })
}

/// Population joint law implied by a parameter set.
pub fn forward_joint(params: &CategoricalParams) -> Result<JointTable> {
    params.validate()?;
    let (k_x, k_y, k_u) = (params.k_x, params.k_y, params.k_u);
    let mut p = vec![0.0f64; k_x * k_y[0] * k_y[1] * k_y[2]];
    let mut at = 0usize;
    for x in 0..k_x {
        for y1 in 0..k_y[0] {
            for y2 in 0..k_y[1] {
                for y3 in 0..k_y[2] {
                    let mut cell = 0.0;
                    for u in 0..k_u {
                        cell += params.pr_u[u]
                            * params.pr_x_given_u[(x, u)]
                            * params.pr_y(0, y1, u, x)
                            * params.pr_y(1, y2, u, x)
                            * params.pr_y(2, y3, u, x);
                    }
                    p[at] = cell;
                    at += 1;
                }
            }
        }
    }
    JointTable::new(k_x, k_y, p)
}

/// Distribution of each outcome under an intervention that sets the
/// exposure, one probability vector per (outcome, exposure level).
#[derive(Debug, Clone)]
pub struct PotentialOutcomeDist {
    pub k_x: usize,
    pub k_y: [usize; 3],
    /// dist[j][x][y] = pr of level y for outcome j when exposure is set
    /// to x.
    pub dist: [Vec<DVector<f64>>; 3],
}

impl PotentialOutcomeDist {
    pub fn prob(&self, j: usize, x: usize, y: usize) -> f64 {
        self.dist[j][x][y]
    }
}

/// Standardization over the recovered confounder law:
/// pr{Y^j(x) = y} = sum_u pr(y | u, x) pr(u).
pub fn g_formula(params: &CategoricalParams) -> PotentialOutcomeDist {
    let mut dist: [Vec<DVector<f64>>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    for (j, store) in dist.iter_mut().enumerate() {
        for x in 0..params.k_x {
            let v = DVector::from_fn(params.k_y[j], |y, _| {
                (0..params.k_u)
                    .map(|u| params.pr_y(j, y, u, x) * params.pr_u[u])
                    .sum()
            });
            store.push(v);
        }
    }
    PotentialOutcomeDist {
        k_x: params.k_x,
        k_y: params.k_y,
        dist,
    }
}

/// Confounded baseline that reads conditional frequencies as if they were
/// interventional: pr(Y^j = y | X = x).
pub fn crude_estimate(tables: &EmpiricalTables) -> PotentialOutcomeDist {
    let k_y = tables.k_y;
    let mut dist: [Vec<DVector<f64>>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    for x in 0..tables.k_x {
        let mut d1 = DVector::zeros(k_y[0]);
        for (t, m) in tables.p123[x].iter().enumerate() {
            d1[t] = m.sum();
        }
        dist[0].push(d1);
        let mut d2 = DVector::zeros(k_y[1]);
        let mut d3 = DVector::zeros(k_y[2]);
        for i in 0..k_y[1] {
            for j in 0..k_y[2] {
                let v = tables.p23[x][(i, j)];
                d2[i] += v;
                d3[j] += v;
            }
        }
        dist[1].push(d2);
        dist[2].push(d3);
    }
    PotentialOutcomeDist {
        k_x: tables.k_x,
        k_y,
        dist,
    }
}

/// Diagnostics gathered while running the plug-in estimator.
#[derive(Debug, Clone)]
pub struct PluginDiagnostics {
    /// Condition number of the (Y2, Y3) table per exposure level.
    pub cond_p23: Vec<f64>,
    /// Smallest eigenvalue gap of the first-level decomposition per
    /// exposure level.
    pub min_gap: Vec<f64>,
    /// Largest imaginary part met across all decompositions.
    pub max_imag: f64,
    /// Total probability mass clipped while projecting onto simplexes.
    pub clipped_mass: f64,
    /// Largest off-diagonal magnitude discarded when reading the latent
    /// class weights off the recovered diagonal factor.
    pub max_offdiag: f64,
    /// Latent class order per exposure level implied by eigenvector
    /// matching against the first exposure level.
    pub per_x_order: Vec<Vec<usize>>,
    /// False only when some exposure level's eigenvector matching beats
    /// the eigenvalue coding by more than [`ORDER_MARGIN`].
    pub order_consistent: bool,
}

/// Everything recovered from one exposure level.
struct PerLevel {
    /// Outcome-two law given (U, x): k_y[1] by k_u, latent columns coded
    /// by ascending first-level eigenvalue.
    b: DMatrix<f64>,
    /// Outcome-three law given (U, x).
    c: DMatrix<f64>,
    /// Outcome-one law given (U, x): k_y[0] by k_u.
    a: DMatrix<f64>,
    /// pr(U = u | X = x).
    pr_u_given_x: DVector<f64>,
    cond: f64,
    min_gap: f64,
    max_imag: f64,
    clipped: f64,
    max_offdiag: f64,
}

/// Realify an eigendecomposition, reading magnitudes throughout: every
/// eigenvalue contributes its modulus and every eigenvector its
/// elementwise modulus (a conjugate pair shares one modulus column). At
/// the population the operators are similar to nonnegative diagonals and
/// the eigenvectors are probability columns, so the magnitude reading is
/// exact there. In samples it keeps a noise-corrupted mixed-sign column
/// inside the simplex up to scale, where clipping the signed entries
/// would collapse it onto a vertex and manufacture fake class
/// separation. Complex parts beyond the limit fail instead.
fn real_parts(
    pairs: &EigenPairs,
    x: usize,
    imag_limit_rel: f64,
) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let rho = pairs.spectral_radius().max(f64::MIN_POSITIVE);
    let tol = imag_limit_rel * rho;
    let imag = pairs.max_imag();
    if imag > tol {
        return Err(Error::ComplexSpectrum {
            x_level: x + 1,
            imag,
            tol,
        });
    }
    let k = pairs.values.len();
    let mut values: Vec<f64> = pairs.values.iter().map(|v| v.norm()).collect();
    let mut vectors = DMatrix::zeros(k, k);
    let mut j = 0usize;
    while j < k {
        let lam = pairs.values[j];
        let is_pair = lam.im != 0.0
            && j + 1 < k
            && (pairs.values[j + 1].re - lam.re).abs() <= 1e-12 * rho.max(1.0)
            && (pairs.values[j + 1].im + lam.im).abs() <= 1e-12 * rho.max(1.0);
        if is_pair {
            let modulus = lam.norm();
            values[j] = modulus;
            values[j + 1] = modulus;
            for i in 0..k {
                let m = pairs.vectors[(i, j)].norm();
                vectors[(i, j)] = m;
                vectors[(i, j + 1)] = m;
            }
            j += 2;
        } else {
            for i in 0..k {
                vectors[(i, j)] = pairs.vectors[(i, j)].norm();
            }
            j += 1;
        }
    }
    Ok((values, vectors))
}

/// Clip to [0, 1] and rescale to sum one, reporting how much mass moved.
fn to_simplex(col: &mut [f64]) -> Result<f64> {
    let mut clipped = 0.0;
    for v in col.iter_mut() {
        if *v < 0.0 {
            clipped += -*v;
            *v = 0.0;
        } else if *v > 1.0 {
            clipped += *v - 1.0;
            *v = 1.0;
        }
    }
    let sum: f64 = col.iter().sum();
    if sum <= 0.0 {
        return Err(Error::Validation(
            "probability column collapsed to zero after clipping".into(),
        ));
    }
    for v in col.iter_mut() {
        *v /= sum;
    }
    Ok(clipped)
}

/// Absolute cosine similarity between every column pair of two matrices.
fn column_similarity(cols: &DMatrix<f64>, reference: &DMatrix<f64>) -> DMatrix<f64> {
    let k = cols.ncols();
    let mut sim = DMatrix::zeros(k, k);
    for a in 0..k {
        for b in 0..k {
            let ca = cols.column(a);
            let cb = reference.column(b);
            let dot: f64 = ca.dot(&cb);
            let na = ca.norm();
            let nb = cb.norm();
            sim[(a, b)] = if na > 0.0 && nb > 0.0 {
                (dot / (na * nb)).abs()
            } else {
                0.0
            };
        }
    }
    sim
}

/// Assignment of rows to distinct columns maximizing the total score.
/// Class counts are small, so exhaustive search over permutations is
/// exact and cheap; a single locally best pair could otherwise hijack
/// the pairing when outcome laws shift between exposure levels.
fn best_assignment(sim: &DMatrix<f64>) -> (Vec<usize>, f64) {
    let k = sim.nrows();
    let mut best = (f64::NEG_INFINITY, vec![0usize; k]);
    let mut current = vec![usize::MAX; k];
    let mut used = vec![false; k];
    assign_rec(sim, 0, 0.0, &mut current, &mut used, &mut best);
    (best.1, best.0)
}

/// Match each column of `cols` to a distinct reference column by
/// maximizing the total absolute cosine similarity over all pairings.
fn match_columns(cols: &DMatrix<f64>, reference: &DMatrix<f64>) -> Vec<usize> {
    best_assignment(&column_similarity(cols, reference)).0
}

fn assign_rec(
    sim: &DMatrix<f64>,
    row: usize,
    total: f64,
    current: &mut Vec<usize>,
    used: &mut Vec<bool>,
    best: &mut (f64, Vec<usize>),
) {
    let k = current.len();
    if row == k {
        if total > best.0 {
            *best = (total, current.clone());
        }
        return;
    }
    for b in 0..k {
        if used[b] {
            continue;
        }
        used[b] = true;
        current[row] = b;
        assign_rec(sim, row + 1, total + sim[(row, b)], current, used, best);
        used[b] = false;
    }
    current[row] = usize::MAX;
}

fn decompose_level(tables: &EmpiricalTables, x: usize, opts: &PluginOptions) -> Result<PerLevel> {
    let k = tables.k_y[1];
    let p23 = &tables.p23[x];

    let svd = p23.clone().svd(false, false);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    let cond = if smin > 0.0 { smax / smin } else { f64::INFINITY };
    if !(cond.is_finite() && cond <= 1.0 / RANK_EPS) {
        return Err(Error::RankDeficient {
            x_level: x + 1,
            cond,
        });
    }
    let p23_inv = p23.clone().try_inverse().ok_or(Error::RankDeficient {
        x_level: x + 1,
        cond,
    })?;

    let mut clipped = 0.0;
    let mut max_imag = 0.0f64;

    // First-level decomposition fixes the latent coding and the basis.
    let c0 = &tables.p123[x][0] * &p23_inv;
    let pairs0 = eig_real(&c0)?;
    let (vals0, vecs0) = real_parts(&pairs0, x, opts.imag_limit_rel)?;
    max_imag = max_imag.max(pairs0.max_imag());
    let mut min_gap = f64::INFINITY;
    for w in vals0.windows(2) {
        min_gap = min_gap.min((w[1] - w[0]).abs());
    }

    // Eigenvector columns become the outcome-two law given (U, x).
    let mut b = DMatrix::zeros(k, k);
    for u in 0..k {
        let mut col: Vec<f64> = (0..k).map(|i| vecs0[(i, u)]).collect();
        clipped += to_simplex(&mut col)?;
        for i in 0..k {
            b[(i, u)] = col[i];
        }
    }

    // Remaining levels of outcome one: decompose again and assign each
    // eigenvalue to the latent slot whose basis vector it reproduces.
    let k1 = tables.k_y[0];
    let mut a = DMatrix::zeros(k1, k);
    for u in 0..k {
        a[(0, u)] = vals0[u];
    }
    for t in 1..k1 {
        let ct = &tables.p123[x][t] * &p23_inv;
        let pairs = eig_real(&ct)?;
        let (vals, vecs) = real_parts(&pairs, x, opts.imag_limit_rel)?;
        max_imag = max_imag.max(pairs.max_imag());
        let assign = match_columns(&vecs, &vecs0);
        for (from, &slot) in assign.iter().enumerate() {
            a[(t, slot)] = vals[from];
        }
    }
    for u in 0..k {
        let mut col: Vec<f64> = (0..k1).map(|t| a[(t, u)]).collect();
        clipped += to_simplex(&mut col)?;
        for t in 0..k1 {
            a[(t, u)] = col[t];
        }
    }

    // Symmetric construction on the transposed tables recovers the
    // outcome-three law; the eigenvalues repeat, so ascending order codes
    // classes the same way.
    let p23_t = p23.transpose();
    let p23_t_inv = p23_t.clone().try_inverse().ok_or(Error::RankDeficient {
        x_level: x + 1,
        cond,
    })?;
    let c0t = tables.p123[x][0].transpose() * &p23_t_inv;
    let pairs3 = eig_real(&c0t)?;
    let (_vals3, vecs3) = real_parts(&pairs3, x, opts.imag_limit_rel)?;
    max_imag = max_imag.max(pairs3.max_imag());
    let mut c = DMatrix::zeros(k, k);
    for u in 0..k {
        let mut col: Vec<f64> = (0..k).map(|i| vecs3[(i, u)]).collect();
        clipped += to_simplex(&mut col)?;
        for i in 0..k {
            c[(i, u)] = col[i];
        }
    }

    // Latent class weights given x come off the diagonal of
    // B^-1 P23 (C')^-1; off-diagonal leakage is reported. The
    // pseudoinverse agrees with the inverse away from singularity and
    // splits the weight of classes this exposure level cannot separate
    // (duplicated columns from a merged conjugate pair) equally.
    let b_inv = b
        .clone()
        .pseudo_inverse(1e-10)
        .map_err(|_| Error::RankDeficient {
            x_level: x + 1,
            cond: f64::INFINITY,
        })?;
    let ct_inv = c
        .transpose()
        .pseudo_inverse(1e-10)
        .map_err(|_| Error::RankDeficient {
            x_level: x + 1,
            cond: f64::INFINITY,
        })?;
    let m = b_inv * p23 * ct_inv;
    // The weights sit on the diagonal once the outcome-three columns are
    // attached to the right classes. Their eigenvalue order is a noisy
    // copy of the order that coded the classes, so instead of trusting
    // it, pick the pairing that carries the most diagonal mass.
    let mut score = DMatrix::zeros(k, k);
    for i in 0..k {
        for j in 0..k {
            score[(i, j)] = m[(i, j)].abs();
        }
    }
    let (assign, _) = best_assignment(&score);
    let c = {
        let mut cc = DMatrix::zeros(k, k);
        for (slot, &src) in assign.iter().enumerate() {
            cc.set_column(slot, &c.column(src));
        }
        cc
    };
    let mut max_offdiag = 0.0f64;
    for i in 0..k {
        for j in 0..k {
            if assign[i] != j {
                max_offdiag = max_offdiag.max(m[(i, j)].abs());
            }
        }
    }
    let mut w: Vec<f64> = (0..k).map(|u| m[(u, assign[u])]).collect();
    clipped += to_simplex(&mut w)?;
    // Keep every class weight strictly positive so Bayes inversion and
    // the log-odds coding of the refinement stay defined.
    let mut floored = 0.0;
    for v in w.iter_mut() {
        if *v < CLASS_FLOOR {
            floored += CLASS_FLOOR - *v;
            *v = CLASS_FLOOR;
        }
    }
    if floored > 0.0 {
        let sum: f64 = w.iter().sum();
        for v in w.iter_mut() {
            *v /= sum;
        }
    }
    let pr_u_given_x = DVector::from_vec(w);

    Ok(PerLevel {
        b,
        c,
        a,
        pr_u_given_x,
        cond,
        min_gap,
        max_imag,
        clipped,
        max_offdiag,
    })
}

/// Cross-exposure coding check. Ascending eigenvalues code the classes
/// within each exposure level; the outcome-two laws attached to those
/// eigenvalues then have to line up across levels. A flip is declared
/// only when some non-identity pairing of the columns beats the identity
/// pairing decisively, so that sampling noise in the eigenvectors does
/// not trip the verdict.
fn level_orders(levels: &[PerLevel], order_margin: f64) -> (Vec<Vec<usize>>, bool) {
    let mut orders = Vec::with_capacity(levels.len());
    let mut consistent = true;
    for (x, lvl) in levels.iter().enumerate() {
        if x == 0 {
            orders.push((0..lvl.b.ncols()).collect());
            continue;
        }
        let sim = column_similarity(&lvl.b, &levels[0].b);
        let (assign, total) = best_assignment(&sim);
        let identity_total = sim.trace();
        if assign.iter().enumerate().any(|(i, &s)| i != s)
            && total - identity_total > order_margin
        {
            consistent = false;
        }
        orders.push(assign);
    }
    (orders, consistent)
}

fn identification_shape_check(tables: &EmpiricalTables) -> Result<()> {
    if tables.k_y[1] != tables.k_y[2] {
        return Err(Error::Validation(format!(
            "identification needs matching level counts for outcomes two and three, got {} and {}",
            tables.k_y[1], tables.k_y[2]
        )));
    }
    if tables.k_y[1] < 2 {
        return Err(Error::Validation(
            "identification needs at least two levels in every outcome; \
             a single-level outcome leaves only two informative outcomes, \
             which is not enough to separate the confounder"
                .into(),
        ));
    }
    if tables.k_y[0] < 2 {
        return Err(Error::Validation(
            "identification needs at least two levels in outcome one".into(),
        ));
    }
    Ok(())
}

/// Plug-in identification: eigendecomposition per exposure level, latent
/// coding by ascending first-level eigenvalue, then reassembly of the full
/// parameter set.
///
/// The number of latent classes equals the (shared) level count of
/// outcomes two and three. Identification requirements are enforced at
/// their default strictness; the estimation pipeline relaxes them through
/// [`plugin_identify_with`].
pub fn plugin_identify(
    tables: &EmpiricalTables,
) -> Result<(CategoricalParams, PluginDiagnostics)> {
    plugin_identify_with(tables, &PluginOptions::default())
}

/// [`plugin_identify`] with explicit failure thresholds.
pub fn plugin_identify_with(
    tables: &EmpiricalTables,
    opts: &PluginOptions,
) -> Result<(CategoricalParams, PluginDiagnostics)> {
    identification_shape_check(tables)?;
    let k_u = tables.k_y[1];
    let k_x = tables.k_x;

    let mut levels = Vec::with_capacity(k_x);
    for x in 0..k_x {
        levels.push(decompose_level(tables, x, opts)?);
    }

    let (per_x_order, order_consistent) = level_orders(&levels, opts.order_margin);
    let diagnostics = PluginDiagnostics {
        cond_p23: levels.iter().map(|l| l.cond).collect(),
        min_gap: levels.iter().map(|l| l.min_gap).collect(),
        max_imag: levels.iter().map(|l| l.max_imag).fold(0.0, f64::max),
        clipped_mass: levels.iter().map(|l| l.clipped).sum(),
        max_offdiag: levels.iter().map(|l| l.max_offdiag).fold(0.0, f64::max),
        per_x_order,
        order_consistent,
    };

    if !order_consistent {
        return Err(Error::OrderInstability {
            orderings: format!("{:?}", diagnostics.per_x_order),
        });
    }

    // Mix the per-exposure class weights into pr(U) and invert to
    // pr(X | U).
    let mut pr_u = DVector::zeros(k_u);
    for x in 0..k_x {
        for u in 0..k_u {
            pr_u[u] += levels[x].pr_u_given_x[u] * tables.pr_x[x];
        }
    }
    let mut pr_x_given_u = DMatrix::zeros(k_x, k_u);
    for x in 0..k_x {
        for u in 0..k_u {
            pr_x_given_u[(x, u)] = levels[x].pr_u_given_x[u] * tables.pr_x[x] / pr_u[u];
        }
    }
    // Absorb roundoff so each column is an exact simplex.
    for u in 0..k_u {
        let s: f64 = (0..k_x).map(|x| pr_x_given_u[(x, u)]).sum();
        for x in 0..k_x {
            pr_x_given_u[(x, u)] /= s;
        }
    }

    let pr_y_given_ux: [Vec<DMatrix<f64>>; 3] = [
        levels.iter().map(|l| l.a.clone()).collect(),
        levels.iter().map(|l| l.b.clone()).collect(),
        levels.iter().map(|l| l.c.clone()).collect(),
    ];
    let params = CategoricalParams::new(pr_u, pr_x_given_u, pr_y_given_ux)?;
    Ok((params, diagnostics))
}

/// Rank, spectral gap, and coding consistency report for the
/// identification requirements. Never fails: defects show up as verdicts.
#[derive(Debug, Clone)]
pub struct ConditionReport {
    /// Condition number of the (Y2, Y3) table per exposure level.
    pub cond_p23: Vec<f64>,
    /// True when every exposure level passes the condition number cutoff.
    pub rank_ok: bool,
    /// Minimal eigenvalue gap per exposure level, when computable.
    pub min_gap: Vec<Option<f64>>,
    /// Latent order matched across exposure levels, when computable.
    pub per_x_order: Option<Vec<Vec<usize>>>,
    /// False when eigenvalue sorting and eigenvector matching disagree,
    /// which signals a latent coding that flips between exposure levels.
    pub order_consistent: bool,
    /// Set when some step of the check could not run at all.
    pub failure: Option<String>,
}

pub fn check_conditions(tables: &EmpiricalTables) -> ConditionReport {
    if let Err(e) = identification_shape_check(tables) {
        return ConditionReport {
            cond_p23: Vec::new(),
            rank_ok: false,
            min_gap: Vec::new(),
            per_x_order: None,
            order_consistent: false,
            failure: Some(e.to_string()),
        };
    }
    let mut conds = Vec::with_capacity(tables.k_x);
    let mut gaps = Vec::with_capacity(tables.k_x);
    let mut rank_ok = true;
    let mut levels = Vec::new();
    let mut failure = None;
    for x in 0..tables.k_x {
        let svd = tables.p23[x].clone().svd(false, false);
        let smax = svd.singular_values.max();
        let smin = svd.singular_values.min();
        let cond = if smin > 0.0 { smax / smin } else { f64::INFINITY };
        conds.push(cond);
        if !(cond.is_finite() && cond <= 1.0 / RANK_EPS) {
            rank_ok = false;
            gaps.push(None);
            continue;
        }
        // Lenient decomposition: the report should still carry gap and
        // ordering information when spectra are noisy.
        match decompose_level(tables, x, &PluginOptions::lenient()) {
            Ok(lvl) => {
                gaps.push(Some(lvl.min_gap));
                levels.push(lvl);
            }
            Err(e) => {
                gaps.push(None);
                failure = Some(e.to_string());
            }
        }
    }
    let (per_x_order, order_consistent) = if rank_ok && levels.len() == tables.k_x {
        let (orders, ok) = level_orders(&levels, ORDER_MARGIN);
        (Some(orders), ok)
    } else {
        (None, false)
    };
    ConditionReport {
        cond_p23: conds,
        rank_ok,
        min_gap: gaps,
        per_x_order,
        order_consistent,
        failure,
    }
}

#[cfg(test)]
mod tests;
