//! Data preparation and assumption diagnostics for applied tables.
//!
//! The intended flow mirrors how the estimators get used on real data:
//! ingest a named numeric table ([`RawTable`]), regress confounders out
//! of the exposure and outcomes ([`residualize`]), keep the outcomes
//! with a detectable exposure association ([`screen_outcomes`]), fit
//! factors, and audit the residual covariance for off-diagonal
//! structure ([`check_error_diagonality`]).

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::linear_sem::{Dataset, FactorFit};
use crate::{Error, Result};

#[cfg(test)]
mod tests;

/// Named numeric table as ingested from a file: one exposure column,
/// `p` outcome columns, and `q` covariate columns.
///
/// Missing values are encoded as NaN on input; any row containing one
/// is dropped at construction and counted in `dropped_rows`, so a built
/// table is always complete. Column names must be unique across the
/// whole table. `log_columns` lists columns (by name) to log-transform
/// before residualization.
#[derive(Debug, Clone)]
pub struct RawTable {
    pub exposure_name: String,
    pub outcome_names: Vec<String>,
    pub covariate_names: Vec<String>,
    /// Exposure values, length n.
    pub exposure: DVector<f64>,
    /// Outcomes, n rows by p columns.
    pub outcomes: DMatrix<f64>,
    /// Covariates, n rows by q columns; q may be 0.
    pub covariates: DMatrix<f64>,
    pub log_columns: Vec<String>,
    /// Rows removed at construction because an entry was missing.
    pub dropped_rows: usize,
}

impl RawTable {
    /// Build a table from named columns. Infinite entries are rejected;
    /// NaN entries mark missing data and drop their whole row.
    pub fn new(
        exposure: (String, Vec<f64>),
        outcomes: Vec<(String, Vec<f64>)>,
        covariates: Vec<(String, Vec<f64>)>,
        log_columns: Vec<String>,
    ) -> Result<Self> {
        let (exposure_name, exposure_raw) = exposure;
        if outcomes.is_empty() {
            return Err(Error::Validation("raw table: no outcome columns".into()));
        }
        let n_raw = exposure_raw.len();
        let mut names = vec![exposure_name.clone()];
        for (name, vals) in outcomes.iter().chain(covariates.iter()) {
            if vals.len() != n_raw {
                return Err(Error::Validation(format!(
                    "raw table: column {name} has {} rows, expected {n_raw}",
                    vals.len()
                )));
            }
            names.push(name.clone());
        }
        let mut sorted = names.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != names.len() {
            return Err(Error::Validation("raw table: duplicate column name".into()));
        }
        for name in &log_columns {
            if !names.contains(name) {
                return Err(Error::Validation(format!(
                    "raw table: log transform requested for unknown column {name}"
                )));
            }
        }
        for (name, vals) in std::iter::once(&(exposure_name.clone(), exposure_raw.clone()))
            .chain(outcomes.iter())
            .chain(covariates.iter())
        {
            if vals.iter().any(|v| v.is_infinite()) {
                return Err(Error::Validation(format!(
                    "raw table: column {name} has an infinite entry"
                )));
            }
        }

        let has_missing = |row: usize| {
            exposure_raw[row].is_nan()
                || outcomes.iter().any(|(_, v)| v[row].is_nan())
                || covariates.iter().any(|(_, v)| v[row].is_nan())
        };
        let keep: Vec<usize> = (0..n_raw).filter(|&r| !has_missing(r)).collect();
        let dropped_rows = n_raw - keep.len();
        if keep.is_empty() {
            return Err(Error::Validation("raw table: no complete rows".into()));
        }
        let n = keep.len();
        let exposure = DVector::from_iterator(n, keep.iter().map(|&r| exposure_raw[r]));
        let outcome_mat =
            DMatrix::from_fn(n, outcomes.len(), |r, c| outcomes[c].1[keep[r]]);
        let covariate_mat =
            DMatrix::from_fn(n, covariates.len(), |r, c| covariates[c].1[keep[r]]);
        Ok(RawTable {
            exposure_name,
            outcome_names: outcomes.into_iter().map(|(n, _)| n).collect(),
            covariate_names: covariates.into_iter().map(|(n, _)| n).collect(),
            exposure,
            outcomes: outcome_mat,
            covariates: covariate_mat,
            log_columns,
            dropped_rows,
        })
    }

    pub fn n(&self) -> usize {
        self.exposure.len()
    }

    pub fn p(&self) -> usize {
        self.outcomes.ncols()
    }

    pub fn q(&self) -> usize {
        self.covariates.ncols()
    }

    fn wants_log(&self, name: &str) -> bool {
        self.log_columns.iter().any(|c| c == name)
    }
}

/// Output of [`residualize`]: the prepared dataset plus any columns
/// whose residual collapsed to zero (for example an outcome that is an
/// exact linear function of the covariates).
#[derive(Debug, Clone)]
pub struct Residualized {
    pub data: Dataset,
    /// Names of exposure or outcome columns with no variance left after
    /// removing the covariate span.
    pub degenerate: Vec<String>,
}

fn log_column(name: &str, col: &mut DVector<f64>) -> Result<()> {
    for (row, v) in col.iter_mut().enumerate() {
        if *v <= 0.0 {
            return Err(Error::NonPositiveLog { column: name.to_string(), row: row + 1 });
        }
        *v = v.ln();
    }
    Ok(())
}

/// Regress the exposure and every outcome on the covariates plus an
/// intercept and return the residuals as a centered [`Dataset`].
///
/// Log transforms requested in the table are applied first. With no
/// covariates this reduces to mean-centering every column. Covariate
/// collinearity (including a constant covariate, which duplicates the
/// intercept) is an error; an exposure or outcome column that the
/// covariates reproduce exactly is returned as-is (all zeros) and
/// flagged by name instead.
pub fn residualize(raw: &RawTable) -> Result<Residualized> {
    let n = raw.n();
    let q = raw.q();
    if n < q + 2 {
        return Err(Error::Validation(format!(
            "residualize: {n} rows cannot support {q} covariates plus an intercept"
        )));
    }

    let mut design = DMatrix::from_element(n, q + 1, 1.0);
    for (c, name) in raw.covariate_names.iter().enumerate() {
        let mut col = raw.covariates.column(c).clone_owned();
        if raw.wants_log(name) {
            log_column(name, &mut col)?;
        }
        design.set_column(c + 1, &col);
    }

    let mut targets = DMatrix::zeros(n, raw.p() + 1);
    let mut x = raw.exposure.clone();
    if raw.wants_log(&raw.exposure_name) {
        log_column(&raw.exposure_name, &mut x)?;
    }
    targets.set_column(0, &x);
    for (c, name) in raw.outcome_names.iter().enumerate() {
        let mut col = raw.outcomes.column(c).clone_owned();
        if raw.wants_log(name) {
            log_column(name, &mut col)?;
        }
        targets.set_column(c + 1, &col);
    }

    let svd = design.clone().svd(true, true);
    let smax = svd.singular_values.max();
    if svd.singular_values.iter().any(|&s| s <= crate::numerics::RANK_TOL * smax) {
        return Err(Error::CovariateCollinearity);
    }
    let coef = svd
        .solve(&targets, crate::numerics::RANK_TOL * smax)
        .map_err(|e| Error::Validation(format!("residualize: {e}")))?;
    let resid = &targets - design * coef;

    let mut degenerate = Vec::new();
    let names = std::iter::once(&raw.exposure_name).chain(raw.outcome_names.iter());
    for (c, name) in names.enumerate() {
        let before = targets.column(c).norm_squared();
        let after = resid.column(c).norm_squared();
        if before == 0.0 || after <= 1e-16 * before {
            degenerate.push(name.clone());
        }
    }

    let x = resid.column(0).clone_owned();
    let y = resid.columns(1, raw.p()).clone_owned();
    Ok(Residualized { data: Dataset::new(x, y)?.center(), degenerate })
}

/// Per-outcome screening statistics from [`screen_outcomes`].
#[derive(Debug, Clone, Serialize)]
pub struct OutcomeScreen {
    pub index: usize,
    /// Slope of the outcome on the exposure.
    pub coefficient: f64,
    /// Homoskedastic OLS standard error of the slope.
    pub std_error: f64,
    /// Retention cutoff: std_error times sqrt(2 log p).
    pub threshold: f64,
    pub retained: bool,
}

/// Outcome screening result: which columns show a detectable exposure
/// association.
#[derive(Debug, Clone, Serialize)]
pub struct ScreenReport {
    pub outcomes: Vec<OutcomeScreen>,
    /// Indices with |coefficient| above the threshold, ascending.
    pub retained: Vec<usize>,
}

/// Regress each outcome on the exposure and keep those whose slope
/// exceeds sqrt(2 log p) standard errors.
///
/// The multiplier grows with the outcome count so that under the null
/// the chance of any false retention stays controlled. A perfectly
/// collinear outcome (zero residual) has standard error 0 and is
/// retained whenever its slope is nonzero.
pub fn screen_outcomes(data: &Dataset) -> ScreenReport {
    let n = data.n();
    let p = data.p();
    let nf = n as f64;
    let mult = (2.0 * (p as f64).ln()).sqrt();

    let xm = data.x.sum() / nf;
    let xc: Vec<f64> = data.x.iter().map(|v| v - xm).collect();
    let sxx: f64 = xc.iter().map(|v| v * v).sum();

    let mut outcomes = Vec::with_capacity(p);
    let mut retained = Vec::new();
    for j in 0..p {
        let col = data.y.column(j);
        let ym = col.sum() / nf;
        let sxy: f64 = xc.iter().zip(col.iter()).map(|(x, y)| x * (y - ym)).sum();
        let (coefficient, std_error) = if sxx > 0.0 {
            let coef = sxy / sxx;
            let rss: f64 = xc
                .iter()
                .zip(col.iter())
                .map(|(x, y)| {
                    let e = (y - ym) - coef * x;
                    e * e
                })
                .sum();
            let sigma2 = if n > 2 { rss / (nf - 2.0) } else { f64::INFINITY };
            (coef, (sigma2 / sxx).sqrt())
        } else {
            (0.0, f64::INFINITY)
        };
        let threshold = std_error * mult;
        let keep = coefficient.abs() > threshold;
        if keep {
            retained.push(j);
        }
        outcomes.push(OutcomeScreen {
            index: j,
            coefficient,
            std_error,
            threshold,
            retained: keep,
        });
    }
    ScreenReport { outcomes, retained }
}

/// One residual-covariance entry that survived hard thresholding.
#[derive(Debug, Clone, Serialize)]
pub struct OffDiagonal {
    pub i: usize,
    pub j: usize,
    pub value: f64,
    pub threshold: f64,
}

/// Residual-covariance diagnostic from [`check_error_diagonality`].
#[derive(Debug, Clone, Serialize)]
pub struct DiagonalityReport {
    /// Off-diagonal entries above their threshold, by (i, j) with i < j.
    pub surviving: Vec<OffDiagonal>,
    pub num_nonzero: usize,
    /// Outcome subset whose thresholded off-diagonal block is all zero,
    /// found by greedy removal; ascending.
    pub suggested_subset: Vec<usize>,
    /// Diagonal of the residual covariance, one entry per outcome.
    pub variances: Vec<f64>,
}

/// Audit the covariance left after factor removal for off-diagonal
/// structure.
///
/// Forms R = Sigma_hat - Gamma_hat Gamma_hat' and hard-thresholds each
/// off-diagonal at `mult * sqrt(R_ii R_jj) * (sqrt(log(p)/n) + 1/sqrt(p))`
/// where `mult` defaults to 2. The 1/sqrt(p) term absorbs the finite-p
/// bias of spectral truncation, which leaves small systematic
/// off-diagonals even when the true errors are independent; without it
/// the check flags structure on data that follows the model exactly.
/// Entries above threshold indicate outcome pairs whose errors
/// correlate beyond what the factor model explains; the report
/// suggests a maximal clean subset by repeatedly dropping the outcome
/// in the most surviving pairs (ties break toward the higher index).
pub fn check_error_diagonality(
    data: &Dataset,
    fit: &FactorFit,
    threshold_mult: Option<f64>,
) -> DiagonalityReport {
    let p = data.p();
    assert_eq!(fit.loadings.nrows(), p, "factor fit does not match the dataset");
    let mult = threshold_mult.unwrap_or(2.0);
    let n = data.n() as f64;

    let mut yc = data.y.clone();
    for mut col in yc.column_iter_mut() {
        let m = col.sum() / n;
        col.iter_mut().for_each(|v| *v -= m);
    }
    let sigma = yc.transpose() * &yc / (n - 1.0);
    let resid = sigma - &fit.loadings * fit.loadings.transpose();

    let rate = ((p as f64).ln() / n).sqrt() + 1.0 / (p as f64).sqrt();
    let mut surviving = Vec::new();
    for i in 0..p {
        for j in i + 1..p {
            let scale = resid[(i, i)].max(0.0) * resid[(j, j)].max(0.0);
            let threshold = mult * scale.sqrt() * rate;
            if resid[(i, j)].abs() > threshold {
                surviving.push(OffDiagonal { i, j, value: resid[(i, j)], threshold });
            }
        }
    }

    let mut active = vec![true; p];
    loop {
        let mut counts = vec![0usize; p];
        for pair in &surviving {
            if active[pair.i] && active[pair.j] {
                counts[pair.i] += 1;
                counts[pair.j] += 1;
            }
        }
        // max_by_key keeps the last maximum, so ties go to the higher index.
        let worst = (0..p).max_by_key(|&j| counts[j]).unwrap_or(0);
        if counts[worst] == 0 {
            break;
        }
        active[worst] = false;
    }

    DiagonalityReport {
        num_nonzero: surviving.len(),
        surviving,
        suggested_subset: (0..p).filter(|&j| active[j]).collect(),
        variances: (0..p).map(|j| resid[(j, j)]).collect(),
    }
}
