//! Seeded synthetic-data generators for the two benchmark designs and
//! the table replication harness.
//!
//! The categorical design is a binary confounder with three binary
//! outcomes; the linear design is a two-dimensional Gaussian confounder
//! driving an exposure and p continuous outcomes, the first 40% of which
//! carry nonzero effects. [`replicate`] runs a whole Monte Carlo sweep
//! of either pipeline and aggregates bias and error-rate summaries.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::categorical::{
    crude_estimate, empirical_tables, g_formula, gls_refine, plugin_identify_with, CatRecord,
    CategoricalParams, EmpiricalTables, GlsOptions, PluginOptions,
};
use crate::error::{Error, Result};
use crate::linear_sem::{
    estimate_effects, fit_factors, select_negative_controls, Dataset, EffectOptions,
    SelectionMethod,
};


/// The categorical benchmark: binary confounder (share 0.65 on the first
/// level), binary exposure, three binary outcomes.
pub fn categorical_design() -> CategoricalParams {
    let pr_u = DVector::from_vec(vec![0.65, 0.35]);
    // Row x, column u.
    let pr_x_given_u = DMatrix::from_row_slice(2, 2, &[0.4, 0.7, 0.6, 0.3]);
    // First-level probabilities by (u, x); stored per exposure level as
    // k_y by k_u columns.
    let first_level = [
        [[0.4, 0.7], [0.3, 0.6]],
        [[0.25, 0.45], [0.45, 0.75]],
        [[0.15, 0.45], [0.25, 0.65]],
    ];
    let mut pr_y_given_ux: [Vec<DMatrix<f64>>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    for (j, store) in pr_y_given_ux.iter_mut().enumerate() {
        for x in 0..2 {
            let m = DMatrix::from_fn(2, 2, |lvl, u| {
                let p1 = first_level[j][x][u];
                if lvl == 0 {
                    p1
                } else {
                    1.0 - p1
                }
            });
            store.push(m);
        }
    }
    CategoricalParams::new(pr_u, pr_x_given_u, pr_y_given_ux)
        .expect("benchmark constants form valid probabilities")
}

/// The linear benchmark design for a given outcome count.
#[derive(Debug, Clone, Serialize)]
pub struct LinearDesign {
    pub p: usize,
    /// Latent confounder dimension.
    pub r: usize,
    pub sigma_x: f64,
    /// Outcome noise scales, length p.
    pub sigma: Vec<f64>,
    /// Confounder effect on the exposure.
    pub alpha_x: [f64; 2],
    /// Confounder effect on each outcome, length p.
    pub alpha: Vec<[f64; 2]>,
    /// True exposure effects, length p; zero beyond the first 40%.
    pub beta: Vec<f64>,
}

impl LinearDesign {
    /// Build the design by its closed-form rules: noise scales cycle
    /// through {1.5, 1.75, 2.0}; the two confounder-loading columns are
    /// consecutive length-p reads of a repeating seven-value pattern
    /// (column two starts p entries in); effects alternate in sign with
    /// magnitudes cycling 1..4 over the first 40% of outcomes.
    pub fn new(p: usize) -> Result<Self> {
        if p < 3 {
            return Err(Error::Validation(format!(
                "linear design: p={p}, need at least 3 outcomes"
            )));
        }
        let pattern = [1.5, -1.8, 2.1, 2.4, -2.7, 3.0, -3.3];
        let gamma = |i: usize| pattern[(i - 1) % 7];
        let mut sigma = Vec::with_capacity(p);
        let mut alpha = Vec::with_capacity(p);
        let mut beta = Vec::with_capacity(p);
        let cutoff = (2 * p) / 5;
        for j in 1..=p {
            sigma.push(1.5 + 0.25 * ((j + 2) % 3) as f64);
            alpha.push([gamma(j), gamma(p + j)]);
            let b = if j <= cutoff {
                let mag = 1.0 + ((j + 3) % 4) as f64;
                if j % 2 == 0 {
                    mag
                } else {
                    -mag
                }
            } else {
                0.0
            };
            beta.push(b);
        }
        Ok(LinearDesign { p, r: 2, sigma_x: 1.0, sigma, alpha_x: [1.0, 1.0], alpha, beta })
    }

    /// Indices (0-based) of the true negative controls.
    pub fn true_zero_set(&self) -> Vec<usize> {
        (0..self.p).filter(|&j| self.beta[j] == 0.0).collect()
    }

    /// The noiseless outcome loading matrix on the orthonormal latent
    /// basis (U1, U2, exposure noise): row j is
    /// (alpha_j1 + beta_j alpha_x1, alpha_j2 + beta_j alpha_x2,
    /// beta_j sigma_x).
    pub fn true_loadings(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.p, 3, |j, c| match c {
            0 => self.alpha[j][0] + self.beta[j] * self.alpha_x[0],
            1 => self.alpha[j][1] + self.beta[j] * self.alpha_x[1],
            _ => self.beta[j] * self.sigma_x,
        })
    }
}

/// Draw n records from the categorical benchmark.
pub fn gen_categorical(n: usize, seed: u64) -> Vec<CatRecord> {
    let params = categorical_design();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_categorical(&params, n, &mut rng)
}

/// Draw n records from arbitrary categorical parameters.
pub fn sample_categorical<R: Rng>(
    params: &CategoricalParams,
    n: usize,
    rng: &mut R,
) -> Vec<CatRecord> {
    let draw = |probs: &[f64], rng: &mut R| -> usize {
        let v: f64 = rng.random();
        let mut acc = 0.0;
        for (i, &pr) in probs.iter().enumerate() {
            acc += pr;
            if v < acc {
                return i;
            }
        }
        probs.len() - 1
    };
    (0..n)
        .map(|_| {
            let u = draw(params.pr_u.as_slice(), rng);
            let xcol: Vec<f64> = (0..params.k_x).map(|x| params.pr_x_given_u[(x, u)]).collect();
            let x = draw(&xcol, rng);
            let mut y = [0usize; 3];
            for (j, slot) in y.iter_mut().enumerate() {
                let col: Vec<f64> =
                    (0..params.k_y[j]).map(|l| params.pr_y(j, l, u, x)).collect();
                *slot = draw(&col, rng);
            }
            CatRecord { x, y }
        })
        .collect()
}

/// Draw an uncentered dataset from the linear benchmark.
pub fn gen_linear(design: &LinearDesign, n: usize, seed: u64) -> Result<Dataset> {
    if n < design.p + 2 {
        return Err(Error::Validation(format!(
            "gen_linear: n={n} too small for p={}",
            design.p
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = design.p;
    let mut x = DVector::zeros(n);
    let mut y = DMatrix::zeros(n, p);
    for i in 0..n {
        let u1: f64 = rng.sample(StandardNormal);
        let u2: f64 = rng.sample(StandardNormal);
        let ex: f64 = rng.sample::<f64, _>(StandardNormal) * design.sigma_x;
        let xi = design.alpha_x[0] * u1 + design.alpha_x[1] * u2 + ex;
        x[i] = xi;
        for j in 0..p {
            let ej: f64 = rng.sample::<f64, _>(StandardNormal) * design.sigma[j];
            y[(i, j)] = design.alpha[j][0] * u1 + design.alpha[j][1] * u2 + design.beta[j] * xi + ej;
        }
    }
    Dataset::new(x, y)
}

/// Which published table to replicate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TableId {
    /// Selection error rates of the linear pipeline over a grid of
    /// sample sizes and outcome counts.
    Table1,
    /// Bias and standard error of the first four linear effects.
    Table2,
    /// Bias and spread of the categorical potential-outcome estimators.
    TableS1,
}

impl std::str::FromStr for TableId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "table1" => Ok(TableId::Table1),
            "table2" => Ok(TableId::Table2),
            "tables1" => Ok(TableId::TableS1),
            other => Err(Error::Usage(format!(
                "unknown table '{other}'; expected table1, table2, or tableS1"
            ))),
        }
    }
}

/// One grid cell of a replication sweep.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CellReport {
    pub n: usize,
    /// Outcome count for the linear tables; 3 for the categorical one.
    pub p: usize,
    /// Completed runs.
    pub runs: usize,
    /// Runs that errored (excluded from the summaries).
    pub failures: usize,
    /// Metric rows: label plus the values the table prints.
    pub rows: Vec<MetricRow>,
}

/// One reported metric with the published value it replicates.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricRow {
    pub label: String,
    /// This run's estimate, in the table's published scale.
    pub value: f64,
    /// Spread on the same scale, when the table prints one.
    pub spread: Option<f64>,
    /// The value printed in the original table, for side-by-side
    /// comparison.
    pub published: Option<f64>,
}

/// Full sweep output.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReplicationReport {
    pub table: TableId,
    pub runs_requested: usize,
    pub seed: u64,
    pub cells: Vec<CellReport>,
    /// Wall time is informational only and excluded from serialized
    /// reports so identical requests produce identical documents.
    #[serde(skip)]
    pub wall_secs: f64,
}

impl ReplicationReport {
    pub fn total_failures(&self) -> usize {
        self.cells.iter().map(|c| c.failures).sum()
    }

    pub fn total_runs(&self) -> usize {
        self.cells.iter().map(|c| c.runs + c.failures).sum()
    }

    /// Failure share across every cell.
    pub fn failure_rate(&self) -> f64 {
        let total = self.total_runs();
        if total == 0 {
            return 0.0;
        }
        self.total_failures() as f64 / total as f64
    }
}

/// Per-run seed: a fixed-increment SplitMix64 step over the master seed,
/// so any run's stream can be reproduced in isolation.
pub fn run_seed(master: u64, run: usize) -> u64 {
    let mut z = master.wrapping_add((run as u64 + 1).wrapping_mul(0x9E3779B97F4A7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Replicate one of the published tables.
///
/// Runs execute concurrently with independent per-run seeds; failed runs
/// are counted and excluded rather than aborting the sweep.
pub fn replicate(table: TableId, runs: usize, seed: u64) -> Result<ReplicationReport> {
    replicate_cells(table, runs, seed, None)
}

/// [`replicate`] restricted to one (n, p) grid cell when `cell` is set.
pub fn replicate_cells(
    table: TableId,
    runs: usize,
    seed: u64,
    cell: Option<(usize, usize)>,
) -> Result<ReplicationReport> {
    if runs < 10 {
        return Err(Error::Validation(format!("replicate: {runs} runs, need at least 10")));
    }
    let start = std::time::Instant::now();
    let cells = match table {
        TableId::Table1 | TableId::Table2 => {
            let grid: Vec<(usize, usize)> = match cell {
                Some(c) => vec![c],
                None => {
                    let mut g = Vec::new();
                    for &n in &[500usize, 1000, 2000] {
                        for &p in &[30usize, 60, 100] {
                            g.push((n, p));
                        }
                    }
                    g
                }
            };
            grid.into_iter()
                .map(|(n, p)| linear_cell(table, n, p, runs, seed))
                .collect::<Result<Vec<_>>>()?
        }
        TableId::TableS1 => {
            let n = cell.map(|c| c.0).unwrap_or(1000);
            vec![categorical_cell(n, runs, seed)?]
        }
    };
    Ok(ReplicationReport {
        table,
        runs_requested: runs,
        seed,
        cells,
        wall_secs: start.elapsed().as_secs_f64(),
    })
}

/// Published values for the linear selection table, FPR and FNR times
/// ten thousand, indexed by (n, p).
fn published_table1(n: usize, p: usize) -> Option<(f64, f64)> {
    let fpr = match (n, p) {
        (500, 30) => 58.0,
        (500, 60) => 16.0,
        (500, 100) => 10.0,
        (1000, 30) => 54.0,
        (1000, 60) => 16.0,
        (1000, 100) => 54.0,
        (2000, 30) => 37.0,
        (2000, 60) => 12.0,
        (2000, 100) => 5.0,
        _ => return None,
    };
    Some((fpr, 0.0))
}

/// Published bias and standard error (both times one hundred) for the
/// first four effects of the linear table.
fn published_table2(n: usize, p: usize) -> Option<[(f64, f64); 4]> {
    match (p, n) {
        (30, 500) => Some([(0.75, 0.75), (1.26, 0.98), (-0.52, 1.06), (0.98, 0.79)]),
        (30, 1000) => Some([(0.03, 0.60), (0.61, 0.67), (-0.25, 0.88), (0.78, 0.63)]),
        (30, 2000) => Some([(-0.68, 0.45), (-0.12, 0.49), (0.03, 0.49), (0.10, 0.36)]),
        (60, 500) => Some([(-1.40, 0.74), (0.52, 0.90), (-1.27, 0.94), (1.43, 0.83)]),
        (60, 1000) => Some([(-0.58, 0.55), (0.71, 0.55), (-1.81, 0.84), (0.14, 0.60)]),
        (60, 2000) => Some([(0.30, 0.40), (0.04, 0.47), (-0.70, 0.58), (0.15, 0.40)]),
        (100, 500) => Some([(-0.57, 0.75), (0.91, 0.86), (0.63, 0.93), (0.60, 0.83)]),
        (100, 1000) => Some([(-1.06, 0.59), (0.09, 0.70), (1.10, 0.71), (0.62, 0.55)]),
        (100, 2000) => Some([(0.47, 0.34), (-0.30, 0.38), (-1.13, 0.54), (0.45, 0.41)]),
        _ => None,
    }
}

/// Published bias and standard deviation (both times one hundred) for
/// the categorical table: six estimands by (crude, random start, warm
/// start). Signs follow the bias convention estimate minus truth.
fn published_table_s1() -> [[(f64, f64); 3]; 6] {
    [
        [(4.02, 2.21), (2.71, 11.8), (1.11, 10.4)],
        [(-4.06, 2.22), (-7.43, 12.0), (-2.32, 9.11)],
        [(2.75, 1.97), (-19.2, 22.0), (-0.87, 9.56)],
        [(-4.08, 2.24), (-5.78, 9.63), (-1.84, 8.85)],
        [(4.16, 1.89), (-24.5, 22.0), (-0.02, 10.5)],
        [(-5.47, 2.23), (-11.3, 9.36), (-3.19, 10.9)],
    ]
}

struct LinearRun {
    selected_zero: Vec<bool>,
    beta_hat: Option<DVector<f64>>,
}

fn linear_run(table: TableId, design: &LinearDesign, n: usize, seed: u64) -> Result<LinearRun> {
    let data = gen_linear(design, n, seed)?.center();
    let fit = fit_factors(&data, None)?;
    let sel = select_negative_controls(&fit, 30.0, SelectionMethod::Enumeration)?;
    let mut selected_zero = vec![false; design.p];
    for &j in &sel.s0_hat {
        selected_zero[j] = true;
    }
    let beta_hat = if table == TableId::Table2 {
        let est = estimate_effects(&data, &sel, &EffectOptions::default())?;
        Some(est.beta_hat)
    } else {
        None
    };
    Ok(LinearRun { selected_zero, beta_hat })
}

fn linear_cell(
    table: TableId,
    n: usize,
    p: usize,
    runs: usize,
    seed: u64,
) -> Result<CellReport> {
    let design = LinearDesign::new(p)?;
    let outcomes: Vec<Result<LinearRun>> = (0..runs)
        .into_par_iter()
        .map(|i| linear_run(table, &design, n, run_seed(seed, i)))
        .collect();

    let truth_zero: Vec<bool> = design.beta.iter().map(|&b| b == 0.0).collect();
    let mut failures = 0usize;
    let mut fpr_sum = 0.0;
    let mut fnr_sum = 0.0;
    let mut betas: Vec<DVector<f64>> = Vec::new();
    let mut completed = 0usize;
    for out in outcomes {
        match out {
            Ok(run) => {
                completed += 1;
                let mut declared_nonzero = 0usize;
                let mut declared_zero = 0usize;
                let mut false_pos = 0usize;
                let mut false_neg = 0usize;
                for j in 0..p {
                    if run.selected_zero[j] {
                        declared_zero += 1;
                        if !truth_zero[j] {
                            false_neg += 1;
                        }
                    } else {
                        declared_nonzero += 1;
                        if truth_zero[j] {
                            false_pos += 1;
                        }
                    }
                }
                if declared_nonzero > 0 {
                    fpr_sum += false_pos as f64 / declared_nonzero as f64;
                }
                if declared_zero > 0 {
                    fnr_sum += false_neg as f64 / declared_zero as f64;
                }
                if let Some(b) = run.beta_hat {
                    betas.push(b);
                }
            }
            Err(_) => failures += 1,
        }
    }
    if completed == 0 {
        return Ok(CellReport {
            n,
            p,
            runs: 0,
            failures,
            rows: Vec::new(),
        });
    }

    let mut rows = Vec::new();
    match table {
        TableId::Table1 => {
            let published = published_table1(n, p);
            rows.push(MetricRow {
                label: "fpr_x10000".into(),
                value: fpr_sum / completed as f64 * 10000.0,
                spread: None,
                published: published.map(|v| v.0),
            });
            rows.push(MetricRow {
                label: "fnr_x10000".into(),
                value: fnr_sum / completed as f64 * 10000.0,
                spread: None,
                published: published.map(|v| v.1),
            });
        }
        TableId::Table2 => {
            let published = published_table2(n, p);
            for k in 0..4 {
                let vals: Vec<f64> = betas.iter().map(|b| b[k] - design.beta[k]).collect();
                let (mean, sd) = mean_sd(&vals);
                let se = sd / (vals.len() as f64).sqrt();
                rows.push(MetricRow {
                    label: format!("beta{}_bias_x100", k + 1),
                    value: mean * 100.0,
                    spread: Some(se * 100.0),
                    published: published.map(|v| v[k].0),
                });
            }
        }
        TableId::TableS1 => unreachable!("categorical table handled separately"),
    }
    Ok(CellReport { n, p, runs: completed, failures, rows })
}

struct CategoricalRun {
    crude: [f64; 6],
    random: [f64; 6],
    warm: [f64; 6],
}

fn six(dist: &crate::categorical::PotentialOutcomeDist) -> [f64; 6] {
    let mut out = [0.0; 6];
    for j in 0..3 {
        for x in 0..2 {
            out[2 * j + x] = dist.prob(j, x, 0);
        }
    }
    out
}

fn categorical_run(params: &CategoricalParams, n: usize, seed: u64) -> Result<CategoricalRun> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let records = sample_categorical(params, n, &mut rng);
    let tables = empirical_tables(&records, params.k_x, params.k_y)?;
    let crude = six(&crude_estimate(&tables));
    let (warm_start, _diag) = plugin_identify_with(&tables, &PluginOptions::lenient())?;
    let warm_fit = gls_refine(&tables, &warm_start, GlsOptions::default())?;
    let warm = six(&g_formula(&warm_fit.params));
    // The comparison start draws every probability uniformly and
    // normalizes, then the same refinement runs.
    let random_start =
        CategoricalParams::random_feasible(params.k_u, params.k_x, params.k_y, &mut rng);
    let random_fit = gls_refine(&tables, &random_start, GlsOptions::default())?;
    let random = six(&g_formula(&random_fit.params));
    Ok(CategoricalRun { crude, random, warm })
}

fn categorical_cell(n: usize, runs: usize, seed: u64) -> Result<CellReport> {
    let params = categorical_design();
    let truth = six(&g_formula(&params));
    let outcomes: Vec<Result<CategoricalRun>> = (0..runs)
        .into_par_iter()
        .map(|i| categorical_run(&params, n, run_seed(seed, i)))
        .collect();
    let mut failures = 0usize;
    let mut kept: Vec<CategoricalRun> = Vec::new();
    for out in outcomes {
        match out {
            Ok(r) => kept.push(r),
            Err(_) => failures += 1,
        }
    }
    if kept.is_empty() {
        return Ok(CellReport { n, p: 3, runs: 0, failures, rows: Vec::new() });
    }
    let published = published_table_s1();
    let estimand = ["y1_x1", "y1_x2", "y2_x1", "y2_x2", "y3_x1", "y3_x2"];
    let mut rows = Vec::new();
    for (col, name) in [(0usize, "crude"), (1, "random_start"), (2, "warm_start")] {
        for e in 0..6 {
            let vals: Vec<f64> = kept
                .iter()
                .map(|r| {
                    let v = match col {
                        0 => r.crude[e],
                        1 => r.random[e],
                        _ => r.warm[e],
                    };
                    v - truth[e]
                })
                .collect();
            let (mean, sd) = mean_sd(&vals);
            rows.push(MetricRow {
                label: format!("{}_{}_bias_x100", estimand[e], name),
                value: mean * 100.0,
                spread: Some(sd * 100.0),
                published: Some(published[e][col].0),
            });
        }
    }
    Ok(CellReport { n, p: 3, runs: kept.len(), failures, rows })
}

fn mean_sd(vals: &[f64]) -> (f64, f64) {
    let n = vals.len() as f64;
    if vals.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = vals.iter().sum::<f64>() / n;
    if vals.len() < 2 {
        return (mean, 0.0);
    }
    let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Serialize the empirical frequency tables of drawn records as CSV rows
/// (one record per line, 1-based levels), the on-disk exchange format.
pub fn records_to_rows(records: &[CatRecord]) -> Vec<[usize; 4]> {
    records
        .iter()
        .map(|r| [r.x + 1, r.y[0] + 1, r.y[1] + 1, r.y[2] + 1])
        .collect()
}

/// Exact population tables of the categorical benchmark.
pub fn population_tables() -> EmpiricalTables {
    let params = categorical_design();
    let joint = crate::categorical::forward_joint(&params).expect("benchmark design is valid");
    EmpiricalTables::from_joint(&joint).expect("population joint is well formed")
}
