//! Least squares refinement of a plug-in parameter estimate.
//!
//! The objective is the sum over every cell (x, y1, y2, y3) of the squared
//! difference between the empirical joint frequency and the joint
//! probability implied by the parameters. Probabilities are optimized in
//! an unconstrained space: each simplex column through logits against its
//! last level, and the first-level probabilities of outcome one through a
//! base logit plus positive increments in the latent class direction,
//! which keeps them strictly increasing as the class coding requires.
//! A damped Gauss-Newton loop (Levenberg-Marquardt) with a numerical
//! Jacobian drives the fit; steps are only accepted when the objective
//! falls, so the result can never be worse than the starting point.
//! The iteration budget is shared across a short deterministic ladder of
//! starting points derived from the supplied one, which lets the search
//! escape the shallow basins that boundary-heavy starts produce.

use nalgebra::{DMatrix, DVector};

use super::{CategoricalParams, EmpiricalTables};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct GlsOptions {
    /// Iteration budget for the damped Gauss-Newton loop.
    pub max_iter: usize,
    /// Stop when the gradient infinity norm falls below this level.
    pub grad_tol: f64,
}

impl Default for GlsOptions {
    fn default() -> Self {
        Self {
            max_iter: 500,
            grad_tol: 1e-10,
        }
    }
}

/// Outcome of a refinement run.
#[derive(Debug, Clone)]
pub struct GlsFit {
    pub params: CategoricalParams,
    /// Final objective value.
    pub objective: f64,
    /// Objective at the supplied starting parameters.
    pub start_objective: f64,
    pub iterations: usize,
    /// True when a stationarity test was met inside the budget.
    pub converged: bool,
    /// True when the final objective strictly improves on the start.
    /// False with `converged` false means the search stalled and the
    /// starting parameters were returned unchanged.
    pub improved: bool,
}

const PROB_FLOOR: f64 = 1e-7;
const MIN_LOGIT_GAP: f64 = 1e-8;

/// Plug-in estimates sit exactly on the simplex boundary whenever
/// projection clipped them there. In logit space a boundary point has a
/// vanishing gradient, which stalls the descent before it starts, so the
/// starting point is pulled this far into the interior first. The
/// objective guarantee still compares against the unmodified start.
const INTERIOR_MARGIN: f64 = 0.01;

/// Apply `f` to every probability column of `p` in place.
fn map_columns(p: &mut CategoricalParams, mut f: impl FnMut(&mut [f64])) {
    f(p.pr_u.as_mut_slice());
    for u in 0..p.k_u {
        let mut col: Vec<f64> = (0..p.k_x).map(|x| p.pr_x_given_u[(x, u)]).collect();
        f(&mut col);
        for x in 0..p.k_x {
            p.pr_x_given_u[(x, u)] = col[x];
        }
    }
    for j in 0..3 {
        for x in 0..p.k_x {
            for u in 0..p.k_u {
                let mut col: Vec<f64> =
                    (0..p.k_y[j]).map(|t| p.pr_y_given_ux[j][x][(t, u)]).collect();
                f(&mut col);
                for t in 0..p.k_y[j] {
                    p.pr_y_given_ux[j][x][(t, u)] = col[t];
                }
            }
        }
    }
}

/// Push every probability column of `p` at least `eps` away from 0 and
/// renormalize.
fn interior_start(p: &CategoricalParams, eps: f64) -> CategoricalParams {
    let mut q = p.clone();
    map_columns(&mut q, |col| {
        for v in col.iter_mut() {
            *v = v.max(eps);
        }
        let s: f64 = col.iter().sum();
        for v in col.iter_mut() {
            *v /= s;
        }
    });
    q
}

/// Convex blend of every probability column with the uniform law. Keeps
/// the class ordering of the start while washing out noise-amplified
/// extremes, so a stalled search can approach the same data from flatter
/// ground.
fn blend_uniform(p: &CategoricalParams, w: f64) -> CategoricalParams {
    let mut q = p.clone();
    map_columns(&mut q, |col| {
        let u = 1.0 / col.len() as f64;
        for v in col.iter_mut() {
            *v = (1.0 - w) * *v + w * u;
        }
    });
    q
}

/// Map between parameter structs and the unconstrained vector.
struct ParamCoder {
    k_u: usize,
    k_x: usize,
    k_y: [usize; 3],
}

impl ParamCoder {
    fn dim(&self) -> usize {
        let (k_u, k_x, k_y) = (self.k_u, self.k_x, self.k_y);
        (k_u - 1)
            + k_u * (k_x - 1)
            + k_x * k_u // outcome-one base and increments
            + k_x * k_u * (k_y[0] - 2).max(0)
            + k_x * k_u * (k_y[1] - 1)
            + k_x * k_u * (k_y[2] - 1)
    }

    fn encode(&self, p: &CategoricalParams) -> Vec<f64> {
        let mut theta = Vec::with_capacity(self.dim());
        encode_simplex(p.pr_u.as_slice(), &mut theta);
        for u in 0..self.k_u {
            let col: Vec<f64> = (0..self.k_x).map(|x| p.pr_x_given_u[(x, u)]).collect();
            encode_simplex(&col, &mut theta);
        }
        // Outcome one: per exposure level a base logit plus log increments.
        for x in 0..self.k_x {
            let mut prev = f64::NEG_INFINITY;
            for u in 0..self.k_u {
                let prob = p.pr_y(0, 0, u, x).clamp(PROB_FLOOR, 1.0 - PROB_FLOOR);
                let mut l = logit(prob);
                if u == 0 {
                    theta.push(l);
                } else {
                    let gap = (l - prev).max(MIN_LOGIT_GAP);
                    theta.push(gap.ln());
                    l = prev + gap;
                }
                prev = l;
            }
        }
        if self.k_y[0] > 2 {
            for x in 0..self.k_x {
                for u in 0..self.k_u {
                    let rest: Vec<f64> =
                        (1..self.k_y[0]).map(|t| p.pr_y(0, t, u, x)).collect();
                    let total: f64 = rest.iter().sum();
                    let norm: Vec<f64> = if total > 0.0 {
                        rest.iter().map(|v| v / total).collect()
                    } else {
                        vec![1.0 / rest.len() as f64; rest.len()]
                    };
                    encode_simplex(&norm, &mut theta);
                }
            }
        }
        for j in 1..3 {
            for x in 0..self.k_x {
                for u in 0..self.k_u {
                    let col: Vec<f64> =
                        (0..self.k_y[j]).map(|y| p.pr_y(j, y, u, x)).collect();
                    encode_simplex(&col, &mut theta);
                }
            }
        }
        debug_assert_eq!(theta.len(), self.dim());
        theta
    }

    fn decode(&self, theta: &[f64]) -> CategoricalParams {
        let mut at = 0usize;
        let take = |at: &mut usize, n: usize| -> Vec<f64> {
            let s = theta[*at..*at + n].to_vec();
            *at += n;
            s
        };

        let pr_u = DVector::from_vec(decode_simplex(&take(&mut at, self.k_u - 1), self.k_u));
        let mut pr_x_given_u = DMatrix::zeros(self.k_x, self.k_u);
        for u in 0..self.k_u {
            let col = decode_simplex(&take(&mut at, self.k_x - 1), self.k_x);
            for x in 0..self.k_x {
                pr_x_given_u[(x, u)] = col[x];
            }
        }

        // Outcome one first-level probabilities, strictly increasing in u.
        let mut first = DMatrix::zeros(self.k_x, self.k_u);
        for x in 0..self.k_x {
            let raw = take(&mut at, self.k_u);
            let mut l = raw[0];
            first[(x, 0)] = sigmoid(l);
            for u in 1..self.k_u {
                l += raw[u].clamp(-700.0, 700.0).exp().max(MIN_LOGIT_GAP);
                first[(x, u)] = sigmoid(l);
            }
        }
        let mut y1 = Vec::with_capacity(self.k_x);
        if self.k_y[0] == 2 {
            for x in 0..self.k_x {
                let m = DMatrix::from_fn(2, self.k_u, |t, u| {
                    if t == 0 {
                        first[(x, u)]
                    } else {
                        1.0 - first[(x, u)]
                    }
                });
                y1.push(m);
            }
        } else {
            let mut rests = vec![vec![Vec::new(); self.k_u]; self.k_x];
            for x in 0..self.k_x {
                for u in 0..self.k_u {
                    rests[x][u] =
                        decode_simplex(&take(&mut at, self.k_y[0] - 2), self.k_y[0] - 1);
                }
            }
            for x in 0..self.k_x {
                let m = DMatrix::from_fn(self.k_y[0], self.k_u, |t, u| {
                    if t == 0 {
                        first[(x, u)]
                    } else {
                        (1.0 - first[(x, u)]) * rests[x][u][t - 1]
                    }
                });
                y1.push(m);
            }
        }

        let mut rest_outcomes = Vec::with_capacity(2);
        for j in 1..3 {
            let mut mats = Vec::with_capacity(self.k_x);
            for _x in 0..self.k_x {
                let mut m = DMatrix::zeros(self.k_y[j], self.k_u);
                for u in 0..self.k_u {
                    let col = decode_simplex(&take(&mut at, self.k_y[j] - 1), self.k_y[j]);
                    for y in 0..self.k_y[j] {
                        m[(y, u)] = col[y];
                    }
                }
                mats.push(m);
            }
            rest_outcomes.push(mats);
        }
        let y3 = rest_outcomes.pop().unwrap();
        let y2 = rest_outcomes.pop().unwrap();

        CategoricalParams {
            k_u: self.k_u,
            k_x: self.k_x,
            k_y: self.k_y,
            pr_u,
            pr_x_given_u,
            pr_y_given_ux: [y1, y2, y3],
        }
    }
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Logits of p[0..len-1] against p[len-1].
fn encode_simplex(p: &[f64], out: &mut Vec<f64>) {
    let len = p.len();
    let mut clamped: Vec<f64> = p
        .iter()
        .map(|&v| v.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR))
        .collect();
    let s: f64 = clamped.iter().sum();
    for v in &mut clamped {
        *v /= s;
    }
    for i in 0..len - 1 {
        out.push((clamped[i] / clamped[len - 1]).ln());
    }
}

fn decode_simplex(t: &[f64], len: usize) -> Vec<f64> {
    debug_assert_eq!(t.len(), len - 1);
    let m = t.iter().cloned().fold(0.0f64, f64::max);
    let mut e: Vec<f64> = t.iter().map(|&v| (v - m).exp()).collect();
    e.push((-m).exp());
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// Empirical joint frequencies flattened in the same cell order the model
/// vector uses.
fn targets(tables: &EmpiricalTables) -> Vec<f64> {
    let k_y = tables.k_y;
    let mut t = Vec::with_capacity(tables.k_x * k_y[0] * k_y[1] * k_y[2]);
    for x in 0..tables.k_x {
        for y1 in 0..k_y[0] {
            for y2 in 0..k_y[1] {
                for y3 in 0..k_y[2] {
                    t.push(tables.p123[x][y1][(y2, y3)] * tables.pr_x[x]);
                }
            }
        }
    }
    t
}

fn residuals(p: &CategoricalParams, target: &[f64], out: &mut [f64]) {
    let k_y = p.k_y;
    let mut at = 0usize;
    for x in 0..p.k_x {
        for y1 in 0..k_y[0] {
            for y2 in 0..k_y[1] {
                for y3 in 0..k_y[2] {
                    let mut cell = 0.0;
                    for u in 0..p.k_u {
                        cell += p.pr_u[u]
                            * p.pr_x_given_u[(x, u)]
                            * p.pr_y_given_ux[0][x][(y1, u)]
                            * p.pr_y_given_ux[1][x][(y2, u)]
                            * p.pr_y_given_ux[2][x][(y3, u)];
                    }
                    out[at] = cell - target[at];
                    at += 1;
                }
            }
        }
    }
}

fn objective_of(p: &CategoricalParams, target: &[f64]) -> f64 {
    let mut r = vec![0.0; target.len()];
    residuals(p, target, &mut r);
    r.iter().map(|v| v * v).sum()
}

struct LmRun {
    theta: Vec<f64>,
    obj: f64,
    iterations: usize,
    converged: bool,
}

/// One damped Gauss-Newton descent from `theta0`, at most `budget`
/// iterations. Returns the best point seen, not necessarily the last.
fn lm_minimize(coder: &ParamCoder, target: &[f64], theta0: Vec<f64>, budget: usize, grad_tol: f64) -> LmRun {
    let dim = coder.dim();
    let m = target.len();
    let mut theta = theta0;
    let eval = |t: &[f64], buf: &mut [f64]| {
        let p = coder.decode(t);
        residuals(&p, target, buf);
    };

    let mut r = vec![0.0; m];
    eval(&theta, &mut r);
    let mut obj: f64 = r.iter().map(|v| v * v).sum();

    let mut best_theta = theta.clone();
    let mut best_obj = obj;

    let mut mu = 1e-3;
    let mut iterations = 0usize;
    let mut converged = false;

    let mut jac = DMatrix::<f64>::zeros(m, dim);
    let mut rp = vec![0.0; m];
    let mut rm = vec![0.0; m];

    'outer: while iterations < budget {
        iterations += 1;

        // Central difference Jacobian.
        for i in 0..dim {
            let h = 1e-6 * (1.0 + theta[i].abs());
            let saved = theta[i];
            theta[i] = saved + h;
            eval(&theta, &mut rp);
            theta[i] = saved - h;
            eval(&theta, &mut rm);
            theta[i] = saved;
            for k in 0..m {
                jac[(k, i)] = (rp[k] - rm[k]) / (2.0 * h);
            }
        }

        let rv = DVector::from_column_slice(&r);
        let grad = jac.transpose() * &rv;
        if grad.amax() <= grad_tol {
            converged = true;
            break;
        }
        let gtg = jac.transpose() * &jac;

        // Damped step, retried with stronger damping until it improves.
        let mut attempts = 0usize;
        loop {
            attempts += 1;
            let mut lhs = gtg.clone();
            for i in 0..dim {
                lhs[(i, i)] += mu * gtg[(i, i)].max(1e-12);
            }
            let step = lhs.lu().solve(&(-&grad));
            let Some(step) = step else {
                mu *= 4.0;
                if mu > 1e16 {
                    break 'outer;
                }
                continue;
            };
            let cand: Vec<f64> = theta.iter().zip(step.iter()).map(|(t, s)| t + s).collect();
            eval(&cand, &mut rp);
            let cand_obj: f64 = rp.iter().map(|v| v * v).sum();
            if cand_obj < obj {
                let rel_drop = (obj - cand_obj) / (1.0 + obj);
                let step_small = step.amax() <= 1e-12 * (1.0 + DVector::from_column_slice(&theta).amax());
                theta = cand;
                r.copy_from_slice(&rp);
                obj = cand_obj;
                if obj < best_obj {
                    best_obj = obj;
                    best_theta = theta.clone();
                }
                mu = (mu / 3.0).max(1e-12);
                if rel_drop < 1e-15 || step_small {
                    converged = true;
                    break 'outer;
                }
                break;
            }
            mu *= 4.0;
            if mu > 1e16 || attempts > 60 {
                // No usable step from this point.
                break 'outer;
            }
        }
    }

    LmRun {
        theta: best_theta,
        obj: best_obj,
        iterations,
        converged,
    }
}

/// Blend weights for the scouted starting points: the projected start
/// itself, then two copies pulled toward the uniform barycenter.
const START_BLENDS: [f64; 3] = [0.0, 0.5, 0.85];

/// Refine starting parameters against empirical tables by damped least
/// squares.
///
/// A noisy start can sit in a shallow basin, so the iteration budget is
/// shared over a short deterministic ladder of starting points (the start
/// and flattened blends of it), after which the best run continues with
/// whatever budget remains. The returned objective never exceeds the
/// starting objective: when no accepted step improves it, the starting
/// parameters come back unchanged with both flags false.
pub fn gls_refine(
    tables: &EmpiricalTables,
    start: &CategoricalParams,
    opts: GlsOptions,
) -> Result<GlsFit> {
    if start.k_x != tables.k_x || start.k_y != tables.k_y {
        return Err(Error::Validation(
            "gls_refine: starting parameters do not match table dimensions".into(),
        ));
    }
    start.validate()?;
    if opts.max_iter == 0 {
        return Err(Error::Validation("gls_refine: zero iteration budget".into()));
    }

    let coder = ParamCoder {
        k_u: start.k_u,
        k_x: start.k_x,
        k_y: start.k_y,
    };
    let target = targets(tables);
    let start_objective = objective_of(start, &target);

    let anchor = interior_start(start, INTERIOR_MARGIN);
    let tranche = (opts.max_iter / 4).max(1);

    let mut used = 0usize;
    let mut best: Option<LmRun> = None;
    for w in START_BLENDS {
        if used >= opts.max_iter {
            break;
        }
        let s = if w == 0.0 { anchor.clone() } else { blend_uniform(&anchor, w) };
        let budget = tranche.min(opts.max_iter - used);
        let run = lm_minimize(&coder, &target, coder.encode(&s), budget, opts.grad_tol);
        used += run.iterations;
        if best.as_ref().is_none_or(|b| run.obj < b.obj) {
            best = Some(run);
        }
    }
    let mut best = best.expect("ladder ran at least once");
    if !best.converged && used < opts.max_iter {
        let run = lm_minimize(
            &coder,
            &target,
            best.theta.clone(),
            opts.max_iter - used,
            opts.grad_tol,
        );
        used += run.iterations;
        if run.obj < best.obj {
            best = run;
        } else {
            best.converged = run.converged;
        }
    }

    let refined = coder.decode(&best.theta);
    let refined_obj = objective_of(&refined, &target);
    if refined_obj <= start_objective {
        Ok(GlsFit {
            params: refined,
            objective: refined_obj,
            start_objective,
            iterations: used,
            converged: best.converged,
            improved: refined_obj < start_objective,
        })
    } else {
        // Encoding roundoff or a stalled search: fall back to the start.
        Ok(GlsFit {
            params: start.clone(),
            objective: start_objective,
            start_objective,
            iterations: used,
            converged: best.converged,
            improved: false,
        })
    }
}
