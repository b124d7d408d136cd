use super::*;
use crate::error::Error;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Binary benchmark design used across the crate's categorical tests:
/// two latent classes with weights (0.65, 0.35), exposure probabilities
/// (0.4, 0.7) given the class, and first-level outcome probabilities per
/// (class, exposure) given by the three matrices below.
fn benchmark_params() -> CategoricalParams {
    build_binary(
        0.65,
        [0.4, 0.7],
        [[0.4, 0.3], [0.7, 0.6]],
        [[0.25, 0.45], [0.45, 0.75]],
        [[0.15, 0.25], [0.45, 0.65]],
    )
}

/// Build binary-everything parameters from first-level probabilities.
/// `y*_first[u][x]` is the probability of level one given class u and
/// exposure x.
fn build_binary(
    pr_u1: f64,
    pr_x1_given_u: [f64; 2],
    y1_first: [[f64; 2]; 2],
    y2_first: [[f64; 2]; 2],
    y3_first: [[f64; 2]; 2],
) -> CategoricalParams {
    let pr_u = DVector::from_column_slice(&[pr_u1, 1.0 - pr_u1]);
    let pr_x_given_u = DMatrix::from_fn(2, 2, |x, u| {
        if x == 0 {
            pr_x1_given_u[u]
        } else {
            1.0 - pr_x1_given_u[u]
        }
    });
    let outcome = |first: [[f64; 2]; 2]| -> Vec<DMatrix<f64>> {
        (0..2)
            .map(|x| {
                DMatrix::from_fn(2, 2, |lvl, u| {
                    if lvl == 0 {
                        first[u][x]
                    } else {
                        1.0 - first[u][x]
                    }
                })
            })
            .collect()
    };
    CategoricalParams::new(
        pr_u,
        pr_x_given_u,
        [outcome(y1_first), outcome(y2_first), outcome(y3_first)],
    )
    .unwrap()
}

fn sample_records<R: Rng>(p: &CategoricalParams, n: usize, rng: &mut R) -> Vec<CatRecord> {
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
            let u = draw(p.pr_u.as_slice(), rng);
            let xcol: Vec<f64> = (0..p.k_x).map(|x| p.pr_x_given_u[(x, u)]).collect();
            let x = draw(&xcol, rng);
            let mut y = [0usize; 3];
            for (j, slot) in y.iter_mut().enumerate() {
                let col: Vec<f64> = (0..p.k_y[j]).map(|l| p.pr_y(j, l, u, x)).collect();
                *slot = draw(&col, rng);
            }
            CatRecord { x, y }
        })
        .collect()
}

fn max_param_dev(a: &CategoricalParams, b: &CategoricalParams) -> f64 {
    let mut worst = (a.pr_u.clone() - b.pr_u.clone()).amax();
    worst = worst.max((a.pr_x_given_u.clone() - b.pr_x_given_u.clone()).amax());
    for j in 0..3 {
        for x in 0..a.k_x {
            worst = worst
                .max((a.pr_y_given_ux[j][x].clone() - b.pr_y_given_ux[j][x].clone()).amax());
        }
    }
    worst
}

#[test]
fn forward_joint_mass_and_exposure_marginal() {
    let table = forward_joint(&benchmark_params()).unwrap();
    let mass: f64 = table.cells().iter().sum();
    assert!((mass - 1.0).abs() < 1e-12);
    assert!((table.pr_x(0) - 0.505).abs() < 1e-12);
    assert!((table.pr_x(1) - 0.495).abs() < 1e-12);
}

/// Two-outcome mixture with known joint cells. The third outcome is a
/// constant so only two informative outcomes remain.
fn two_outcome_set_one() -> CategoricalParams {
    let pr_u = DVector::from_column_slice(&[0.6, 0.4]);
    let pr_x_given_u = DMatrix::from_row_slice(2, 2, &[0.7, 0.4, 0.3, 0.6]);
    let y = |p: [[f64; 2]; 2]| -> Vec<DMatrix<f64>> {
        (0..2)
            .map(|x| {
                DMatrix::from_fn(2, 2, |lvl, u| if lvl == 0 { p[u][x] } else { 1.0 - p[u][x] })
            })
            .collect()
    };
    let constant: Vec<DMatrix<f64>> = (0..2).map(|_| DMatrix::from_element(1, 2, 1.0)).collect();
    CategoricalParams::new(
        pr_u,
        pr_x_given_u,
        [
            y([[0.1, 0.3], [0.2, 0.4]]),
            y([[0.1, 0.3], [0.2, 0.4]]),
            constant,
        ],
    )
    .unwrap()
}

#[test]
fn two_outcome_joint_matches_frozen_cells() {
    let table = forward_joint(&two_outcome_set_one()).unwrap();
    // Cells ordered (x, y1, y2), all with the constant third outcome.
    let expect = [
        ((0, 0, 0), 0.0106),
        ((0, 0, 1), 0.0634),
        ((0, 1, 0), 0.0634),
        ((0, 1, 1), 0.4426),
        ((1, 0, 0), 0.0546),
        ((1, 0, 1), 0.0954),
        ((1, 1, 0), 0.0954),
        ((1, 1, 1), 0.1746),
    ];
    for ((x, y1, y2), v) in expect {
        assert!(
            (table.pr(x, y1, y2, 0) - v).abs() < 1e-12,
            "cell ({x},{y1},{y2}) expected {v}"
        );
    }
}

/// Construct a second parameter set that reproduces a two-outcome joint
/// law exactly. Given target class weights per exposure level and a free
/// first-outcome probability for class one, the remaining conditionals
/// solve the mixture moment equations in closed form.
fn two_outcome_alternative(
    table: &JointTable,
    a_given_x: [f64; 2],
    p_free: [f64; 2],
) -> CategoricalParams {
    let mut y1_first = [[0.0f64; 2]; 2];
    let mut y2_first = [[0.0f64; 2]; 2];
    let mut pr_x = [0.0f64; 2];
    for x in 0..2 {
        let px = table.pr_x(x);
        pr_x[x] = px;
        let m1 = (table.pr(x, 0, 0, 0) + table.pr(x, 0, 1, 0)) / px;
        let m2 = (table.pr(x, 0, 0, 0) + table.pr(x, 1, 0, 0)) / px;
        let m12 = table.pr(x, 0, 0, 0) / px;
        let a = a_given_x[x];
        let p = p_free[x];
        let q = (m1 - a * p) / (1.0 - a);
        let r = (m12 - q * m2) / (a * (p - q));
        let s = (m2 - a * r) / (1.0 - a);
        for v in [p, q, r, s] {
            assert!((0.0..=1.0).contains(&v), "solved probability {v} out of range");
        }
        y1_first[0][x] = p;
        y1_first[1][x] = q;
        y2_first[0][x] = r;
        y2_first[1][x] = s;
    }
    let pr_u1 = a_given_x[0] * pr_x[0] + a_given_x[1] * pr_x[1];
    let pr_x1_u1 = a_given_x[0] * pr_x[0] / pr_u1;
    let pr_x1_u2 = (1.0 - a_given_x[0]) * pr_x[0] / (1.0 - pr_u1);
    let pr_u = DVector::from_column_slice(&[pr_u1, 1.0 - pr_u1]);
    let pr_x_given_u =
        DMatrix::from_row_slice(2, 2, &[pr_x1_u1, pr_x1_u2, 1.0 - pr_x1_u1, 1.0 - pr_x1_u2]);
    let y = |first: [[f64; 2]; 2]| -> Vec<DMatrix<f64>> {
        (0..2)
            .map(|x| {
                DMatrix::from_fn(2, 2, |lvl, u| {
                    if lvl == 0 {
                        first[u][x]
                    } else {
                        1.0 - first[u][x]
                    }
                })
            })
            .collect()
    };
    let constant: Vec<DMatrix<f64>> = (0..2).map(|_| DMatrix::from_element(1, 2, 1.0)).collect();
    CategoricalParams::new(pr_u, pr_x_given_u, [y(y1_first), y(y2_first), constant]).unwrap()
}

#[test]
fn two_outcomes_admit_indistinguishable_parameter_sets() {
    let set1 = two_outcome_set_one();
    let t1 = forward_joint(&set1).unwrap();
    // Different class weights per exposure level and a different free
    // conditional, chosen to keep every solved probability interior.
    let set2 = two_outcome_alternative(&t1, [0.3, 0.2], [0.4, 0.6]);
    let t2 = forward_joint(&set2).unwrap();
    assert!(t1.max_abs_diff(&t2).unwrap() < 1e-10);

    // Same observables, materially different interventional answers.
    let g1 = g_formula(&set1);
    let g2 = g_formula(&set2);
    let d = (g1.prob(0, 0, 0) - g2.prob(0, 0, 0)).abs();
    assert!(d >= 0.02, "potential outcome gap {d} too small");

    // The estimator refuses tables with only two informative outcomes.
    let tables = EmpiricalTables::from_joint(&t1).unwrap();
    assert!(matches!(plugin_identify(&tables), Err(Error::Validation(_))));
}

#[test]
fn plugin_recovers_population_parameters_exactly() {
    let truth = benchmark_params();
    let tables = EmpiricalTables::from_joint(&forward_joint(&truth).unwrap()).unwrap();
    let (fit, diag) = plugin_identify(&tables).unwrap();
    assert!(max_param_dev(&fit, &truth) < 1e-10);
    assert!(diag.order_consistent);
    assert!(diag.clipped_mass < 1e-12);
    assert!(diag.max_offdiag < 1e-10);
    assert!(diag.max_imag < 1e-12);

    let g = g_formula(&fit);
    assert!((g.prob(0, 0, 0) - 0.505).abs() < 1e-12);
    assert!((g.prob(0, 1, 0) - 0.405).abs() < 1e-12);
}

#[test]
fn plugin_rejects_rank_deficient_tables() {
    // Second outcome carries no class signal, so the (Y2, Y3) table
    // factorizes and is singular.
    let p = build_binary(
        0.65,
        [0.4, 0.7],
        [[0.4, 0.3], [0.7, 0.6]],
        [[0.35, 0.55], [0.35, 0.55]],
        [[0.15, 0.25], [0.45, 0.65]],
    );
    let tables = EmpiricalTables::from_joint(&forward_joint(&p).unwrap()).unwrap();
    assert!(matches!(
        plugin_identify(&tables),
        Err(Error::RankDeficient { .. })
    ));
    let report = check_conditions(&tables);
    assert!(!report.rank_ok);
}

/// Parameters whose first outcome flips its class ordering between the
/// exposure levels while the other outcomes keep a stable ordering.
fn order_flip_params() -> CategoricalParams {
    let pr_u = DVector::from_column_slice(&[0.225, 0.775]);
    // pr(U = 1 | X = 1) = 0.2 and pr(U = 1 | X = 2) = 0.25 with equal
    // exposure arms.
    let pr_x1_u1 = 0.2 * 0.5 / 0.225;
    let pr_x1_u2 = 0.8 * 0.5 / 0.775;
    let pr_x_given_u = DMatrix::from_row_slice(
        2,
        2,
        &[pr_x1_u1, pr_x1_u2, 1.0 - pr_x1_u1, 1.0 - pr_x1_u2],
    );
    let y = |first: [[f64; 2]; 2]| -> Vec<DMatrix<f64>> {
        (0..2)
            .map(|x| {
                DMatrix::from_fn(2, 2, |lvl, u| {
                    if lvl == 0 {
                        first[u][x]
                    } else {
                        1.0 - first[u][x]
                    }
                })
            })
            .collect()
    };
    CategoricalParams::new(
        pr_u,
        pr_x_given_u,
        [
            // First outcome: increasing in u at x = 1, decreasing at x = 2.
            y([[0.1, 0.8], [0.6, 0.4]]),
            y([[0.2, 0.2], [0.8, 0.8]]),
            y([[0.15, 0.15], [0.7, 0.7]]),
        ],
    )
    .unwrap()
}

#[test]
fn order_flip_is_detected() {
    let tables =
        EmpiricalTables::from_joint(&forward_joint(&order_flip_params()).unwrap()).unwrap();
    assert!(matches!(
        plugin_identify(&tables),
        Err(Error::OrderInstability { .. })
    ));
    let report = check_conditions(&tables);
    assert!(report.rank_ok);
    assert!(!report.order_consistent);
}

#[test]
fn stable_order_verdict_on_benchmark() {
    let tables =
        EmpiricalTables::from_joint(&forward_joint(&benchmark_params()).unwrap()).unwrap();
    let report = check_conditions(&tables);
    assert!(report.rank_ok);
    assert!(report.order_consistent);
    assert!(report.failure.is_none());
    for gap in &report.min_gap {
        assert!(gap.unwrap() > 0.25);
    }
}

#[test]
fn g_formula_on_flip_consistent_designs() {
    // Same eigenvalue sets can belong to different parameter sets; the
    // interventional distribution separates them.
    let consistent = build_binary(
        0.475,
        [0.2 * 0.5 / 0.475, 0.8 * 0.5 / 0.525],
        [[0.1, 0.4], [0.6, 0.8]],
        [[0.2, 0.2], [0.8, 0.8]],
        [[0.15, 0.15], [0.7, 0.7]],
    );
    let g = g_formula(&consistent);
    assert!((g.prob(0, 0, 0) - 0.3625).abs() < 1e-12);
    let flipped = order_flip_params();
    let gf = g_formula(&flipped);
    assert!((gf.prob(0, 0, 0) - 0.4875).abs() < 1e-12);
}

#[test]
fn crude_estimate_matches_conditional_frequencies() {
    let truth = benchmark_params();
    let tables = EmpiricalTables::from_joint(&forward_joint(&truth).unwrap()).unwrap();
    let crude = crude_estimate(&tables);

    // Independent conditioning arithmetic for pr(Y1 = 1 | X = 1).
    let w1 = 0.65 * 0.4 / 0.505;
    let w2 = 0.35 * 0.7 / 0.505;
    let expected = w1 * 0.4 + w2 * 0.7;
    assert!((crude.prob(0, 0, 0) - expected).abs() < 1e-12);

    // Confounding gap against the interventional answer.
    assert!((crude.prob(0, 0, 0) - 0.505 - 0.0405446).abs() < 1e-6);
    let expected_y2 = w1 * 0.25 + w2 * 0.45;
    assert!((crude.prob(1, 0, 0) - expected_y2).abs() < 1e-12);
    assert!((crude.prob(1, 0, 0) - 0.32 - 0.0270297).abs() < 1e-6);
}

#[test]
fn crude_equals_interventional_without_confounding() {
    // Exposure independent of the class: conditioning is intervening.
    let p = build_binary(
        0.65,
        [0.55, 0.55],
        [[0.4, 0.3], [0.7, 0.6]],
        [[0.25, 0.45], [0.45, 0.75]],
        [[0.15, 0.25], [0.45, 0.65]],
    );
    let tables = EmpiricalTables::from_joint(&forward_joint(&p).unwrap()).unwrap();
    let crude = crude_estimate(&tables);
    let g = g_formula(&p);
    for j in 0..3 {
        for x in 0..2 {
            for y in 0..2 {
                assert!((crude.prob(j, x, y) - g.prob(j, x, y)).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn empirical_tables_from_single_record() {
    let records = [CatRecord { x: 0, y: [1, 0, 1] }];
    let t = empirical_tables(&records, 1, [2, 2, 2]).unwrap();
    assert_eq!(t.n, 1);
    assert!((t.pr_x[0] - 1.0).abs() < 1e-15);
    assert!((t.p123[0][1][(0, 1)] - 1.0).abs() < 1e-15);
    assert!(t.p123[0][0].sum().abs() < 1e-15);
}

#[test]
fn empirical_tables_reject_empty_stratum_and_bad_levels() {
    let records = [CatRecord { x: 0, y: [0, 0, 0] }];
    assert!(matches!(
        empirical_tables(&records, 2, [2, 2, 2]),
        Err(Error::EmptyStratum(_))
    ));
    let bad = [CatRecord { x: 0, y: [2, 0, 0] }];
    assert!(empirical_tables(&bad, 1, [2, 2, 2]).is_err());
}

#[test]
fn empirical_marginalization_is_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let records = sample_records(&benchmark_params(), 5000, &mut rng);
    let t = empirical_tables(&records, 2, [2, 2, 2]).unwrap();
    for x in 0..2 {
        let mut acc = DMatrix::<f64>::zeros(2, 2);
        for y1 in 0..2 {
            acc += &t.p123[x][y1];
        }
        assert!((acc - &t.p23[x]).amax() < 1e-15);
        assert!((t.p23[x].sum() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn empirical_tables_approach_population() {
    let truth = benchmark_params();
    let pop = forward_joint(&truth).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let records = sample_records(&truth, 100_000, &mut rng);
    let t = empirical_tables(&records, 2, [2, 2, 2]).unwrap();
    let pop_t = EmpiricalTables::from_joint(&pop).unwrap();
    for x in 0..2 {
        assert!((t.pr_x[x] - pop_t.pr_x[x]).abs() < 0.01);
        assert!((&t.p23[x] - &pop_t.p23[x]).amax() < 0.01);
        for y1 in 0..2 {
            assert!((&t.p123[x][y1] - &pop_t.p123[x][y1]).amax() < 0.01);
        }
    }
}

#[test]
fn plugin_error_shrinks_with_sample_size() {
    let truth = benchmark_params();
    let median_dev = |n: usize| -> f64 {
        let mut devs: Vec<f64> = (0..9u64)
            .map(|seed| {
                let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
                let records = sample_records(&truth, n, &mut rng);
                let tables = empirical_tables(&records, 2, [2, 2, 2]).unwrap();
                let (fit, _) = plugin_identify(&tables).unwrap();
                max_param_dev(&fit, &truth)
            })
            .collect();
        devs.sort_by(f64::total_cmp);
        devs[devs.len() / 2]
    };
    let coarse = median_dev(2_000);
    let fine = median_dev(200_000);
    assert!(fine < coarse, "no shrinkage: {coarse} -> {fine}");
    assert!(fine <= 0.05, "median deviation {fine} at n=200000");
}

#[test]
fn warm_started_refinement_recovers_interventional_means() {
    let truth = benchmark_params();
    let gtruth = g_formula(&truth);
    let mut devs: Vec<f64> = Vec::new();
    for seed in 0..30u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let records = sample_records(&truth, 1000, &mut rng);
        let tables = empirical_tables(&records, 2, [2, 2, 2]).unwrap();
        let (warm, _) = plugin_identify_with(&tables, &PluginOptions::lenient()).unwrap();
        let fit = gls_refine(&tables, &warm, GlsOptions::default()).unwrap();
        let gfit = g_formula(&fit.params);
        let mut dev: f64 = 0.0;
        for j in 0..3 {
            for x in 0..truth.k_x {
                for y in 0..truth.k_y[j] {
                    dev = dev.max((gfit.prob(j, x, y) - gtruth.prob(j, x, y)).abs());
                }
            }
        }
        devs.push(dev);
    }
    devs.sort_by(f64::total_cmp);
    let median = devs[devs.len() / 2];
    assert!(median <= 0.12, "median interventional deviation {median}");
}

#[test]
fn gls_at_population_truth_is_a_fixed_point() {
    let truth = benchmark_params();
    let tables = EmpiricalTables::from_joint(&forward_joint(&truth).unwrap()).unwrap();
    let fit = gls_refine(&tables, &truth, GlsOptions::default()).unwrap();
    assert!(fit.objective < 1e-20);
    assert!(fit.converged);
    assert!(max_param_dev(&fit.params, &truth) < 1e-7);
}

#[test]
fn gls_repairs_a_perturbed_start_on_population_tables() {
    let truth = benchmark_params();
    let tables = EmpiricalTables::from_joint(&forward_joint(&truth).unwrap()).unwrap();
    let mut start = truth.clone();
    // Nudge the first outcome while keeping columns on the simplex and
    // the class ordering intact.
    for x in 0..2 {
        start.pr_y_given_ux[0][x][(0, 0)] -= 0.05;
        start.pr_y_given_ux[0][x][(1, 0)] += 0.05;
        start.pr_y_given_ux[0][x][(0, 1)] += 0.05;
        start.pr_y_given_ux[0][x][(1, 1)] -= 0.05;
    }
    let fit = gls_refine(&tables, &start, GlsOptions::default()).unwrap();
    assert!(fit.improved);
    assert!(fit.objective < fit.start_objective * 1e-6);
    assert!(max_param_dev(&fit.params, &truth) < 0.01);
}

#[test]
fn gls_never_worsens_a_random_start() {
    let truth = benchmark_params();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let records = sample_records(&truth, 500, &mut rng);
    let tables = empirical_tables(&records, 2, [2, 2, 2]).unwrap();
    for seed in 0..5u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(7000 + seed);
        let start = CategoricalParams::random_feasible(2, 2, [2, 2, 2], &mut rng);
        let fit = gls_refine(&tables, &start, GlsOptions::default()).unwrap();
        assert!(fit.objective <= fit.start_objective + 1e-15);
    }
}

#[test]
fn gls_rejects_mismatched_dimensions() {
    let truth = benchmark_params();
    let tables = EmpiricalTables::from_joint(&forward_joint(&truth).unwrap()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let wrong = CategoricalParams::random_feasible(2, 3, [2, 2, 2], &mut rng);
    assert!(gls_refine(&tables, &wrong, GlsOptions::default()).is_err());
}

#[test]
fn random_feasible_satisfies_the_coding_constraint() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..50 {
        let p = CategoricalParams::random_feasible(3, 2, [3, 3, 3], &mut rng);
        p.validate().unwrap();
        for x in 0..2 {
            for u in 1..3 {
                assert!(p.pr_y(0, 0, u, x) > p.pr_y(0, 0, u - 1, x));
            }
        }
    }
}
