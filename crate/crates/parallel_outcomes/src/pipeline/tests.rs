use super::*;
use crate::linear_sem::fit_factors;
use crate::simgen::{gen_linear, LinearDesign};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn normals(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

fn named(name: &str, vals: Vec<f64>) -> (String, Vec<f64>) {
    (name.to_string(), vals)
}

#[test]
fn no_covariates_reduces_to_centering() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let x = normals(&mut rng, 40);
    let y = normals(&mut rng, 40);
    let raw = RawTable::new(named("x", x.clone()), vec![named("y", y.clone())], vec![], vec![])
        .unwrap();
    let out = residualize(&raw).unwrap();
    assert!(out.degenerate.is_empty());
    assert!(out.data.centered);
    let xm = x.iter().sum::<f64>() / 40.0;
    let ym = y.iter().sum::<f64>() / 40.0;
    for i in 0..40 {
        assert!((out.data.x[i] - (x[i] - xm)).abs() < 1e-12);
        assert!((out.data.y[(i, 0)] - (y[i] - ym)).abs() < 1e-12);
    }
}

#[test]
fn residuals_are_orthogonal_to_the_covariates() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let n = 300;
    let v1 = normals(&mut rng, n);
    let v2 = normals(&mut rng, n);
    let x: Vec<f64> = (0..n).map(|i| 0.8 * v1[i] + rng.sample::<f64, _>(StandardNormal)).collect();
    let y1: Vec<f64> =
        (0..n).map(|i| 3.0 * v1[i] + rng.sample::<f64, _>(StandardNormal)).collect();
    let y2: Vec<f64> = (0..n).map(|i| v2[i] - v1[i] + 2.0).collect();
    let raw = RawTable::new(
        named("x", x),
        vec![named("y1", y1), named("y2", y2.clone())],
        vec![named("v1", v1.clone()), named("v2", v2.clone())],
        vec![],
    )
    .unwrap();
    let out = residualize(&raw).unwrap();
    // y2 lies in the covariate span, so its residual vanishes.
    assert_eq!(out.degenerate, vec!["y2".to_string()]);

    let cols = [out.data.x.clone(), out.data.y.column(0).clone_owned()];
    for r in &cols {
        for v in [&v1, &v2] {
            let dot: f64 = r.iter().zip(v.iter()).map(|(a, b)| a * b).sum();
            let vn = v.iter().map(|b| b * b).sum::<f64>().sqrt();
            assert!(dot.abs() <= 1e-8 * r.norm() * vn, "residual not orthogonal: {dot}");
        }
        assert!(r.sum().abs() <= 1e-8 * r.norm() * (n as f64).sqrt());
    }

    // OLS orthogonality as a correlation: residual of y1 against v1.
    let r = out.data.y.column(0);
    let vm = v1.iter().sum::<f64>() / n as f64;
    let mut num = 0.0;
    let mut den_v = 0.0;
    for i in 0..n {
        num += r[i] * (v1[i] - vm);
        den_v += (v1[i] - vm) * (v1[i] - vm);
    }
    let corr = num / (r.norm() * den_v.sqrt());
    assert!(corr.abs() < 1e-10, "corr = {corr}");
}

#[test]
fn exposure_reproduced_by_a_covariate_is_flagged() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x = normals(&mut rng, 50);
    let y = normals(&mut rng, 50);
    let raw = RawTable::new(
        named("dose", x.clone()),
        vec![named("y", y)],
        vec![named("copy", x)],
        vec![],
    )
    .unwrap();
    let out = residualize(&raw).unwrap();
    assert_eq!(out.degenerate, vec!["dose".to_string()]);
    assert!(out.data.x.norm() < 1e-8);
}

#[test]
fn log_flags_apply_before_the_regression() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let x: Vec<f64> = normals(&mut rng, 60).iter().map(|v| v.exp()).collect();
    let y = normals(&mut rng, 60);
    let raw = RawTable::new(
        named("x", x.clone()),
        vec![named("y", y.clone())],
        vec![],
        vec!["x".to_string()],
    )
    .unwrap();
    let out = residualize(&raw).unwrap();
    let lm = x.iter().map(|v| v.ln()).sum::<f64>() / 60.0;
    for i in 0..60 {
        assert!((out.data.x[i] - (x[i].ln() - lm)).abs() < 1e-12);
    }

    let mut bad = x.clone();
    bad[4] = 0.0;
    let raw =
        RawTable::new(named("x", bad), vec![named("y", y)], vec![], vec!["x".to_string()])
            .unwrap();
    match residualize(&raw) {
        Err(Error::NonPositiveLog { column, row }) => {
            assert_eq!(column, "x");
            assert_eq!(row, 5);
        }
        other => panic!("expected NonPositiveLog, got {other:?}"),
    }
}

#[test]
fn collinear_covariates_are_rejected() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let x = normals(&mut rng, 40);
    let y = normals(&mut rng, 40);
    let v = normals(&mut rng, 40);
    let double: Vec<f64> = v.iter().map(|a| 2.0 * a).collect();
    let raw = RawTable::new(
        named("x", x.clone()),
        vec![named("y", y.clone())],
        vec![named("v", v.clone()), named("w", double)],
        vec![],
    )
    .unwrap();
    assert!(matches!(residualize(&raw), Err(Error::CovariateCollinearity)));

    // A constant covariate duplicates the intercept.
    let raw = RawTable::new(
        named("x", x),
        vec![named("y", y)],
        vec![named("c", vec![3.0; 40])],
        vec![],
    )
    .unwrap();
    assert!(matches!(residualize(&raw), Err(Error::CovariateCollinearity)));
}

#[test]
fn missing_rows_are_dropped_and_counted() {
    let x = vec![1.0, 2.0, 3.0, 4.0];
    let mut y = vec![0.5, 0.6, 0.7, 0.8];
    y[1] = f64::NAN;
    let raw =
        RawTable::new(named("x", x.clone()), vec![named("y", y)], vec![], vec![]).unwrap();
    assert_eq!(raw.n(), 3);
    assert_eq!(raw.dropped_rows, 1);
    assert_eq!(raw.exposure.as_slice(), &[1.0, 3.0, 4.0]);
    assert_eq!(raw.outcomes.column(0).as_slice(), &[0.5, 0.7, 0.8]);

    let all_gone = RawTable::new(
        named("x", vec![f64::NAN, f64::NAN]),
        vec![named("y", vec![1.0, 2.0])],
        vec![],
        vec![],
    );
    assert!(all_gone.is_err());
    let unknown = RawTable::new(
        named("x", vec![1.0]),
        vec![named("y", vec![1.0])],
        vec![],
        vec!["z".to_string()],
    );
    assert!(unknown.is_err());
    let dup = RawTable::new(
        named("x", vec![1.0]),
        vec![named("x", vec![1.0])],
        vec![],
        vec![],
    );
    assert!(dup.is_err());
    let inf = RawTable::new(
        named("x", vec![f64::INFINITY]),
        vec![named("y", vec![1.0])],
        vec![],
        vec![],
    );
    assert!(inf.is_err());
}

#[test]
fn screening_keeps_strong_and_drops_null_columns() {
    let n = 2000;
    let p = 20;
    let mut null_dropped = 0;
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
        let x = DVector::from_vec(normals(&mut rng, n));
        let mut y = DMatrix::zeros(n, p);
        for j in 0..p - 1 {
            for i in 0..n {
                y[(i, j)] = x[i] + rng.sample::<f64, _>(StandardNormal);
            }
        }
        for i in 0..n {
            y[(i, p - 1)] = rng.sample(StandardNormal);
        }
        let report = screen_outcomes(&Dataset::new(x, y).unwrap().center());
        for j in 0..p - 1 {
            assert!(report.outcomes[j].retained, "seed {seed}: strong column {j} dropped");
        }
        if !report.outcomes[p - 1].retained {
            null_dropped += 1;
        }
        assert_eq!(
            report.retained,
            report.outcomes.iter().filter(|o| o.retained).map(|o| o.index).collect::<Vec<_>>()
        );
    }
    assert!(null_dropped >= 95, "null column survived too often: {null_dropped}/100 dropped");
}

#[test]
fn screening_threshold_follows_the_outcome_count() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let n = 200;
    let x = DVector::from_vec(normals(&mut rng, n));
    let mut y = DMatrix::zeros(n, 20);
    for j in 0..20 {
        for i in 0..n {
            y[(i, j)] = 0.3 * x[i] + rng.sample::<f64, _>(StandardNormal);
        }
    }
    let report = screen_outcomes(&Dataset::new(x, y).unwrap().center());
    let mult = (2.0f64 * 20.0f64.ln()).sqrt();
    assert!((mult - 2.4477).abs() < 1e-3);
    for o in &report.outcomes {
        assert!(o.std_error > 0.0);
        assert!((o.threshold - o.std_error * mult).abs() < 1e-12);
    }
}

#[test]
fn exact_collinear_outcome_is_retained() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let n = 100;
    let x = DVector::from_vec(normals(&mut rng, n));
    let mut y = DMatrix::zeros(n, 2);
    for i in 0..n {
        y[(i, 0)] = 5.0 * x[i];
        y[(i, 1)] = rng.sample(StandardNormal);
    }
    let report = screen_outcomes(&Dataset::new(x, y).unwrap().center());
    assert!(report.outcomes[0].retained);
    assert!((report.outcomes[0].coefficient - 5.0).abs() < 1e-9);
}

#[test]
fn screening_is_scale_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let n = 150;
    let x = DVector::from_vec(normals(&mut rng, n));
    let mut y = DMatrix::zeros(n, 4);
    for j in 0..4 {
        let slope = [0.4, 0.0, -0.2, 0.05][j];
        for i in 0..n {
            y[(i, j)] = slope * x[i] + rng.sample::<f64, _>(StandardNormal);
        }
    }
    let base = screen_outcomes(&Dataset::new(x.clone(), y.clone()).unwrap().center());
    let mut scaled = y;
    scaled.column_mut(2).iter_mut().for_each(|v| *v *= 7.0);
    let after = screen_outcomes(&Dataset::new(x, scaled).unwrap().center());
    assert_eq!(base.retained, after.retained);
    assert!((after.outcomes[2].coefficient - 7.0 * base.outcomes[2].coefficient).abs() < 1e-10);
    assert!((after.outcomes[2].std_error - 7.0 * base.outcomes[2].std_error).abs() < 1e-10);
}

#[test]
fn clean_model_shows_a_diagonal_residual() {
    let design = LinearDesign::new(30).unwrap();
    let mut clean = 0;
    for seed in 0..100u64 {
        let data = gen_linear(&design, 2000, 700 + seed).unwrap().center();
        let fit = fit_factors(&data, None).unwrap();
        let report = check_error_diagonality(&data, &fit, None);
        if report.num_nonzero == 0 {
            assert_eq!(report.suggested_subset, (0..30).collect::<Vec<_>>());
            clean += 1;
        }
    }
    assert!(clean >= 90, "only {clean}/100 runs had a clean off-diagonal");
}

#[test]
fn shared_extra_noise_is_detected_and_pruned() {
    let design = LinearDesign::new(30).unwrap();
    let mut data = gen_linear(&design, 2000, 41).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for i in 0..data.n() {
        let g = 2.0 * rng.sample::<f64, _>(StandardNormal);
        data.y[(i, 0)] += g;
        data.y[(i, 1)] += g;
    }
    let data = data.center();
    let fit = fit_factors(&data, Some(3)).unwrap();
    let report = check_error_diagonality(&data, &fit, None);
    assert!(
        report.surviving.iter().any(|o| (o.i, o.j) == (0, 1)),
        "shared-noise pair not detected: {:?}",
        report.surviving
    );
    let dropped: Vec<usize> =
        (0..30).filter(|j| !report.suggested_subset.contains(j)).collect();
    assert!(dropped.contains(&0) || dropped.contains(&1));

    // The suggested subset induces an all-zero thresholded block.
    for o in &report.surviving {
        assert!(
            !(report.suggested_subset.contains(&o.i) && report.suggested_subset.contains(&o.j))
        );
    }
    for &j in &report.suggested_subset {
        assert!(report.variances[j] > 0.0);
    }
}

#[test]
fn two_outcome_report_is_trivial() {
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let n = 500;
    let x = DVector::from_vec(normals(&mut rng, n));
    let mut y = DMatrix::zeros(n, 2);
    for i in 0..n {
        let u: f64 = rng.sample(StandardNormal);
        y[(i, 0)] = u + rng.sample::<f64, _>(StandardNormal);
        y[(i, 1)] = u + rng.sample::<f64, _>(StandardNormal);
    }
    let data = Dataset::new(x, y).unwrap().center();

    // Factor fitting needs three outcomes, so build a one-factor fit
    // from the sample covariance by hand.
    let mut yc = data.y.clone();
    for mut col in yc.column_iter_mut() {
        let m = col.sum() / n as f64;
        col.iter_mut().for_each(|v| *v -= m);
    }
    let sigma = yc.transpose() * &yc / (n as f64 - 1.0);
    let eig = sigma.symmetric_eigen();
    let (top, low) = if eig.eigenvalues[0] >= eig.eigenvalues[1] { (0, 1) } else { (1, 0) };
    let loadings = eig.eigenvectors.column(top) * eig.eigenvalues[top].sqrt();
    let fit = crate::linear_sem::FactorFit {
        num_factors: 1,
        loadings: DMatrix::from_column_slice(2, 1, loadings.as_slice()),
        spectrum: vec![eig.eigenvalues[top], eig.eigenvalues[low]],
        sigma2_hat: eig.eigenvalues[low],
        delta: (2.0 * 2.0f64.ln() * eig.eigenvalues[low] / n as f64).sqrt(),
    };
    let report = check_error_diagonality(&data, &fit, None);
    assert_eq!(report.variances.len(), 2);
    assert_eq!(report.num_nonzero, report.surviving.len());
    // A rank-one truncation of a 2x2 covariance leaves a residual whose
    // off-diagonal equals the geometric mean of its diagonal, below the
    // threshold rate; the single pair is examined and passes.
    assert_eq!(report.num_nonzero, 0);
    assert_eq!(report.suggested_subset, vec![0, 1]);
}
