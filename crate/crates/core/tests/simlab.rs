use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use triplediff::simlab::{
    calibrate, default_suite, misspecify, misspecify_covariates, oversample_truth, run_monte_carlo_with,
    summarize_metrics, trial_seed, AgeForm, Dgp, DgpSpec, Effect, McOptions, SuiteEntry, DEFAULT_ALPHA, DEFAULT_BETA,
    DEFAULT_BETA0, DEFAULT_SIGMA_U,
};
use triplediff::{estimate_cdatt, estimate_datt, generate_trial, run_monte_carlo, Cohort, Error, Estimand, Estimator};

fn same(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9 * (1.0 + a.abs())
}

#[test]
fn frozen_defaults_match_calibration() {
    let c = calibrate(AgeForm::Quadratic).unwrap();
    for (a, frozen) in DEFAULT_ALPHA.iter().enumerate() {
        assert_eq!(frozen[0], 0.0);
        for (j, v) in c.alpha[a].iter().enumerate() {
            assert!(same(*v, frozen[j + 1]), "alpha[{a}][{j}]: {v}");
        }
    }
    assert!(same(c.beta0, DEFAULT_BETA0));
    for (v, d) in c.beta.iter().zip(DEFAULT_BETA) {
        assert!(same(*v, d));
    }
    assert!(same(c.sigma_u, DEFAULT_SIGMA_U));
    assert_eq!(DgpSpec::calibrated(AgeForm::Quadratic).unwrap().beta.len(), DEFAULT_BETA.len());
}

#[test]
fn cell_shares_stay_balanced_in_large_samples() {
    for form in [AgeForm::Quadratic, AgeForm::Bins] {
        let spec = DgpSpec { n: 100_000, ..DgpSpec::calibrated(form).unwrap() };
        let (d, _) = generate_trial(&spec, 5).unwrap();
        let mut counts = [0usize; 4];
        for u in &d.units {
            let treated = u.cohort != Cohort::Never;
            let targeted = u.subgroup == "targeted";
            counts[2 * usize::from(!treated) + usize::from(!targeted)] += 1;
        }
        for c in counts {
            let share = c as f64 / d.n_units() as f64;
            assert!((0.15..=0.35).contains(&share), "{form:?}: {counts:?}");
        }
        let implied = Dgp::new(&spec).unwrap().cell_shares();
        assert!((implied.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn datt_truth_matches_oversampling() {
    for gamma in [0.0, 1.0] {
        let spec = DgpSpec { gamma, ..DgpSpec::default() };
        let truth = Dgp::new(&spec).unwrap().truth();
        let (est, se) = oversample_truth(&spec, 1_000_000, 3).unwrap();
        assert!((est - truth.datt).abs() < 4.0 * se, "gamma {gamma}: {est} ({se}) vs {}", truth.datt);
        assert_eq!(truth.cdatt, 0.0);
        assert!(truth.datt > 0.1);
    }
    let none = DgpSpec { effect: Effect::None, ..DgpSpec::default() };
    assert_eq!(Dgp::new(&none).unwrap().truth().datt, 0.0);
}

#[test]
fn noiseless_null_gives_zero_everywhere() {
    let spec = DgpSpec { sigma_u: 0.0, effect: Effect::None, n: 600, ..DgpSpec::default() };
    let (d, _) = generate_trial(&spec, 9).unwrap();
    assert!(d.units.iter().all(|u| u.y[1] == u.y[0]));
    for entry in default_suite() {
        let s = spec.design_spec(&d.covariate_names, entry.estimand, entry.estimator);
        let e = match entry.estimand {
            Estimand::Cdatt => estimate_cdatt(&d, 2, 2, &s, entry.estimator),
            _ => estimate_datt(&d, 2, 2, &s, entry.estimator),
        }
        .unwrap();
        assert!(e.estimate.abs() < 1e-9, "{}/{}: {}", entry.estimand, entry.estimator, e.estimate);
    }
}

#[test]
fn zero_gamma_effect_is_the_outcome_index() {
    let spec = DgpSpec { sigma_u: 0.0, gamma: 0.0, n: 400, ..DgpSpec::default() };
    let (d, _) = generate_trial(&spec, 10).unwrap();
    for u in &d.units {
        let index: f64 = spec.beta.iter().zip(&u.x).map(|(b, x)| b * x).sum();
        let expect = if u.cohort == Cohort::Never { 0.0 } else { index };
        assert!((u.y[1] - u.y[0] - expect).abs() < 1e-12);
    }
}

#[test]
fn misspecified_transform() {
    assert_eq!(misspecify(0.0, 4.2).unwrap(), 0.0);
    assert!((misspecify(1.0, 3.0).unwrap() - 1.693147).abs() < 1e-6);
    assert!(matches!(misspecify(-1.0, 3.0), Err(Error::Domain(_))));
    assert!(misspecify(-0.5, 2.0).is_ok());
    for nu in [2.0, 3.3, 5.0] {
        let grid: Vec<f64> = (0..=400).map(|i| misspecify(i as f64 * 0.05, nu).unwrap()).collect();
        assert!(grid.windows(2).all(|w| w[1] > w[0]), "nu {nu}");
    }
    let (out, nu) = misspecify_covariates(&[0.0, 1.0, 2.0], (2.0, 5.0), 4).unwrap();
    assert!((2.0..5.0).contains(&nu));
    assert_eq!(out[1], misspecify(1.0, nu).unwrap());
    assert_eq!(misspecify_covariates(&[0.0, 1.0, 2.0], (2.0, 5.0), 4).unwrap().1, nu);
    assert!(misspecify_covariates(&[1.0, -2.0], (2.0, 5.0), 4).is_err());
}

#[test]
fn misspecified_designs_carry_the_transformed_column() {
    let spec = DgpSpec { ps_wrong: true, ..DgpSpec::default() };
    let (d, truth) = generate_trial(&spec, 12).unwrap();
    assert_eq!(d.covariate_names.last().unwrap(), "xtilde");
    let nu = truth.nu.unwrap();
    for u in d.units.iter().take(20) {
        assert_eq!(*u.x.last().unwrap(), misspecify(u.x[spec.misspec_column], nu).unwrap());
    }
    let s = spec.design_spec(&d.covariate_names[..d.covariate_names.len() - 1], Estimand::Cdatt, Estimator::Dr);
    assert_eq!(s.ps_covariates.as_deref(), Some(&["xtilde".to_string()][..]));
    assert!(s.or_covariates.is_none());
    let (plain, plain_truth) = generate_trial(&DgpSpec::default(), 12).unwrap();
    assert!(!plain.covariate_names.iter().any(|c| c == "xtilde"));
    assert!(plain_truth.nu.is_none());
}

#[test]
fn metric_examples() {
    let truth = vec![0.3; 50];
    let m = summarize_metrics(&truth, &[0.1; 50], &truth, 0.95).unwrap();
    assert_eq!((m.avg_bias, m.rmse, m.coverage), (0.0, 0.0, 1.0));
    assert!((m.ci_length - 0.392).abs() < 1e-3);

    let shifted: Vec<f64> = truth.iter().map(|t| t + 1.0).collect();
    let m = summarize_metrics(&shifted, &[0.1; 50], &truth, 0.95).unwrap();
    assert!((m.avg_bias - 1.0).abs() < 1e-12 && (m.median_bias - 1.0).abs() < 1e-12 && (m.rmse - 1.0).abs() < 1e-12);
    assert_eq!(m.coverage, 0.0);

    assert!(summarize_metrics(&[], &[], &[], 0.95).is_err());
    assert!(summarize_metrics(&[1.0], &[1.0, 2.0], &[1.0], 0.95).is_err());
}

#[test]
fn metrics_match_streaming_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let n = 10_000;
    let est: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.5)).collect();
    let se: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..0.5)).collect();
    let tr: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..0.5)).collect();
    let m = summarize_metrics(&est, &se, &tr, 0.95).unwrap();

    let z = 1.959963984540054;
    let (mut count, mut mean, mut m2) = (0.0f64, 0.0f64, 0.0f64);
    let (mut bias, mut sq, mut cover, mut len) = (0.0, 0.0, 0.0, 0.0);
    for i in 0..n {
        count += 1.0;
        let delta = est[i] - mean;
        mean += delta / count;
        m2 += delta * (est[i] - mean);
        let b = est[i] - tr[i];
        bias += (b - bias) / count;
        sq += (b * b - sq) / count;
        let hit = if (est[i] - z * se[i] <= tr[i]) && (tr[i] <= est[i] + z * se[i]) { 1.0 } else { 0.0 };
        cover += (hit - cover) / count;
        len += (2.0 * z * se[i] - len) / count;
    }
    let close = |a: f64, b: f64| (a - b).abs() < 1e-10;
    assert!(close(m.mean_estimate, mean));
    assert!(close(m.avg_bias, bias));
    assert!(close(m.rmse, sq.sqrt()));
    assert!(close(m.emp_sd, (m2 / (count - 1.0)).sqrt()));
    assert!(close(m.coverage, cover));
    assert!(close(m.ci_length, len));
    assert!(m.rmse >= m.avg_bias.abs());
}

#[test]
fn trial_data_is_a_function_of_the_seed() {
    let spec = DgpSpec { gamma: 1.0, ..DgpSpec::default() };
    let a = generate_trial(&spec, 100).unwrap();
    let b = generate_trial(&spec, 100).unwrap();
    let c = generate_trial(&spec, 101).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.0, c.0);
    assert_ne!(trial_seed(1, 0), trial_seed(1, 1));
    assert_ne!(trial_seed(1, 0), trial_seed(2, 0));
}

#[test]
fn null_monte_carlo_is_calibrated() {
    let spec = DgpSpec { effect: Effect::None, ..DgpSpec::default() };
    let report = run_monte_carlo(&spec, &default_suite(), 100, 2024).unwrap();
    assert_eq!(report.rows.len(), 8);
    for r in &report.rows {
        let m = &r.metrics;
        assert_eq!(r.failures, 0);
        assert!(m.avg_bias.abs() <= 3.0 * m.emp_sd / 10.0, "{}/{}: {}", r.estimand, r.estimator, m.avg_bias);
        assert!(m.coverage >= 0.90, "{}/{}: coverage {}", r.estimand, r.estimator, m.coverage);
        assert!((0.0..=1.0).contains(&m.coverage) && m.rmse >= m.avg_bias.abs());
    }
}

#[test]
fn monte_carlo_is_reproducible_across_thread_counts() {
    let spec: DgpSpec = serde_json::from_str(
        r#"{"gamma": 1.0, "trim_drop": true, "aggregation_weights": [0.5, 0.25, 0.25],
            "layout": {"kind": "staggered", "cohorts": [2, 3], "last": 3}}"#,
    )
    .unwrap();
    let suite = [SuiteEntry { estimand: Estimand::Cdatt, estimator: Estimator::Dr }];
    let serial = McOptions { threads: Some(1), keep_trials: true };
    let parallel = McOptions { threads: Some(4), keep_trials: true };
    let a = run_monte_carlo_with(&spec, &suite, 12, 5, &serial).unwrap();
    let b = run_monte_carlo_with(&spec, &suite, 12, 5, &parallel).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
    let (mut ca, mut cb) = (Vec::new(), Vec::new());
    a.write_trials_csv(&mut ca).unwrap();
    b.write_trials_csv(&mut cb).unwrap();
    assert_eq!(ca, cb);
    assert_eq!(a.rows.len(), 4);
    assert_eq!(a.rows.last().unwrap().target(), "aggregate");
    let other = run_monte_carlo_with(&spec, &suite, 12, 6, &serial).unwrap();
    assert_ne!(a.rows, other.rows);
}

#[test]
fn invalid_specs_and_suites_are_rejected() {
    let mut spec = DgpSpec::default();
    spec.alpha[1].pop();
    assert!(matches!(Dgp::new(&spec), Err(Error::Usage(_))));
    let spec = DgpSpec { n: 50, ..DgpSpec::default() };
    assert!(Dgp::new(&spec).is_err());
    let spec = DgpSpec { gamma: -1.0, ..DgpSpec::default() };
    assert!(Dgp::new(&spec).is_err());
    assert!(DgpSpec::from_json(r#"{"gama": 1.0}"#).is_err());

    let bad = [SuiteEntry { estimand: Estimand::Cdatt, estimator: Estimator::ThreeWfe }];
    assert!(matches!(run_monte_carlo(&DgpSpec::default(), &bad, 1, 1), Err(Error::Usage(_))));
    assert!(run_monte_carlo(&DgpSpec::default(), &default_suite(), 0, 1).is_err());
}
