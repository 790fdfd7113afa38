mod common;

use common::{close, degenerate, four_cell_means, random_panel, spec, unit};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use triplediff::datt::{cluster_aggregated_datt, estimate_datt_3wfe, estimate_datt_unadjusted};
use triplediff::simlab::{generate_trial, DgpSpec};
use triplediff::{estimate_datt, Cohort, Comparison, Estimand, Estimator, PanelDataset};

const ADJUSTED: [Estimator; 3] = [Estimator::Ra, Estimator::Ipw, Estimator::Dr];

fn shifted(d: &PanelDataset, f: impl Fn(usize, usize) -> f64) -> PanelDataset {
    let mut out = d.clone();
    for (i, u) in out.units.iter_mut().enumerate() {
        for (j, y) in u.y.iter_mut().enumerate() {
            *y += f(i, j);
        }
    }
    out
}

fn swapped(d: &PanelDataset) -> PanelDataset {
    let mut out = d.clone();
    for u in &mut out.units {
        u.subgroup = if u.subgroup == "a" { "b".into() } else { "a".into() };
    }
    out
}

/// Four cells with prescribed mean changes, two units each.
fn cells_with_means(means: [f64; 4]) -> PanelDataset {
    let mut units = Vec::new();
    for (c, m) in means.iter().enumerate() {
        let cohort = if c < 2 { Cohort::At(2) } else { Cohort::Never };
        let sub = if c % 2 == 0 { "a" } else { "b" };
        for (k, off) in [-0.1, 0.1].iter().enumerate() {
            let y0 = c as f64 + k as f64;
            units.push(unit(&format!("c{c}k{k}"), cohort, sub, vec![], vec![y0, y0 + m + off]));
        }
    }
    PanelDataset::new(vec![1, 2], vec![], units).unwrap()
}

#[test]
fn constant_change_gives_zero() {
    let mut d = random_panel(80, 2, 1);
    for u in &mut d.units {
        u.y[1] = u.y[0] + 7.0;
    }
    for est in [Estimator::Unadjusted, Estimator::ThreeWfe, Estimator::Ra, Estimator::Ipw, Estimator::Dr] {
        let e = estimate_datt(&d, 2, 2, &spec(Estimand::Datt, est), est).unwrap();
        assert!(e.estimate.abs() < 1e-9, "{est}: {}", e.estimate);
    }
}

#[test]
fn four_cell_means_example() {
    let d = cells_with_means([1.0, 0.4, 0.3, 0.2]);
    let e = estimate_datt_unadjusted(&d, 2, 2, &spec(Estimand::Datt, Estimator::Unadjusted)).unwrap();
    assert!((e.estimate - 0.5).abs() < 1e-12);
    assert_eq!(e.diagnostics.cell_counts, [2, 2, 2, 2]);
    assert_eq!(e.n, 8);
    assert!(e.influence.iter().sum::<f64>().abs() < 1e-12);
}

#[test]
fn swapping_subgroups_negates() {
    let d = random_panel(400, 2, 2);
    let sw = swapped(&d);
    for est in [Estimator::Unadjusted, Estimator::ThreeWfe] {
        let s = spec(Estimand::Datt, est);
        let a = estimate_datt(&d, 2, 2, &s, est).unwrap();
        let b = estimate_datt(&sw, 2, 2, &s, est).unwrap();
        assert!((a.estimate + b.estimate).abs() < 1e-10, "{est}");
        assert!(close(a.se, b.se, 1e-10));
    }
    for est in ADJUSTED {
        let s = spec(Estimand::Datt, est);
        let a = estimate_datt(&d, 2, 2, &s, est).unwrap();
        let b = estimate_datt(&sw, 2, 2, &s, est).unwrap();
        assert!((a.estimate + b.estimate).abs() < 1e-8, "{est}: {} vs {}", a.estimate, b.estimate);
    }
}

#[test]
fn outcome_shifts_leave_estimates_unchanged() {
    let d = random_panel(400, 2, 3);
    let everywhere = shifted(&d, |_, _| 12.5);
    let per_unit = shifted(&d, |i, _| (i as f64).sin() * 3.0);
    for est in [Estimator::Unadjusted, Estimator::ThreeWfe, Estimator::Ra, Estimator::Ipw, Estimator::Dr] {
        let s = spec(Estimand::Datt, est);
        let base = estimate_datt(&d, 2, 2, &s, est).unwrap().estimate;
        assert!((estimate_datt(&everywhere, 2, 2, &s, est).unwrap().estimate - base).abs() < 1e-10, "{est}");
        if est != Estimator::ThreeWfe {
            assert!((estimate_datt(&per_unit, 2, 2, &s, est).unwrap().estimate - base).abs() < 1e-9, "{est}");
        }
    }
}

#[test]
fn degenerate_covariates_reduce_to_cell_means() {
    for seed in 0..5 {
        let d = random_panel(120 + 13 * seed as usize, 3, seed);
        let oracle = four_cell_means(&d, 2, 2, "a", "b", Comparison::Never);
        for est in [Estimator::Unadjusted, Estimator::ThreeWfe, Estimator::Ra, Estimator::Ipw, Estimator::Dr] {
            let e = estimate_datt(&d, 2, 2, &degenerate(spec(Estimand::Datt, est)), est).unwrap();
            assert!((e.estimate - oracle).abs() < 1e-8, "{est} seed {seed}: {} vs {oracle}", e.estimate);
        }
    }
}

#[test]
fn three_way_fe_matches_unadjusted_without_covariates() {
    let d = random_panel(600, 0, 4);
    let s = spec(Estimand::Datt, Estimator::ThreeWfe);
    let fe = estimate_datt_3wfe(&d, 2, 2, &s).unwrap();
    let um = estimate_datt_unadjusted(&d, 2, 2, &s).unwrap();
    assert!((fe.estimate - um.estimate).abs() < 1e-10);
    assert!(fe.se > 0.0);
}

#[test]
fn three_way_fe_null_calibration() {
    let trials = 200;
    let mut inside = 0;
    for trial in 0..trials {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + trial);
        let mut d = random_panel(4000, 2, trial);
        for u in &mut d.units {
            let e: f64 = StandardNormal.sample(&mut rng);
            u.y[1] = u.y[0] + 0.4 * u.x[0] + if u.subgroup == "a" { 0.3 } else { 0.0 } + e;
        }
        let e = estimate_datt_3wfe(&d, 2, 2, &spec(Estimand::Datt, Estimator::ThreeWfe)).unwrap();
        if e.estimate.abs() < 4.0 * e.se {
            inside += 1;
        }
    }
    assert!(inside as f64 >= 0.99 * trials as f64, "{inside}/{trials}");
}

#[test]
fn null_design_estimates_near_zero() {
    let mut d = random_panel(2000, 2, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    for u in &mut d.units {
        let e: f64 = StandardNormal.sample(&mut rng);
        u.y[1] = u.y[0] + 0.5 * u.x[1] + e;
    }
    for est in ADJUSTED {
        let e = estimate_datt(&d, 2, 2, &spec(Estimand::Datt, est), est).unwrap();
        assert!(e.estimate.abs() < 4.0 * e.se, "{est}: {} ({})", e.estimate, e.se);
    }
}

#[test]
fn heterogeneous_design_recovers_nonzero_gap() {
    let spec_dgp = DgpSpec { n: 20000, ..DgpSpec::default() };
    let truth = triplediff::simlab::Dgp::new(&spec_dgp).unwrap().truth().datt;
    assert!(truth > 0.1);
    let (d, _) = generate_trial(&spec_dgp, 17).unwrap();
    let s = spec_dgp.design_spec(&d.covariate_names, Estimand::Datt, Estimator::Dr);
    for est in ADJUSTED {
        let e = estimate_datt(&d, 2, 2, &s, est).unwrap();
        assert!((e.estimate - truth).abs() < 4.0 * e.se, "{est}: {} vs {truth}", e.estimate);
        assert!(e.estimate > 4.0 * e.se, "{est}: not distinguishable from 0");
    }
}

#[test]
fn cluster_collapse_reproduces_unadjusted() {
    let d = random_panel(300, 1, 6);
    let s = spec(Estimand::Datt, Estimator::Unadjusted);
    let direct = estimate_datt_unadjusted(&d, 2, 2, &s).unwrap().estimate;
    let clusters: Vec<String> = (0..d.n_units()).map(|i| format!("state{}", (i * 7) % 11)).collect();
    let collapsed = cluster_aggregated_datt(&d, &clusters, 2, 2, &s).unwrap();
    assert!((direct - collapsed).abs() < 1e-10);
    assert!(cluster_aggregated_datt(&d, &clusters[1..], 2, 2, &s).is_err());
}

#[test]
fn not_yet_treated_comparison_uses_later_cohort() {
    let spec_dgp: DgpSpec = serde_json::from_str(
        r#"{"n": 3000, "gamma": 1.0, "layout": {"kind": "staggered", "cohorts": [2, 3], "last": 3}}"#,
    )
    .unwrap();
    let (d, _) = generate_trial(&spec_dgp, 4).unwrap();
    let mut s = spec_dgp.design_spec(&d.covariate_names, Estimand::Datt, Estimator::Unadjusted);
    s.comparison = Some(Comparison::NotYet);
    let e = estimate_datt_unadjusted(&d, 2, 2, &s).unwrap();
    let oracle = four_cell_means(&d, 2, 2, &s.s, &s.sprime, Comparison::NotYet);
    assert!((e.estimate - oracle).abs() < 1e-10);
    assert_eq!(e.comparison, Comparison::NotYet);
}
