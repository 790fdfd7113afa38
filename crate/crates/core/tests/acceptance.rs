//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any fails.

mod common;

use std::path::Path;
use std::time::Instant;

use common::{four_cell_means, random_panel};
use triplediff::inference::bootstrap_design;
use triplediff::simlab::{default_suite, oversample_truth, run_monte_carlo_with, McOptions, SuiteEntry};
use triplediff::{
    estimate_cdatt, estimate_datt, generate_trial, run_monte_carlo, Comparison, DesignSpec, DgpSpec, Estimand,
    Estimator, McReport, PanelDataset,
};

const TRIALS: usize = 1000;
const SEED: u64 = 1;
const TWO_PERIOD: Option<(i64, i64)> = Some((2, 2));

fn scenario(name: &str) -> DgpSpec {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/dgp").join(format!("{name}.json"));
    DgpSpec::from_json(&std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))).unwrap()
}

fn simulate(spec: &DgpSpec, suite: &[SuiteEntry], trials: usize) -> Result<McReport, String> {
    run_monte_carlo(spec, suite, trials, SEED).map_err(|e| e.to_string())
}

fn cdatt_suite() -> Vec<SuiteEntry> {
    [Estimator::Ra, Estimator::Ipw, Estimator::Dr]
        .into_iter()
        .map(|estimator| SuiteEntry { estimand: Estimand::Cdatt, estimator })
        .collect()
}

fn metric(report: &McReport, estimand: Estimand, estimator: Estimator) -> &triplediff::simlab::Metrics {
    &report.row(estimand, estimator, TWO_PERIOD).expect("row present").metrics
}

type Outcome = Result<String, String>;

fn verdict(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

type Case = (PanelDataset, Vec<(i64, i64)>, Comparison, String, String);

/// Degenerate covariates: every estimator equals the four-cell-means triple difference.
fn oracle_equivalence() -> Outcome {
    let mut datasets: Vec<Case> = (0..6)
        .map(|seed| {
            (random_panel(150 + 37 * seed as usize, 2, seed), vec![(2, 2)], Comparison::Never, "a".into(), "b".into())
        })
        .collect();
    let staggered = scenario("staggered");
    let (d, _) = generate_trial(&staggered, 3).unwrap();
    for comparison in [Comparison::Never, Comparison::NotYet] {
        let pairs = if comparison == Comparison::NotYet { vec![(2, 2)] } else { staggered.target_pairs() };
        datasets.push((d.clone(), pairs, comparison, "targeted".into(), "untargeted".into()));
    }
    let mut worst = 0.0f64;
    let mut checked = 0;
    for (data, pairs, comparison, s, sp) in &datasets {
        for &(g, t) in pairs {
            let oracle = four_cell_means(data, g, t, s, sp, *comparison);
            let runs = [
                (Estimand::Datt, Estimator::Unadjusted),
                (Estimand::Datt, Estimator::ThreeWfe),
                (Estimand::Datt, Estimator::Ra),
                (Estimand::Datt, Estimator::Ipw),
                (Estimand::Datt, Estimator::Dr),
                (Estimand::Cdatt, Estimator::Ra),
                (Estimand::Cdatt, Estimator::Ipw),
                (Estimand::Cdatt, Estimator::Dr),
            ];
            for (estimand, estimator) in runs {
                let mut spec = DesignSpec::new(estimand, estimator, s, sp);
                spec.comparison = Some(*comparison);
                spec.covariates = Some(Vec::new());
                let e = match estimand {
                    Estimand::Cdatt => estimate_cdatt(data, g, t, &spec, estimator),
                    _ => estimate_datt(data, g, t, &spec, estimator),
                }
                .map_err(|e| format!("{estimand}/{estimator} at ({g},{t}): {e}"))?;
                worst = worst.max((e.estimate - oracle).abs());
                checked += 1;
            }
        }
    }
    verdict(worst < 1e-8, format!("{checked} estimates, max deviation {worst:.2e} (tol 1e-8)"))
}

fn null_calibration() -> Outcome {
    let report = simulate(&scenario("null"), &default_suite(), TRIALS)?;
    let worst = report.rows.iter().map(|r| r.metrics.avg_bias.abs()).fold(0.0, f64::max);
    let dr: Vec<f64> =
        [Estimand::Datt, Estimand::Cdatt].iter().map(|&e| metric(&report, e, Estimator::Dr).coverage).collect();
    let ok = worst < 0.01 && dr.iter().all(|c| (0.92..=0.97).contains(c));
    verdict(
        ok,
        format!(
            "max |avg bias| {worst:.4} (< 0.01); DR coverage datt {:.3}, cdatt {:.3} (in [0.92, 0.97])",
            dr[0], dr[1]
        ),
    )
}

fn divergence(reports: &[(f64, McReport)]) -> Outcome {
    let datt_rows = [Estimator::Unadjusted, Estimator::ThreeWfe, Estimator::Ra, Estimator::Ipw, Estimator::Dr];
    let mut ok = true;
    let mut parts = Vec::new();
    for (gamma, report) in reports {
        let spec = &report.spec;
        let (truth, truth_se) = oversample_truth(spec, 1_000_000, SEED).map_err(|e| e.to_string())?;
        let worst_gap = datt_rows
            .iter()
            .map(|&e| (metric(report, Estimand::Datt, e).mean_estimate - truth).abs())
            .fold(0.0, f64::max);
        let smallest =
            datt_rows.iter().map(|&e| metric(report, Estimand::Datt, e).mean_estimate).fold(f64::MAX, f64::min);
        let dr = metric(report, Estimand::Cdatt, Estimator::Dr);
        ok &= worst_gap <= 0.02 && smallest > 0.1 && dr.avg_bias.abs() < 0.01 && (0.91..=0.97).contains(&dr.coverage);
        parts.push(format!(
            "gamma {gamma}: DATT truth {truth:.4} (+/- {truth_se:.4}), max |mean - truth| {worst_gap:.4}, min mean {smallest:.3}; \
             CDATT DR bias {:.4}, coverage {:.3}",
            dr.avg_bias, dr.coverage
        ));
    }
    verdict(ok, parts.join("; "))
}

fn double_robustness() -> Outcome {
    let bias = |name: &str| -> Result<[f64; 3], String> {
        let r = simulate(&scenario(name), &cdatt_suite(), TRIALS)?;
        Ok([Estimator::Ra, Estimator::Ipw, Estimator::Dr].map(|e| metric(&r, Estimand::Cdatt, e).avg_bias.abs()))
    };
    let [_, ipw2, dr2] = bias("case2_ps_wrong")?;
    let [ra3, _, dr3] = bias("case3_or_wrong")?;
    let case4 = bias("case4_both_wrong")?;
    let ok = ipw2 > 0.1 && dr2 < 0.02 && ra3 > 0.1 && dr3 < 0.03 && case4.iter().all(|b| *b > 0.1);
    verdict(
        ok,
        format!(
            "case 2 IPW {ipw2:.3} DR {dr2:.4}; case 3 RA {ra3:.3} DR {dr3:.4}; case 4 RA/IPW/DR {:.3}/{:.3}/{:.3}",
            case4[0], case4[1], case4[2]
        ),
    )
}

fn efficiency(gamma0: &McReport) -> Outcome {
    let dr = metric(gamma0, Estimand::Cdatt, Estimator::Dr);
    let ipw = metric(gamma0, Estimand::Cdatt, Estimator::Ipw);
    let ratio = dr.mean_se / dr.emp_sd;
    verdict(
        dr.emp_sd <= ipw.emp_sd && (ratio - 1.0).abs() <= 0.15,
        format!("DR sd {:.4} vs IPW sd {:.4}; DR mean SE / sd {ratio:.3} (within 15%)", dr.emp_sd, ipw.emp_sd),
    )
}

fn bootstrap_check() -> Outcome {
    let spec = DgpSpec { n: 2000, ..scenario("gamma0") };
    let (d, _) = generate_trial(&spec, SEED).map_err(|e| e.to_string())?;
    let design = spec.design_spec(&d.covariate_names, Estimand::Cdatt, Estimator::Dr);
    let e = estimate_cdatt(&d, 2, 2, &design, Estimator::Dr).map_err(|e| e.to_string())?;
    let boot = bootstrap_design(&d, 2, 2, &design, 999, SEED).map_err(|e| e.to_string())?;
    let gap = e.se / boot.se - 1.0;
    verdict(
        gap.abs() <= 0.10,
        format!(
            "analytic SE {:.4}, bootstrap SE {:.4} ({} failed reps), relative gap {:+.3}",
            e.se, boot.se, boot.failed, gap
        ),
    )
}

fn staggered() -> Outcome {
    let spec = scenario("staggered");
    let weights = spec.aggregation_weights.clone().unwrap_or_default();
    let report = simulate(&spec, &[SuiteEntry { estimand: Estimand::Cdatt, estimator: Estimator::Dr }], 500)?;
    let mut ok = (weights.iter().sum::<f64>() - 1.0).abs() < 1e-12;
    let mut parts = Vec::new();
    for pair in spec.target_pairs().into_iter().map(Some).chain([None]) {
        let row = report.row(Estimand::Cdatt, Estimator::Dr, pair).ok_or("missing staggered row")?;
        ok &= row.metrics.avg_bias.abs() < 0.015;
        parts.push(format!("{} {:+.4}", row.target(), row.metrics.avg_bias));
    }
    verdict(ok, format!("bias by target: {} (each < 0.015); weights {weights:?}", parts.join(", ")))
}

fn repeated_cross_section() -> Outcome {
    let report = simulate(&scenario("rc"), &[SuiteEntry { estimand: Estimand::Cdatt, estimator: Estimator::Dr }], 500)?;
    let m = metric(&report, Estimand::Cdatt, Estimator::Dr);
    verdict(m.avg_bias.abs() < 0.015, format!("RC DR bias {:+.4} (< 0.015), coverage {:.3}", m.avg_bias, m.coverage))
}

fn determinism() -> Outcome {
    let bytes = |spec: &DgpSpec, threads: usize| -> Result<Vec<u8>, String> {
        let options = McOptions { threads: Some(threads), keep_trials: true };
        let r = run_monte_carlo_with(spec, &default_suite(), 50, SEED, &options).map_err(|e| e.to_string())?;
        let mut out = r.to_json().map_err(|e| e.to_string())?.into_bytes();
        r.write_csv(&mut out).map_err(|e| e.to_string())?;
        r.write_trials_csv(&mut out).map_err(|e| e.to_string())?;
        Ok(out)
    };
    let mut ok = true;
    for name in ["gamma1", "case4_both_wrong"] {
        let spec = scenario(name);
        let serial = bytes(&spec, 1)?;
        ok &= serial == bytes(&spec, 1)? && serial == bytes(&spec, 4)?;
    }
    let rc = scenario("rc");
    let options = |threads| McOptions { threads: Some(threads), keep_trials: true };
    let dr = [SuiteEntry { estimand: Estimand::Cdatt, estimator: Estimator::Dr }];
    let a = run_monte_carlo_with(&rc, &dr, 30, SEED, &options(1)).map_err(|e| e.to_string())?;
    let b = run_monte_carlo_with(&rc, &dr, 30, SEED, &options(4)).map_err(|e| e.to_string())?;
    ok &= a.to_json().ok() == b.to_json().ok();
    verdict(ok, "serial, repeated serial and 4-thread reports compared byte for byte".into())
}

fn main() {
    let started = Instant::now();
    let mut results: Vec<(&str, Outcome)> = Vec::new();
    let mut timed = |name: &'static str, f: &mut dyn FnMut() -> Outcome| {
        let t = Instant::now();
        let out = f();
        eprintln!("  ({name}: {:.1}s)", t.elapsed().as_secs_f64());
        results.push((name, out));
    };

    timed("1 oracle equivalence", &mut oracle_equivalence);
    timed("2 null calibration", &mut null_calibration);

    let mut heterogeneity = Vec::new();
    let mut failed_runs = Vec::new();
    timed("3 DATT/CDATT divergence", &mut || {
        for (gamma, name) in [(0.0, "gamma0"), (0.2, "gamma0.2"), (1.0, "gamma1")] {
            match simulate(&scenario(name), &default_suite(), TRIALS) {
                Ok(r) => heterogeneity.push((gamma, r)),
                Err(e) => failed_runs.push(format!("{name}: {e}")),
            }
        }
        if failed_runs.is_empty() {
            divergence(&heterogeneity)
        } else {
            Err(failed_runs.join("; "))
        }
    });
    timed("4 double robustness", &mut double_robustness);
    timed("5 efficiency ordering", &mut || match heterogeneity.first() {
        Some((_, r)) if failed_runs.is_empty() => efficiency(r),
        _ => Err("gamma = 0 simulation unavailable".into()),
    });
    timed("6 bootstrap cross-check", &mut bootstrap_check);
    timed("7 staggered design", &mut staggered);
    timed("8 repeated cross-section", &mut repeated_cross_section);
    timed("9 determinism", &mut determinism);

    let mut failures = 0;
    for (name, outcome) in &results {
        match outcome {
            Ok(detail) => println!("PASS  {name}: {detail}"),
            Err(detail) => {
                failures += 1;
                println!("FAIL  {name}: {detail}");
            }
        }
    }
    println!(
        "{} of {} criteria passed in {:.0}s",
        results.len() - failures,
        results.len(),
        started.elapsed().as_secs_f64()
    );
    if failures > 0 {
        std::process::exit(1);
    }
}
