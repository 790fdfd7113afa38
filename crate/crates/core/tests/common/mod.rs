#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use triplediff::{Cohort, Comparison, DesignSpec, Estimand, Estimator, PanelDataset, UnitRecord};

pub fn unit(id: &str, cohort: Cohort, sub: &str, x: Vec<f64>, y: Vec<f64>) -> UnitRecord {
    UnitRecord { unit_id: id.to_string(), cohort, subgroup: sub.to_string(), x, y }
}

pub fn spec(estimand: Estimand, estimator: Estimator) -> DesignSpec {
    DesignSpec::new(estimand, estimator, "a", "b")
}

/// Intercept-only working models.
pub fn degenerate(mut s: DesignSpec) -> DesignSpec {
    s.covariates = Some(Vec::new());
    s
}

/// Two-period panel (times 1, 2; cohorts 2 or never) with `k` covariates
/// that shift both cell membership odds and outcome trends.
pub fn random_panel(n: usize, k: usize, seed: u64) -> PanelDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let units = (0..n)
        .map(|i| {
            let x: Vec<f64> = (0..k).map(|_| StandardNormal.sample(&mut rng)).collect();
            let cell = i % 4;
            let cohort = if cell < 2 { Cohort::At(2) } else { Cohort::Never };
            let sub = if cell % 2 == 0 { "a" } else { "b" };
            let trend: f64 = x.iter().enumerate().map(|(j, v)| (j as f64 + 1.0) * 0.3 * v).sum();
            let base: f64 = 1.0 + x.iter().sum::<f64>();
            let e0: f64 = StandardNormal.sample(&mut rng);
            let e1: f64 = StandardNormal.sample(&mut rng);
            let effect = if cohort == Cohort::At(2) { 0.5 + (cell as f64) * 0.25 } else { 0.0 };
            let y = vec![base + e0, base + trend + effect + e1 + rng.random::<f64>()];
            unit(&format!("u{i}"), cohort, sub, x, y)
        })
        .collect();
    PanelDataset::new(vec![1, 2], (0..k).map(|j| format!("x{j}")).collect(), units).unwrap()
}

/// Triple difference of cell means of `Y_t - Y_{g-1}`, computed from scratch.
pub fn four_cell_means(data: &PanelDataset, g: i64, t: i64, s: &str, sp: &str, comparison: Comparison) -> f64 {
    let jt = data.times.iter().position(|&v| v == t).unwrap();
    let jb = data.times.iter().position(|&v| v == g - 1).unwrap();
    let mut sums = [0.0; 4];
    let mut counts = [0.0; 4];
    for u in &data.units {
        let treated = u.cohort == Cohort::At(g);
        let comp = match comparison {
            Comparison::Never => u.cohort == Cohort::Never,
            Comparison::NotYet => !u.cohort.treated_at(t) && u.cohort != Cohort::At(g),
        };
        let sub = if u.subgroup == s {
            0
        } else if u.subgroup == sp {
            1
        } else {
            continue;
        };
        let cell = match (treated, comp) {
            (true, _) => sub,
            (false, true) => 2 + sub,
            _ => continue,
        };
        sums[cell] += u.y[jt] - u.y[jb];
        counts[cell] += 1.0;
    }
    let m: Vec<f64> = (0..4).map(|c| sums[c] / counts[c]).collect();
    (m[0] - m[1]) - (m[2] - m[3])
}

pub fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
}
