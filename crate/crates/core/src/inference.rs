//! Influence values, plug-in standard errors and confidence intervals, and
//! weighted aggregation of group-time effects.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::cdatt::{CdattFits, CdattWeights};
use crate::dataset::{Comparison, DesignSpec, Estimand, PanelDataset, Problem, UnitRecord};
use crate::datt::{mean, EffectEstimate};
use crate::error::{Error, Result};

fn std_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("standard normal")
}

/// `z_{1 - (1 - level)/2}`.
pub fn z_two_sided(level: f64) -> f64 {
    std_normal().inverse_cdf(1.0 - (1.0 - level) / 2.0)
}

/// `z_{level}` for a one-sided interval.
pub fn z_one_sided(level: f64) -> f64 {
    std_normal().inverse_cdf(level)
}

/// `SE = sqrt(mean(eta^2) / n)` and the symmetric normal interval.
pub fn standard_error_ci(influence: &[f64], estimate: f64, level: f64) -> Result<(f64, (f64, f64))> {
    let n = influence.len();
    if n < 2 {
        return Err(Error::Degenerate(format!("standard error needs n >= 2, got {n}")));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::Usage(format!("confidence level {level} outside (0, 1)")));
    }
    let ms = influence.iter().map(|v| v * v).sum::<f64>() / n as f64;
    let se = (ms / n as f64).sqrt();
    let z = z_two_sided(level);
    Ok((se, (estimate - z * se, estimate + z * se)))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InfluenceVector {
    pub values: Vec<f64>,
    pub ids: Vec<String>,
}

/// The six additive pieces of the DR influence function.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InfluenceParts {
    pub eta_gs: Vec<f64>,
    pub eta_gsprime: Vec<f64>,
    pub eta_cs: Vec<f64>,
    pub eta_csprime: Vec<f64>,
    pub phi: Vec<f64>,
    pub psi: Vec<f64>,
    pub total: InfluenceVector,
}

/// Influence values of the panel DR CDATT estimator.
///
/// Each piece carries its own sign, so `total` is the plain sum. The outcome
/// fits for subgroup `s` cancel within each unit; they only split the total
/// into the treated, comparison and regression-gap parts.
pub fn influence_values(p: &Problem, w: &CdattWeights, fits: &CdattFits, estimate: f64) -> Result<InfluenceParts> {
    let n = p.n();
    let mu_g_s = fits.mu_g_s.as_ref().ok_or_else(|| Error::InvalidData("missing outcome fit on G_g x S_s".into()))?;
    let mu_c_s = fits.mu_c_s.as_ref().ok_or_else(|| Error::InvalidData("missing outcome fit on C_c x S_s".into()))?;
    let m_g = fits.m_g.as_ref().ok_or_else(|| Error::InvalidData("missing outcome fit on G_g x S_s'".into()))?;
    let m_c = fits.m_c.as_ref().ok_or_else(|| Error::InvalidData("missing outcome fit on C_c x S_s'".into()))?;
    let [w1, w2, w3, w4] = &w.w;
    let rg: Vec<f64> = (0..n).map(|i| p.dy[i] - m_g[i]).collect();
    let rc: Vec<f64> = (0..n).map(|i| p.dy[i] - m_c[i]).collect();
    let avg = |wt: &[f64], r: &[f64]| mean(&wt.iter().zip(r).map(|(a, b)| a * b).collect::<Vec<_>>());
    let b = avg(w2, &rg);
    let c = avg(w3, &rc);
    let d = avg(w4, &rc);
    let a = estimate + b + c - d;
    let eta_gs: Vec<f64> = (0..n).map(|i| w1[i] * (p.dy[i] - mu_g_s[i])).collect();
    let eta_gsprime: Vec<f64> = (0..n).map(|i| -w2[i] * (rg[i] - b)).collect();
    let eta_cs: Vec<f64> = (0..n).map(|i| -w3[i] * (p.dy[i] - mu_c_s[i])).collect();
    let eta_csprime: Vec<f64> = (0..n).map(|i| w4[i] * (rc[i] - d)).collect();
    let phi: Vec<f64> = (0..n).map(|i| w1[i] * (mu_g_s[i] - m_g[i] - a)).collect();
    let psi: Vec<f64> = (0..n).map(|i| -w3[i] * (mu_c_s[i] - m_c[i] - c)).collect();
    let total = (0..n).map(|i| eta_gs[i] + eta_gsprime[i] + eta_cs[i] + eta_csprime[i] + phi[i] + psi[i]).collect();
    Ok(InfluenceParts {
        eta_gs,
        eta_gsprime,
        eta_cs,
        eta_csprime,
        phi,
        psi,
        total: InfluenceVector { values: total, ids: p.ids.clone() },
    })
}

// ---------------------------------------------------------------------------
// Aggregation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AggregateComponent {
    pub g: i64,
    pub t: i64,
    pub weight: f64,
    pub estimate: f64,
    pub se: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AggregatedEffect {
    pub estimand: Estimand,
    pub comparison: Comparison,
    pub components: Vec<AggregateComponent>,
    pub estimate: f64,
    pub se: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub level: f64,
    /// Per-unit combined influence over the union of units, scaled so that
    /// `se = sqrt(mean(influence^2) / n)`.
    pub influence: InfluenceVector,
}

/// Scaled per-unit contributions `eta_i / n` keyed by unit id.
fn contributions(e: &EffectEstimate) -> BTreeMap<&str, f64> {
    let n = e.influence.len() as f64;
    let mut out = BTreeMap::new();
    for (id, v) in e.ids.iter().zip(&e.influence) {
        *out.entry(id.as_str()).or_insert(0.0) += v / n;
    }
    out
}

/// Weighted average of group-time effects with unit-level influence pooling.
pub fn aggregate_group_time(effects: &[EffectEstimate], weights: &[f64]) -> Result<AggregatedEffect> {
    if effects.is_empty() {
        return Err(Error::Usage("no effects to aggregate".into()));
    }
    if effects.len() != weights.len() {
        return Err(Error::Arity { expected: effects.len(), got: weights.len() });
    }
    if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
        return Err(Error::Usage("aggregation weights must be nonnegative".into()));
    }
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::Usage(format!("aggregation weights sum to {total}, not 1")));
    }
    let first = &effects[0];
    for e in effects {
        if e.estimand != first.estimand || e.comparison != first.comparison {
            return Err(Error::Usage(format!(
                "cannot aggregate {} ({}) with {} ({})",
                first.estimand, first.comparison, e.estimand, e.comparison
            )));
        }
        if (e.level - first.level).abs() > 0.0 {
            return Err(Error::Usage("effects use different confidence levels".into()));
        }
    }
    let mut pooled: BTreeMap<&str, f64> = BTreeMap::new();
    for (e, w) in effects.iter().zip(weights) {
        for (id, c) in contributions(e) {
            *pooled.entry(id).or_insert(0.0) += w * c;
        }
    }
    let estimate: f64 = effects.iter().zip(weights).map(|(e, w)| w * e.estimate).sum();
    let var: f64 = pooled.values().map(|c| c * c).sum();
    let se = var.sqrt();
    let z = z_two_sided(first.level);
    let n = pooled.len() as f64;
    let (ids, values): (Vec<String>, Vec<f64>) = pooled.into_iter().map(|(id, c)| (id.to_string(), n * c)).unzip();
    Ok(AggregatedEffect {
        estimand: first.estimand,
        comparison: first.comparison,
        components: effects
            .iter()
            .zip(weights)
            .map(|(e, w)| AggregateComponent { g: e.g, t: e.t, weight: *w, estimate: e.estimate, se: e.se })
            .collect(),
        estimate,
        se,
        ci_lo: estimate - z * se,
        ci_hi: estimate + z * se,
        level: first.level,
        influence: InfluenceVector { values, ids },
    })
}

/// Asymptotic covariance of two estimates from their shared units.
pub fn pairwise_covariance(a: &EffectEstimate, b: &EffectEstimate) -> f64 {
    let ca = contributions(a);
    let cb = contributions(b);
    ca.iter().filter_map(|(id, x)| cb.get(id).map(|y| x * y)).sum()
}

// ---------------------------------------------------------------------------
// Bootstrap
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BootstrapResult {
    pub se: f64,
    pub replicates: Vec<f64>,
    pub failed: usize,
}

/// Nonparametric unit bootstrap of any panel estimator.
pub fn bootstrap_se(
    data: &PanelDataset,
    reps: usize,
    seed: u64,
    estimator: impl Fn(&PanelDataset) -> Result<EffectEstimate> + Sync,
) -> Result<BootstrapResult> {
    use rayon::prelude::*;
    if reps < 2 {
        return Err(Error::Usage("bootstrap needs at least 2 replicates".into()));
    }
    let n = data.n_units();
    let draws: Vec<Option<f64>> = (0..reps)
        .into_par_iter()
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(crate::simlab::trial_seed(seed, r as u64));
            let units: Vec<UnitRecord> = (0..n)
                .map(|k| {
                    let mut u = data.units[rng.random_range(0..n)].clone();
                    u.unit_id = format!("{}#{k}", u.unit_id);
                    u
                })
                .collect();
            let boot = PanelDataset {
                times: data.times.clone(),
                covariate_names: data.covariate_names.clone(),
                subgroups: data.subgroups.clone(),
                units,
            };
            estimator(&boot).ok().map(|e| e.estimate)
        })
        .collect();
    let replicates: Vec<f64> = draws.iter().flatten().cloned().collect();
    let failed = reps - replicates.len();
    if replicates.len() < 2 || failed * 100 > reps {
        return Err(Error::MonteCarlo { failed, trials: reps, first: "bootstrap replicate failed".into() });
    }
    let m = mean(&replicates);
    let var = replicates.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (replicates.len() - 1) as f64;
    Ok(BootstrapResult { se: var.sqrt(), replicates, failed })
}

/// Convenience: bootstrap SE of the panel CDATT/DATT estimator named by `spec`.
pub fn bootstrap_design(
    data: &PanelDataset,
    g: i64,
    t: i64,
    spec: &DesignSpec,
    reps: usize,
    seed: u64,
) -> Result<BootstrapResult> {
    let spec = spec.clone();
    bootstrap_se(data, reps, seed, move |d| match spec.estimand {
        Estimand::Cdatt => crate::cdatt::estimate_cdatt(d, g, t, &spec, spec.estimator),
        _ => crate::datt::estimate_datt(d, g, t, &spec, spec.estimator),
    })
}
