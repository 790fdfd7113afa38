//! Monte Carlo metrics and report output.

use std::io::Write;

use serde::Serialize;

use super::{DgpSpec, SuiteEntry, TruthRecord};
use crate::dataset::{Estimand, Estimator};
use crate::error::{Error, Result};
use crate::inference::z_two_sided;

/// Bias, dispersion and interval metrics against known truths.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Metrics {
    pub mean_estimate: f64,
    pub avg_bias: f64,
    pub median_bias: f64,
    pub rmse: f64,
    /// Standard deviation of the estimates across trials.
    pub emp_sd: f64,
    pub mean_se: f64,
    pub coverage: f64,
    pub ci_length: f64,
}

/// Metrics over aligned estimate, standard error and truth vectors.
///
/// Intervals are `estimate +/- z se` at `level`.
pub fn summarize_metrics(estimates: &[f64], ses: &[f64], truths: &[f64], level: f64) -> Result<Metrics> {
    let n = estimates.len();
    if n == 0 {
        return Err(Error::Degenerate("no estimates to summarize".into()));
    }
    if ses.len() != n {
        return Err(Error::Arity { expected: n, got: ses.len() });
    }
    if truths.len() != n {
        return Err(Error::Arity { expected: n, got: truths.len() });
    }
    let z = z_two_sided(level);
    let nf = n as f64;
    let mut bias: Vec<f64> = estimates.iter().zip(truths).map(|(e, t)| e - t).collect();
    let avg_bias = bias.iter().sum::<f64>() / nf;
    let rmse = (bias.iter().map(|b| b * b).sum::<f64>() / nf).sqrt();
    let mean_estimate = estimates.iter().sum::<f64>() / nf;
    let emp_sd = if n > 1 {
        (estimates.iter().map(|e| (e - mean_estimate).powi(2)).sum::<f64>() / (nf - 1.0)).sqrt()
    } else {
        0.0
    };
    let covered = estimates
        .iter()
        .zip(ses)
        .zip(truths)
        .filter(|((e, s), t)| (*e - z * *s) <= **t && **t <= (*e + z * *s))
        .count();
    bias.sort_by(f64::total_cmp);
    let median_bias = if n % 2 == 1 { bias[n / 2] } else { 0.5 * (bias[n / 2 - 1] + bias[n / 2]) };
    Ok(Metrics {
        mean_estimate,
        avg_bias,
        median_bias,
        rmse,
        emp_sd,
        mean_se: ses.iter().sum::<f64>() / nf,
        coverage: covered as f64 / nf,
        ci_length: 2.0 * z * ses.iter().sum::<f64>() / nf,
    })
}

/// One estimator at one group-time target, or at the aggregate when `g`
/// and `t` are empty.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct McRow {
    pub estimand: Estimand,
    pub estimator: Estimator,
    pub g: Option<i64>,
    pub t: Option<i64>,
    pub trials: usize,
    pub failures: usize,
    pub first_failure: Option<String>,
    /// Mean truth over successful trials.
    pub truth: f64,
    #[serde(flatten)]
    pub metrics: Metrics,
}

impl McRow {
    pub(crate) fn new(
        entry: &SuiteEntry,
        pair: Option<(i64, i64)>,
        trials: usize,
        truths: &[f64],
        metrics: Metrics,
        failures: &[String],
    ) -> Self {
        McRow {
            estimand: entry.estimand,
            estimator: entry.estimator,
            g: pair.map(|p| p.0),
            t: pair.map(|p| p.1),
            trials,
            failures: failures.len(),
            first_failure: failures.first().cloned(),
            truth: truths.iter().sum::<f64>() / truths.len().max(1) as f64,
            metrics,
        }
    }

    pub fn target(&self) -> String {
        match (self.g, self.t) {
            (Some(g), Some(t)) => format!("({g},{t})"),
            _ => "aggregate".into(),
        }
    }
}

/// Estimates from one trial, for external plotting.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrialRecord {
    pub trial: usize,
    pub seed: u64,
    pub estimand: Estimand,
    pub estimator: Estimator,
    pub g: Option<i64>,
    pub t: Option<i64>,
    pub truth: f64,
    pub estimate: Option<f64>,
    pub se: Option<f64>,
    pub ci_lo: Option<f64>,
    pub ci_hi: Option<f64>,
    pub error: Option<String>,
}

impl TrialRecord {
    pub(crate) fn new(
        (trial, seed): (usize, u64),
        entry: &SuiteEntry,
        pair: Option<(i64, i64)>,
        truth: f64,
        outcome: std::result::Result<[f64; 4], &str>,
    ) -> Self {
        let v = outcome.ok();
        TrialRecord {
            trial,
            seed,
            estimand: entry.estimand,
            estimator: entry.estimator,
            g: pair.map(|p| p.0),
            t: pair.map(|p| p.1),
            truth,
            estimate: v.map(|v| v[0]),
            se: v.map(|v| v[1]),
            ci_lo: v.map(|v| v[2]),
            ci_hi: v.map(|v| v[3]),
            error: outcome.err().map(str::to_string),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct McReport {
    pub spec: DgpSpec,
    pub trials: usize,
    pub master_seed: u64,
    pub level: f64,
    /// Population truths of the scenario.
    pub truth: TruthRecord,
    pub rows: Vec<McRow>,
    #[serde(skip)]
    pub trial_records: Option<Vec<TrialRecord>>,
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl McReport {
    /// Fails when any row lost more than 1% of its trials.
    pub fn check_failures(&self) -> Result<()> {
        match self.rows.iter().find(|r| r.failures * 100 > r.trials) {
            Some(r) => Err(Error::MonteCarlo {
                failed: r.failures,
                trials: r.trials,
                first: format!(
                    "{}/{} at {}: {}",
                    r.estimand,
                    r.estimator,
                    r.target(),
                    r.first_failure.as_deref().unwrap_or("unknown")
                ),
            }),
            None => Ok(()),
        }
    }

    pub fn row(&self, estimand: Estimand, estimator: Estimator, pair: Option<(i64, i64)>) -> Option<&McRow> {
        self.rows.iter().find(|r| {
            r.estimand == estimand && r.estimator == estimator && r.g == pair.map(|p| p.0) && r.t == pair.map(|p| p.1)
        })
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Numerical(format!("cannot serialize report: {e}")))
    }

    /// One line per row.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let header = [
            "estimand",
            "estimator",
            "g",
            "t",
            "trials",
            "failures",
            "truth",
            "mean_estimate",
            "avg_bias",
            "median_bias",
            "rmse",
            "emp_sd",
            "mean_se",
            "coverage",
            "ci_length",
        ];
        out.write_record(header).map_err(csv_error)?;
        for r in &self.rows {
            let m = &r.metrics;
            out.write_record([
                r.estimand.to_string(),
                r.estimator.to_string(),
                opt(r.g),
                opt(r.t),
                r.trials.to_string(),
                r.failures.to_string(),
                r.truth.to_string(),
                m.mean_estimate.to_string(),
                m.avg_bias.to_string(),
                m.median_bias.to_string(),
                m.rmse.to_string(),
                m.emp_sd.to_string(),
                m.mean_se.to_string(),
                m.coverage.to_string(),
                m.ci_length.to_string(),
            ])
            .map_err(csv_error)?;
        }
        out.flush().map_err(|e| Error::Numerical(format!("cannot write report: {e}")))
    }

    /// Per-trial estimates; empty unless the run kept them.
    pub fn write_trials_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record([
            "trial",
            "seed",
            "estimand",
            "estimator",
            "g",
            "t",
            "truth",
            "estimate",
            "se",
            "ci_lo",
            "ci_hi",
            "error",
        ])
        .map_err(csv_error)?;
        for r in self.trial_records.iter().flatten() {
            out.write_record([
                r.trial.to_string(),
                r.seed.to_string(),
                r.estimand.to_string(),
                r.estimator.to_string(),
                opt(r.g),
                opt(r.t),
                r.truth.to_string(),
                opt(r.estimate),
                opt(r.se),
                opt(r.ci_lo),
                opt(r.ci_hi),
                r.error.clone().unwrap_or_default(),
            ])
            .map_err(csv_error)?;
        }
        out.flush().map_err(|e| Error::Numerical(format!("cannot write trial dump: {e}")))
    }
}

fn csv_error(e: csv::Error) -> Error {
    Error::Numerical(format!("cannot write csv: {e}"))
}
