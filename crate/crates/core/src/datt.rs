//! Difference in ATTs between subgroups: the unadjusted triple difference,
//! three-way fixed effects, and covariate-adjusted RA/IPW/DR contrasts of two
//! group-time ATTs.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use serde::Serialize;

use crate::cdatt::Trimmed;
use crate::dataset::{
    build_cells, design_covariates, prepare_problem, Cell, Comparison, DesignSpec, Estimand, Estimator, PanelDataset,
    Problem,
};
use crate::error::{Error, Result};
use crate::inference::standard_error_ci;
use crate::working_models::{
    fit_cell, fit_propensity, predict_rows, solve_least_squares, LogitDiagnostics, OutcomeModel, OutcomeTarget,
    PropensityModel, N_CATEGORIES,
};

/// Signs of the four cells in every triple difference.
pub(crate) const CELL_SIGN: [f64; 4] = [1.0, -1.0, -1.0, 1.0];

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Diagnostics {
    pub cell_counts: [usize; 4],
    pub propensity: Option<LogitDiagnostics>,
    pub outcome_models: Vec<OutcomeModel>,
    /// Fits used only by the influence function, never by the point estimate.
    pub inference_models: Vec<OutcomeModel>,
    pub trimmed: Vec<String>,
    pub max_weight: Option<f64>,
    pub degenerate_ci: bool,
    pub notes: Vec<String>,
}

/// One estimand value with inference and provenance.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EffectEstimate {
    pub estimand: Estimand,
    pub estimator: Estimator,
    pub comparison: Comparison,
    pub g: i64,
    pub t: i64,
    pub s: String,
    pub sprime: String,
    pub estimate: f64,
    pub se: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub level: f64,
    pub n: usize,
    /// Per-observation influence values; `se = sqrt(mean(influence^2) / n)`.
    pub influence: Vec<f64>,
    pub ids: Vec<String>,
    pub diagnostics: Diagnostics,
}

pub(crate) struct Provenance<'a> {
    pub estimand: Estimand,
    pub estimator: Estimator,
    pub comparison: Comparison,
    pub g: i64,
    pub t: i64,
    pub spec: &'a DesignSpec,
}

impl EffectEstimate {
    pub(crate) fn assemble(
        p: Provenance<'_>,
        estimate: f64,
        influence: Vec<f64>,
        ids: Vec<String>,
        mut diagnostics: Diagnostics,
    ) -> Result<Self> {
        if !estimate.is_finite() || influence.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!(
                "non-finite estimate or influence values ({} {}, g={}, t={})",
                p.estimand, p.estimator, p.g, p.t
            )));
        }
        let (se, (ci_lo, ci_hi)) = standard_error_ci(&influence, estimate, p.spec.level)?;
        diagnostics.degenerate_ci = se == 0.0;
        Ok(EffectEstimate {
            estimand: p.estimand,
            estimator: p.estimator,
            comparison: p.comparison,
            g: p.g,
            t: p.t,
            s: p.spec.s.clone(),
            sprime: p.spec.sprime.clone(),
            estimate,
            se,
            ci_lo,
            ci_hi,
            level: p.spec.level,
            n: influence.len(),
            influence,
            ids,
            diagnostics,
        })
    }
}

pub(crate) fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Self-normalized weights: `raw / mean(raw)`.
pub(crate) fn hajek(raw: &[f64]) -> Result<Vec<f64>> {
    let m = mean(raw);
    if !(m > 0.0 && m.is_finite()) {
        return Err(Error::Degenerate("weight normalizer is zero".into()));
    }
    Ok(raw.iter().map(|r| r / m).collect())
}

pub(crate) fn indicator(cells: &[Cell], which: Cell) -> Vec<f64> {
    cells.iter().map(|c| (*c == which) as u8 as f64).collect()
}

/// Units whose probabilities in `columns` fall below `eps`.
pub(crate) fn trim_violations(probs: &[[f64; N_CATEGORIES]], columns: &[usize], eps: f64) -> Vec<usize> {
    (0..probs.len()).filter(|&i| columns.iter().any(|&c| probs[i][c] < eps)).collect()
}

/// Runs `core` and, when drop-and-warn is on, retries once without offending units.
pub(crate) fn with_trimming<T>(
    problem: Problem,
    spec: &DesignSpec,
    mut core: impl FnMut(&Problem) -> Result<std::result::Result<T, Vec<usize>>>,
) -> Result<(T, Problem, Vec<String>)> {
    match core(&problem)? {
        Ok(v) => Ok((v, problem, Vec::new())),
        Err(bad) => {
            let ids: Vec<String> = bad.iter().map(|&i| problem.ids[i].clone()).collect();
            if !spec.trim_drop {
                return Err(Error::Trim {
                    count: bad.len(),
                    eps: spec.trim,
                    units: ids.into_iter().take(10).collect(),
                });
            }
            let mut keep = vec![true; problem.n()];
            for &i in &bad {
                keep[i] = false;
            }
            let reduced = problem.restrict(&keep)?;
            match core(&reduced)? {
                Ok(v) => Ok((v, reduced, ids)),
                Err(again) => Err(Error::Trim {
                    count: again.len(),
                    eps: spec.trim,
                    units: again.iter().take(10).map(|&i| reduced.ids[i].clone()).collect(),
                }),
            }
        }
    }
}

fn datt_spec_check(spec: &DesignSpec) -> Result<()> {
    spec.validate()
}

/// Cell-means triple difference of `Y_t - Y_{g-1}`.
pub fn estimate_datt_unadjusted(data: &PanelDataset, g: i64, t: i64, spec: &DesignSpec) -> Result<EffectEstimate> {
    datt_spec_check(spec)?;
    let mut bare = spec.clone();
    bare.covariates = Some(Vec::new());
    bare.ps_covariates = None;
    bare.or_covariates = None;
    let p = prepare_problem(data, g, t, &bare)?;
    let (est, infl) = cell_means_contrast(&p.cells.cell, &p.dy);
    let diagnostics = Diagnostics { cell_counts: p.cells.counts, ..Default::default() };
    EffectEstimate::assemble(
        Provenance {
            estimand: Estimand::Datt,
            estimator: Estimator::Unadjusted,
            comparison: p.cells.comparison,
            g,
            t,
            spec,
        },
        est,
        infl,
        p.ids,
        diagnostics,
    )
}

/// Four-cell-means contrast and its influence values.
pub(crate) fn cell_means_contrast(cells: &[Cell], y: &[f64]) -> (f64, Vec<f64>) {
    let n = y.len() as f64;
    let mut sum = [0.0; 4];
    let mut cnt = [0usize; 4];
    for (c, v) in cells.iter().zip(y) {
        sum[c.index()] += v;
        cnt[c.index()] += 1;
    }
    let m: [f64; 4] = std::array::from_fn(|k| sum[k] / cnt[k] as f64);
    let est = (m[0] - m[1]) - (m[2] - m[3]);
    let infl = cells
        .iter()
        .zip(y)
        .map(|(c, v)| {
            let k = c.index();
            CELL_SIGN[k] * n / cnt[k] as f64 * (v - m[k])
        })
        .collect();
    (est, infl)
}

/// Triple-interaction coefficient of a stacked two-period regression with HC1 errors.
pub fn estimate_datt_3wfe(data: &PanelDataset, g: i64, t: i64, spec: &DesignSpec) -> Result<EffectEstimate> {
    datt_spec_check(spec)?;
    let cells = build_cells(data, g, t, spec)?;
    let (_, (cov_idx, cov_names)) = design_covariates(spec, &data.covariate_names)?;
    let jt = data.time_index(t).expect("checked by build_cells");
    let jb = data.time_index(g - 1).expect("checked by build_cells");
    let k = cov_idx.len();
    let q = k + 8;
    let nobs = 2 * cells.n();
    let mut x = DMatrix::<f64>::zeros(nobs, q);
    let mut y = Vec::with_capacity(nobs);
    let mut ids = Vec::with_capacity(nobs);
    let mut r = 0;
    for (&ui, &c) in cells.included.iter().zip(&cells.cell) {
        let u = &data.units[ui];
        let treated = c.is_treated() as u8 as f64;
        let sub = c.is_s() as u8 as f64;
        for (post, j, time) in [(0.0, jb, g - 1), (1.0, jt, t)] {
            x[(r, 0)] = 1.0;
            for (a, &ci) in cov_idx.iter().enumerate() {
                x[(r, 1 + a)] = u.x[ci];
            }
            let regs = [post, treated, sub, post * treated, post * sub, treated * sub, post * treated * sub];
            for (a, v) in regs.iter().enumerate() {
                x[(r, 1 + k + a)] = *v;
            }
            y.push(u.y[j]);
            ids.push(format!("{}@{}", u.unit_id, time));
            r += 1;
        }
    }
    if nobs <= q {
        return Err(Error::Degenerate(format!("3WFE has {nobs} observations for {q} regressors")));
    }
    let mut names = vec!["intercept".to_string()];
    names.extend(cov_names);
    names.extend(
        ["post", "treated", "sub", "post:treated", "post:sub", "treated:sub", "post:treated:sub"]
            .iter()
            .map(|s| s.to_string()),
    );
    let sol = solve_least_squares(&x, &y, None, &names)?;
    let fitted = &x * &sol.beta;
    let last = q - 1;
    let row = sol.gram_inv.row(last).clone_owned();
    let hc1 = (nobs as f64 / (nobs - q) as f64).sqrt();
    let infl: Vec<f64> = (0..nobs)
        .map(|i| {
            let e = y[i] - fitted[i];
            let a: f64 = (0..q).map(|j| row[j] * x[(i, j)]).sum();
            hc1 * nobs as f64 * a * e
        })
        .collect();
    let diagnostics = Diagnostics {
        cell_counts: cells.counts,
        notes: vec!["influence values are per (unit, period) observation; SE is HC1".into()],
        ..Default::default()
    };
    EffectEstimate::assemble(
        Provenance {
            estimand: Estimand::Datt,
            estimator: Estimator::ThreeWfe,
            comparison: cells.comparison,
            g,
            t,
            spec,
        },
        sol.beta[last],
        infl,
        ids,
        diagnostics,
    )
}

struct SubgroupAtt {
    att: f64,
    influence: Vec<f64>,
    model: Option<OutcomeModel>,
    max_weight: f64,
}

/// Group-time ATT within one subgroup: `treated` cell against `comparison` cell.
fn subgroup_att(
    p: &Problem,
    probs: Option<&[[f64; N_CATEGORIES]]>,
    treated: Cell,
    comparison: Cell,
    method: Estimator,
) -> Result<SubgroupAtt> {
    let n = p.n();
    let d = indicator(&p.cells.cell, treated);
    let c = indicator(&p.cells.cell, comparison);
    let w_t = hajek(&d)?;
    let w_c = match probs {
        Some(pr) => {
            let raw: Vec<f64> = (0..n).map(|i| c[i] * pr[i][treated.index()] / pr[i][comparison.index()]).collect();
            hajek(&raw)?
        }
        None => hajek(&c)?,
    };
    let max_weight = w_t.iter().chain(w_c.iter()).cloned().fold(0.0, f64::max);
    let target = OutcomeTarget::Change { from: p.cells.g - 1, to: p.cells.t };
    let (m, fit) = if method == Estimator::Ipw {
        (vec![0.0; n], None)
    } else {
        let rows = p.cells.positions(comparison);
        let fit = fit_cell(&p.x_or, &p.dy, &rows, &p.or_names, comparison, target)?;
        let m = crate::working_models::predict_outcome_rows(&fit.model, &p.x_or)?;
        (m, Some(fit))
    };
    let resid: Vec<f64> = (0..n).map(|i| p.dy[i] - m[i]).collect();
    let a = mean(&w_t.iter().zip(&resid).map(|(w, r)| w * r).collect::<Vec<_>>());
    let (att, influence) = match method {
        Estimator::Ra => {
            let fit = fit.as_ref().expect("RA fits an outcome model");
            let k1 = p.x_or.ncols() + 1;
            let tr = p.cells.positions(treated);
            let mut xbar = vec![0.0; k1];
            for &i in &tr {
                xbar[0] += 1.0;
                for (j, v) in xbar.iter_mut().enumerate().skip(1) {
                    *v += p.x_or[(i, j - 1)];
                }
            }
            xbar.iter_mut().for_each(|v| *v /= tr.len() as f64);
            let h: Vec<f64> = (0..k1).map(|l| (0..k1).map(|j| xbar[j] * fit.gram_inv[(j, l)]).sum()).collect();
            let mut infl: Vec<f64> = (0..n).map(|i| w_t[i] * (resid[i] - a)).collect();
            for &i in &fit.rows {
                let hx = h[0] + (1..k1).map(|j| h[j] * p.x_or[(i, j - 1)]).sum::<f64>();
                infl[i] -= n as f64 * hx * resid[i];
            }
            (a, infl)
        }
        Estimator::Ipw | Estimator::Dr => {
            let b = mean(&w_c.iter().zip(&resid).map(|(w, r)| w * r).collect::<Vec<_>>());
            let infl = (0..n).map(|i| w_t[i] * (resid[i] - a) - w_c[i] * (resid[i] - b)).collect();
            (a - b, infl)
        }
        other => return Err(Error::Usage(format!("estimator {other} is not a covariate-adjusted method"))),
    };
    Ok(SubgroupAtt { att, influence, model: fit.map(|f| f.model), max_weight })
}

/// DATT as the difference of two subgroup group-time ATTs (RA, IPW or DR).
pub fn estimate_datt_adjusted(
    data: &PanelDataset,
    g: i64,
    t: i64,
    spec: &DesignSpec,
    method: Estimator,
) -> Result<EffectEstimate> {
    datt_spec_check(spec)?;
    if !matches!(method, Estimator::Ra | Estimator::Ipw | Estimator::Dr) {
        return Err(Error::Usage(format!("estimate_datt_adjusted takes ra, ipw or dr, not {method}")));
    }
    let problem = prepare_problem(data, g, t, spec)?;
    estimate_datt_adjusted_problem(problem, spec, method)
}

type PsFit = (Option<PropensityModel>, Option<Vec<[f64; 4]>>);

pub(crate) fn estimate_datt_adjusted_problem(
    problem: Problem,
    spec: &DesignSpec,
    method: Estimator,
) -> Result<EffectEstimate> {
    let needs_ps = method != Estimator::Ra;
    let core = |p: &Problem| -> Result<Trimmed<PsFit>> {
        if !needs_ps {
            return Ok(Ok((None, None)));
        }
        let pm = fit_propensity(&p.x_ps, &p.cells.labels())?;
        let probs = predict_rows(&pm, &p.x_ps)?;
        let bad = trim_violations(&probs, &[Cell::ComparisonS.index(), Cell::ComparisonSprime.index()], spec.trim);
        if bad.is_empty() {
            Ok(Ok((Some(pm), Some(probs))))
        } else {
            Ok(Err(bad))
        }
    };
    let ((pm, probs), p, trimmed) = with_trimming(problem, spec, core)?;
    let a = subgroup_att(&p, probs.as_deref(), Cell::TreatedS, Cell::ComparisonS, method)?;
    let b = subgroup_att(&p, probs.as_deref(), Cell::TreatedSprime, Cell::ComparisonSprime, method)?;
    let infl: Vec<f64> = a.influence.iter().zip(&b.influence).map(|(x, y)| x - y).collect();
    let mut notes = Vec::new();
    if method == Estimator::Ipw {
        notes.push("IPW influence values omit the propensity estimation effect".into());
    }
    if !trimmed.is_empty() {
        notes.push(format!("dropped {} units below trim threshold {}", trimmed.len(), spec.trim));
    }
    let diagnostics = Diagnostics {
        cell_counts: p.cells.counts,
        propensity: pm.map(|m| m.diagnostics),
        outcome_models: [a.model, b.model].into_iter().flatten().collect(),
        inference_models: Vec::new(),
        trimmed,
        max_weight: Some(a.max_weight.max(b.max_weight)),
        degenerate_ci: false,
        notes,
    };
    EffectEstimate::assemble(
        Provenance {
            estimand: Estimand::Datt,
            estimator: method,
            comparison: p.cells.comparison,
            g: p.cells.g,
            t: p.cells.t,
            spec,
        },
        a.att - b.att,
        infl,
        p.ids.clone(),
        diagnostics,
    )
}

/// Dispatches a DATT estimator by tag.
pub fn estimate_datt(
    data: &PanelDataset,
    g: i64,
    t: i64,
    spec: &DesignSpec,
    estimator: Estimator,
) -> Result<EffectEstimate> {
    match estimator {
        Estimator::Unadjusted => estimate_datt_unadjusted(data, g, t, spec),
        Estimator::ThreeWfe => estimate_datt_3wfe(data, g, t, spec),
        m => estimate_datt_adjusted(data, g, t, spec, m),
    }
}

/// Unadjusted DATT recomputed from per-cluster cell means.
///
/// Cluster means are combined with cluster-size weights, so the result
/// reproduces `estimate_datt_unadjusted` for any clustering of the units.
pub fn cluster_aggregated_datt(
    data: &PanelDataset,
    cluster: &[String],
    g: i64,
    t: i64,
    spec: &DesignSpec,
) -> Result<f64> {
    if cluster.len() != data.n_units() {
        return Err(Error::Arity { expected: data.n_units(), got: cluster.len() });
    }
    let mut bare = spec.clone();
    bare.covariates = Some(Vec::new());
    let p = prepare_problem(data, g, t, &bare)?;
    let mut agg: BTreeMap<(&str, usize), (f64, usize)> = BTreeMap::new();
    for ((&ui, c), dy) in p.cells.included.iter().zip(&p.cells.cell).zip(&p.dy) {
        let e = agg.entry((cluster[ui].as_str(), c.index())).or_insert((0.0, 0));
        e.0 += dy;
        e.1 += 1;
    }
    let mut num = [0.0; 4];
    let mut den = [0.0; 4];
    for ((_, k), (s, c)) in &agg {
        num[*k] += *c as f64 * (s / *c as f64);
        den[*k] += *c as f64;
    }
    let m: [f64; 4] = std::array::from_fn(|k| num[k] / den[k]);
    Ok((m[0] - m[1]) - (m[2] - m[3]))
}
