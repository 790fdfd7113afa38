//! Causal DATT: panel IPW, RA and DR estimators, the repeated cross-section
//! DR estimator, ATT recovery under an unaffected subgroup, and the lower
//! bound under monotone treatment-effect selection.

use nalgebra::DMatrix;
use serde::Serialize;

use crate::dataset::{
    build_cells, design_covariates, prepare_problem, Cell, CellIndicators, Comparison, DesignSpec, Estimand, Estimator,
    PanelDataset, Problem, RepeatedCrossSection,
};
use crate::datt::{
    hajek, indicator, mean, trim_violations, with_trimming, Diagnostics, EffectEstimate, Provenance, CELL_SIGN,
};
use crate::error::{Error, Result};
use crate::inference::{influence_values, standard_error_ci, z_one_sided};
use crate::working_models::{
    fit_cell, fit_propensity, predict_outcome_rows, predict_rows, CellFit, OutcomeTarget, PropensityModel, N_CATEGORIES,
};

/// Propensity columns that appear in a weight denominator.
const DENOMINATORS: [usize; 3] = [1, 2, 3];

/// Self-normalized CDATT weights, one vector per cell.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CdattWeights {
    pub w: [Vec<f64>; 4],
    /// `E_n[G_g S_s]` and the sample means of the raw w2, w3, w4.
    pub normalizers: [f64; 4],
    pub comparison: Comparison,
    pub max_weight: f64,
}

fn weights_from_probs(cells: &CellIndicators, probs: &[[f64; N_CATEGORIES]]) -> Result<CdattWeights> {
    let n = cells.n();
    let mut w: [Vec<f64>; 4] = Default::default();
    let mut normalizers = [0.0; 4];
    for c in Cell::ALL {
        let ind = indicator(&cells.cell, c);
        let raw: Vec<f64> = if c == Cell::TreatedS {
            ind
        } else {
            (0..n).map(|i| ind[i] * probs[i][0] / probs[i][c.index()]).collect()
        };
        normalizers[c.index()] = mean(&raw);
        w[c.index()] = hajek(&raw)?;
    }
    let max_weight = w.iter().flatten().cloned().fold(0.0, f64::max);
    Ok(CdattWeights { w, normalizers, comparison: cells.comparison, max_weight })
}

/// Weights `w1..w4` from a fitted propensity model; fails on overlap violations.
pub fn compute_cdatt_weights(
    cells: &CellIndicators,
    pm: &PropensityModel,
    x: &DMatrix<f64>,
    eps: f64,
) -> Result<CdattWeights> {
    if x.nrows() != cells.n() {
        return Err(Error::Arity { expected: cells.n(), got: x.nrows() });
    }
    let probs = predict_rows(pm, x)?;
    let bad = trim_violations(&probs, &DENOMINATORS, eps);
    if !bad.is_empty() {
        return Err(Error::Trim {
            count: bad.len(),
            eps,
            units: bad.iter().take(10).map(|&i| format!("row {}", cells.included[i])).collect(),
        });
    }
    weights_from_probs(cells, &probs)
}

/// Outcome-model predictions on every included unit.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct CdattFits {
    /// Fit on `G_g x S_s'`.
    pub m_g: Option<Vec<f64>>,
    /// Fit on `C_c x S_s'`.
    pub m_c: Option<Vec<f64>>,
    /// Fit on `G_g x S_s`, used only for inference.
    pub mu_g_s: Option<Vec<f64>>,
    /// Fit on `C_c x S_s`, used only for inference.
    pub mu_c_s: Option<Vec<f64>>,
}

fn fit_on(p: &Problem, cell: Cell) -> Result<(CellFit, Vec<f64>)> {
    let target = OutcomeTarget::Change { from: p.cells.g - 1, to: p.cells.t };
    let fit = fit_cell(&p.x_or, &p.dy, &p.cells.positions(cell), &p.or_names, cell, target)?;
    let pred = predict_outcome_rows(&fit.model, &p.x_or)?;
    Ok((fit, pred))
}

/// `n * xbar_target' (X'X)^{-1} x_i e_i` on the fitting rows: the effect of
/// estimating a regression whose predictions are averaged over `target`.
fn regression_effect(p: &Problem, fit: &CellFit, target: Cell, pred: &[f64]) -> Vec<f64> {
    let n = p.n();
    let k1 = p.x_or.ncols() + 1;
    let rows = p.cells.positions(target);
    let mut xbar = vec![0.0; k1];
    for &i in &rows {
        xbar[0] += 1.0;
        for (j, v) in xbar.iter_mut().enumerate().skip(1) {
            *v += p.x_or[(i, j - 1)];
        }
    }
    xbar.iter_mut().for_each(|v| *v /= rows.len() as f64);
    let h: Vec<f64> = (0..k1).map(|l| (0..k1).map(|j| xbar[j] * fit.gram_inv[(j, l)]).sum()).collect();
    let mut out = vec![0.0; n];
    for &i in &fit.rows {
        let hx = h[0] + (1..k1).map(|j| h[j] * p.x_or[(i, j - 1)]).sum::<f64>();
        out[i] = n as f64 * hx * (p.dy[i] - pred[i]);
    }
    out
}

/// Panel CDATT by IPW, RA or DR.
pub fn estimate_cdatt(
    data: &PanelDataset,
    g: i64,
    t: i64,
    spec: &DesignSpec,
    method: Estimator,
) -> Result<EffectEstimate> {
    spec.validate()?;
    if !matches!(method, Estimator::Ra | Estimator::Ipw | Estimator::Dr) {
        return Err(Error::Usage(format!("the CDATT is identified by ra, ipw or dr only; {method} targets the DATT")));
    }
    let problem = prepare_problem(data, g, t, spec)?;
    estimate_cdatt_problem(problem, spec, method)
}

/// Fitted output, or the rows that violate the trimming bound.
pub(crate) type Trimmed<T> = std::result::Result<T, Vec<usize>>;

pub(crate) fn estimate_cdatt_problem(problem: Problem, spec: &DesignSpec, method: Estimator) -> Result<EffectEstimate> {
    let needs_ps = method != Estimator::Ra;
    let core = |p: &Problem| -> Result<Trimmed<Option<(PropensityModel, CdattWeights)>>> {
        if !needs_ps {
            return Ok(Ok(None));
        }
        let pm = fit_propensity(&p.x_ps, &p.cells.labels())?;
        let probs = predict_rows(&pm, &p.x_ps)?;
        let bad = trim_violations(&probs, &DENOMINATORS, spec.trim);
        if !bad.is_empty() {
            return Ok(Err(bad));
        }
        let w = weights_from_probs(&p.cells, &probs)?;
        Ok(Ok(Some((pm, w))))
    };
    let (fitted, p, trimmed) = with_trimming(problem, spec, core)?;
    let n = p.n();
    let dy = &p.dy;
    let mut diagnostics = Diagnostics { cell_counts: p.cells.counts, trimmed, ..Default::default() };
    if !diagnostics.trimmed.is_empty() {
        diagnostics.notes.push(format!(
            "dropped {} units below trim threshold {}",
            diagnostics.trimmed.len(),
            spec.trim
        ));
    }
    diagnostics.notes.push("parallel gaps for the s' potential outcomes is assumed, not tested".into());

    let (estimate, infl) = match method {
        Estimator::Ipw => {
            let (pm, w) = fitted.expect("ipw fits a propensity model");
            let terms: [f64; 4] =
                std::array::from_fn(|k| mean(&w.w[k].iter().zip(dy).map(|(a, b)| a * b).collect::<Vec<_>>()));
            let est = (0..4).map(|k| CELL_SIGN[k] * terms[k]).sum();
            let infl = (0..n).map(|i| (0..4).map(|k| CELL_SIGN[k] * w.w[k][i] * (dy[i] - terms[k])).sum()).collect();
            diagnostics.propensity = Some(pm.diagnostics);
            diagnostics.max_weight = Some(w.max_weight);
            diagnostics.notes.push("IPW influence values omit the propensity estimation effect".into());
            (est, infl)
        }
        Estimator::Ra => {
            let (fg, mg) = fit_on(&p, Cell::TreatedSprime)?;
            let (fc, mc) = fit_on(&p, Cell::ComparisonSprime)?;
            let w1 = hajek(&indicator(&p.cells.cell, Cell::TreatedS))?;
            let wcs = hajek(&indicator(&p.cells.cell, Cell::ComparisonS))?;
            let a = mean(&(0..n).map(|i| w1[i] * (dy[i] - mg[i])).collect::<Vec<_>>());
            let c = mean(&(0..n).map(|i| wcs[i] * (dy[i] - mc[i])).collect::<Vec<_>>());
            let eg = regression_effect(&p, &fg, Cell::TreatedS, &mg);
            let ec = regression_effect(&p, &fc, Cell::ComparisonS, &mc);
            let infl =
                (0..n).map(|i| w1[i] * (dy[i] - mg[i] - a) - wcs[i] * (dy[i] - mc[i] - c) - eg[i] + ec[i]).collect();
            diagnostics.outcome_models = vec![fg.model, fc.model];
            diagnostics.max_weight = Some(w1.iter().chain(&wcs).cloned().fold(0.0, f64::max));
            (a - c, infl)
        }
        Estimator::Dr => {
            let (pm, w) = fitted.expect("dr fits a propensity model");
            let (fg, mg) = fit_on(&p, Cell::TreatedSprime)?;
            let (fc, mc) = fit_on(&p, Cell::ComparisonSprime)?;
            let (fgs, mgs) = fit_on(&p, Cell::TreatedS)?;
            let (fcs, mcs) = fit_on(&p, Cell::ComparisonS)?;
            let term = |k: usize, m: &[f64]| mean(&(0..n).map(|i| w.w[k][i] * (dy[i] - m[i])).collect::<Vec<_>>());
            let est = term(0, &mg) - term(1, &mg) - term(2, &mc) + term(3, &mc);
            let fits = CdattFits { m_g: Some(mg), m_c: Some(mc), mu_g_s: Some(mgs), mu_c_s: Some(mcs) };
            let parts = influence_values(&p, &w, &fits, est)?;
            diagnostics.propensity = Some(pm.diagnostics);
            diagnostics.max_weight = Some(w.max_weight);
            diagnostics.outcome_models = vec![fg.model, fc.model];
            diagnostics.inference_models = vec![fgs.model, fcs.model];
            (est, parts.total.values)
        }
        _ => unreachable!("method checked by caller"),
    };
    EffectEstimate::assemble(
        Provenance {
            estimand: Estimand::Cdatt,
            estimator: method,
            comparison: p.cells.comparison,
            g: p.cells.g,
            t: p.cells.t,
            spec,
        },
        estimate,
        infl,
        p.ids.clone(),
        diagnostics,
    )
}

// ---------------------------------------------------------------------------
// Repeated cross-sections
// ---------------------------------------------------------------------------

fn prepare_rc(data: &RepeatedCrossSection, g: i64, t: i64, spec: &DesignSpec) -> Result<Problem> {
    let cells = build_cells(data, g, t, spec)?;
    let ((ps_idx, ps_names), (or_idx, or_names)) = design_covariates(spec, &data.covariate_names)?;
    let obs: Vec<_> = cells.included.iter().map(|&i| &data.obs[i]).collect();
    Ok(Problem {
        ids: cells.included.iter().map(|i| format!("obs{i}")).collect(),
        dy: obs.iter().map(|o| o.y).collect(),
        x_ps: DMatrix::from_fn(obs.len(), ps_idx.len(), |i, j| obs[i].x[ps_idx[j]]),
        x_or: DMatrix::from_fn(obs.len(), or_idx.len(), |i, j| obs[i].x[or_idx[j]]),
        cells,
        ps_names,
        or_names,
    })
}

/// DR CDATT from repeated cross-sections: two regression blocks plus
/// period-specific weighted residual corrections for all four cells.
pub fn estimate_cdatt_rc(data: &RepeatedCrossSection, g: i64, t: i64, spec: &DesignSpec) -> Result<EffectEstimate> {
    spec.validate()?;
    let problem = prepare_rc(data, g, t, spec)?;
    let core = |p: &Problem| -> Result<Trimmed<(PropensityModel, Vec<[f64; 4]>)>> {
        let pm = fit_propensity(&p.x_ps, &p.cells.labels())?;
        let probs = predict_rows(&pm, &p.x_ps)?;
        let bad = trim_violations(&probs, &DENOMINATORS, spec.trim);
        Ok(if bad.is_empty() { Ok((pm, probs)) } else { Err(bad) })
    };
    let ((pm, probs), p, trimmed) = with_trimming(problem, spec, core)?;
    let n = p.n();
    let y = &p.dy;
    let post: Vec<bool> = p.cells.included.iter().map(|&i| data.obs[i].time == t).collect();
    let periods = [(false, g - 1), (true, t)];

    // m[cell][period] predicted on every included row
    let mut m: Vec<[Vec<f64>; 2]> = Vec::with_capacity(4);
    let mut models = Vec::with_capacity(8);
    for c in Cell::ALL {
        let mut per: [Vec<f64>; 2] = Default::default();
        for (k, &(is_post, time)) in periods.iter().enumerate() {
            let rows: Vec<usize> = (0..n).filter(|&i| p.cells.cell[i] == c && post[i] == is_post).collect();
            if rows.is_empty() {
                return Err(Error::Degenerate(format!("cell {} has no observations in period {time}", c.label())));
            }
            let fit = fit_cell(&p.x_or, y, &rows, &p.or_names, c, OutcomeTarget::Level { time })?;
            per[k] = predict_outcome_rows(&fit.model, &p.x_or)?;
            models.push(fit.model);
        }
        m.push(per);
    }
    let gap = |s: usize, sp: usize, i: usize| (m[s][1][i] - m[s][0][i]) - (m[sp][1][i] - m[sp][0][i]);
    let v1 = hajek(&indicator(&p.cells.cell, Cell::TreatedS))?;
    let v2 = hajek(&indicator(&p.cells.cell, Cell::ComparisonS))?;
    let h1: Vec<f64> = (0..n).map(|i| gap(0, 1, i)).collect();
    let h2: Vec<f64> = (0..n).map(|i| gap(2, 3, i)).collect();
    let ra1 = mean(&(0..n).map(|i| v1[i] * h1[i]).collect::<Vec<_>>());
    let ra2 = mean(&(0..n).map(|i| v2[i] * h2[i]).collect::<Vec<_>>());
    let mut estimate = ra1 - ra2;
    let mut infl: Vec<f64> = (0..n).map(|i| v1[i] * (h1[i] - ra1) - v2[i] * (h2[i] - ra2)).collect();
    let mut max_weight = v1.iter().chain(&v2).cloned().fold(0.0, f64::max);
    for c in Cell::ALL {
        let k = c.index();
        for (pi, &(is_post, _)) in periods.iter().enumerate() {
            let raw: Vec<f64> = (0..n)
                .map(|i| {
                    if p.cells.cell[i] == c && post[i] == is_post {
                        if k == 0 {
                            1.0
                        } else {
                            probs[i][0] / probs[i][k]
                        }
                    } else {
                        0.0
                    }
                })
                .collect();
            let w = hajek(&raw)?;
            max_weight = w.iter().cloned().fold(max_weight, f64::max);
            let r: Vec<f64> = (0..n).map(|i| y[i] - m[k][pi][i]).collect();
            let block = mean(&(0..n).map(|i| w[i] * r[i]).collect::<Vec<_>>());
            let sign = CELL_SIGN[k] * if is_post { 1.0 } else { -1.0 };
            estimate += sign * block;
            for i in 0..n {
                infl[i] += sign * w[i] * (r[i] - block);
            }
        }
    }
    let mut diagnostics = Diagnostics {
        cell_counts: p.cells.counts,
        propensity: Some(pm.diagnostics),
        outcome_models: models,
        trimmed,
        max_weight: Some(max_weight),
        notes: vec!["repeated cross-section: each observation is its own unit".into()],
        ..Default::default()
    };
    if !diagnostics.trimmed.is_empty() {
        diagnostics.notes.push(format!(
            "dropped {} observations below trim threshold {}",
            diagnostics.trimmed.len(),
            spec.trim
        ));
    }
    EffectEstimate::assemble(
        Provenance { estimand: Estimand::Cdatt, estimator: Estimator::Dr, comparison: p.cells.comparison, g, t, spec },
        estimate,
        infl,
        p.ids.clone(),
        diagnostics,
    )
}

// ---------------------------------------------------------------------------
// Interpretation layers
// ---------------------------------------------------------------------------

fn relabel(mut e: EffectEstimate, estimand: Estimand, scale: f64, note: String) -> Result<EffectEstimate> {
    e.estimand = estimand;
    e.estimate *= scale;
    e.influence.iter_mut().for_each(|v| *v *= scale);
    let (se, (lo, hi)) = standard_error_ci(&e.influence, e.estimate, e.level)?;
    e.se = se;
    e.ci_lo = lo;
    e.ci_hi = hi;
    e.diagnostics.degenerate_ci = se == 0.0;
    e.diagnostics.notes.push(note);
    Ok(e)
}

/// ATT of subgroup `s` and the population ATT when `s'` is unaffected.
///
/// `shares` are the population shares of (s, s') among the treated.
pub fn recover_att_unaffected(datt: &EffectEstimate, shares: (f64, f64)) -> Result<(EffectEstimate, EffectEstimate)> {
    if datt.estimand != Estimand::Datt {
        return Err(Error::Usage(format!("ATT recovery needs a DATT estimate, got {}", datt.estimand)));
    }
    let (a, b) = shares;
    if !(a > 0.0 && b > 0.0 && (a + b - 1.0).abs() < 1e-9) {
        return Err(Error::Usage(format!("subgroup shares ({a}, {b}) must be positive and sum to 1")));
    }
    let att_s = relabel(
        datt.clone(),
        Estimand::AttUnaffected,
        1.0,
        format!("ATT for subgroup {} assuming {} is unaffected", datt.s, datt.sprime),
    )?;
    let att_pop = relabel(
        datt.clone(),
        Estimand::AttPopulation,
        a,
        format!("population ATT with share {a} in subgroup {}", datt.s),
    )?;
    Ok((att_s, att_pop))
}

/// One-sided lower bound `[DATT - z_level SE, inf)` for the CDATT.
pub fn mts_lower_bound(datt: &EffectEstimate) -> Result<EffectEstimate> {
    if datt.estimand != Estimand::Datt {
        return Err(Error::Usage(format!("the monotone-selection bound needs a DATT estimate, got {}", datt.estimand)));
    }
    let mut b = datt.clone();
    b.estimand = Estimand::Bound;
    b.ci_lo = b.estimate - z_one_sided(b.level) * b.se;
    b.ci_hi = f64::INFINITY;
    b.diagnostics.notes.push("lower bound for the CDATT under monotone treatment-effect selection".into());
    Ok(b)
}
