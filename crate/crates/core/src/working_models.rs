//! Nuisance models: a four-category multinomial logit over the
//! treatment-by-subgroup cells and (weighted) least-squares outcome regressions.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::dataset::Cell;
use crate::error::{Error, Result};

pub const N_CATEGORIES: usize = 4;
const N_FREE: usize = N_CATEGORIES - 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LogitSettings {
    pub tol: f64,
    pub max_iter: usize,
    pub ridge: f64,
}

impl Default for LogitSettings {
    fn default() -> Self {
        LogitSettings { tol: 1e-8, max_iter: 100, ridge: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LogitDiagnostics {
    pub iterations: usize,
    /// Max-norm of the penalized score divided by n, in standardized coordinates.
    pub grad_norm: f64,
    pub converged: bool,
    /// Penalized log-likelihood after each accepted step (first entry at the start).
    pub loglik_trace: Vec<f64>,
    pub min_probability: f64,
    pub separation_warning: bool,
}

/// Multinomial logit with base category `ComparisonSprime`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PropensityModel {
    /// Rows: `TreatedS`, `TreatedSprime`, `ComparisonS`; columns: intercept then covariates.
    pub theta: DMatrix<f64>,
    pub diagnostics: LogitDiagnostics,
}

impl PropensityModel {
    pub fn n_covariates(&self) -> usize {
        self.theta.ncols() - 1
    }

    pub fn from_theta(theta: DMatrix<f64>) -> Result<Self> {
        if theta.nrows() != N_FREE || theta.ncols() == 0 {
            return Err(Error::InvalidData(format!(
                "theta must be {N_FREE} x (k+1), got {} x {}",
                theta.nrows(),
                theta.ncols()
            )));
        }
        Ok(PropensityModel {
            theta,
            diagnostics: LogitDiagnostics {
                iterations: 0,
                grad_norm: 0.0,
                converged: true,
                loglik_trace: Vec::new(),
                min_probability: f64::NAN,
                separation_warning: false,
            },
        })
    }
}

fn softmax_with_base(idx: &[f64; N_FREE]) -> [f64; N_CATEGORIES] {
    let m = idx.iter().fold(0.0f64, |a, &b| a.max(b));
    let mut e = [0.0; N_CATEGORIES];
    for a in 0..N_FREE {
        e[a] = (idx[a] - m).exp();
    }
    e[N_FREE] = (-m).exp();
    let s: f64 = e.iter().sum();
    e.map(|v| v / s)
}

fn log_normalizer(idx: &[f64; N_FREE]) -> f64 {
    let m = idx.iter().fold(0.0f64, |a, &b| a.max(b));
    let s: f64 = idx.iter().map(|v| (v - m).exp()).sum::<f64>() + (-m).exp();
    m + s.ln()
}

/// Standardized copy of a design with an intercept in column 0.
struct Standardized {
    z: DMatrix<f64>,
    mean: Vec<f64>,
    sd: Vec<f64>,
}

fn standardize(x: &DMatrix<f64>) -> Result<Standardized> {
    let (n, q) = x.shape();
    if (0..n).any(|i| x[(i, 0)] != 1.0) {
        return Err(Error::InvalidData("design matrix column 0 must be the intercept".into()));
    }
    let mut z = x.clone();
    let mut mean = vec![0.0; q];
    let mut sd = vec![1.0; q];
    for j in 1..q {
        let col = x.column(j);
        let m = col.mean();
        let v = col.iter().map(|c| (c - m) * (c - m)).sum::<f64>() / n as f64;
        let s = v.sqrt();
        mean[j] = m;
        if s > 1e-12 * (1.0 + m.abs()) {
            sd[j] = s;
            for i in 0..n {
                z[(i, j)] = (x[(i, j)] - m) / s;
            }
        } else {
            for i in 0..n {
                z[(i, j)] = 0.0;
            }
        }
    }
    Ok(Standardized { z, mean, sd })
}

fn penalized_loglik(z: &DMatrix<f64>, labels: &[usize], th: &DMatrix<f64>, ridge: f64) -> f64 {
    let eta = z * th.transpose();
    let mut ll = 0.0;
    for i in 0..z.nrows() {
        let idx = [eta[(i, 0)], eta[(i, 1)], eta[(i, 2)]];
        let own = if labels[i] < N_FREE { idx[labels[i]] } else { 0.0 };
        ll += own - log_normalizer(&idx);
    }
    ll - 0.5 * ridge * th.iter().map(|v| v * v).sum::<f64>()
}

/// Fits the multinomial logit by Newton-Raphson with step-halving.
///
/// `x` is n x (k+1) with the intercept in column 0; `labels` are cell indices.
pub fn fit_multinomial_logit(x: &DMatrix<f64>, labels: &[usize], settings: &LogitSettings) -> Result<PropensityModel> {
    let (n, q) = x.shape();
    if labels.len() != n {
        return Err(Error::Arity { expected: n, got: labels.len() });
    }
    if n < N_CATEGORIES {
        return Err(Error::Degenerate(format!("multinomial logit needs at least {N_CATEGORIES} rows, got {n}")));
    }
    let mut counts = [0usize; N_CATEGORIES];
    for &l in labels {
        if l >= N_CATEGORIES {
            return Err(Error::InvalidData(format!("label {l} outside 0..{N_CATEGORIES}")));
        }
        counts[l] += 1;
    }
    if let Some(c) = (0..N_CATEGORIES).find(|&c| counts[c] == 0) {
        return Err(Error::Degenerate(format!(
            "propensity category {} has no observations",
            Cell::from_index(c).label()
        )));
    }
    let st = standardize(x)?;
    let z = &st.z;
    let dim = N_FREE * q;
    let mut th = DMatrix::<f64>::zeros(N_FREE, q);
    let mut ll = penalized_loglik(z, labels, &th, settings.ridge);
    let mut trace = vec![ll];
    let mut grad_norm: f64;
    let mut iterations = 0;
    let mut converged = false;

    loop {
        let eta = z * th.transpose();
        let mut grad = DVector::<f64>::zeros(dim);
        let mut hess = DMatrix::<f64>::zeros(dim, dim);
        for i in 0..n {
            let p = softmax_with_base(&[eta[(i, 0)], eta[(i, 1)], eta[(i, 2)]]);
            let zi = z.row(i);
            for a in 0..N_FREE {
                let r = (labels[i] == a) as u8 as f64 - p[a];
                for j in 0..q {
                    grad[a * q + j] += r * zi[j];
                }
                for b in a..N_FREE {
                    let w = p[a] * ((a == b) as u8 as f64 - p[b]);
                    for j in 0..q {
                        let wz = w * zi[j];
                        for l in 0..q {
                            hess[(a * q + j, b * q + l)] += wz * zi[l];
                        }
                    }
                }
            }
        }
        for a in 0..N_FREE {
            for b in (a + 1)..N_FREE {
                for j in 0..q {
                    for l in 0..q {
                        hess[(b * q + l, a * q + j)] = hess[(a * q + j, b * q + l)];
                    }
                }
            }
        }
        for a in 0..N_FREE {
            for j in 0..q {
                grad[a * q + j] -= settings.ridge * th[(a, j)];
                hess[(a * q + j, a * q + j)] += settings.ridge;
            }
        }
        grad_norm = grad.amax() / n as f64;
        if grad_norm < settings.tol {
            converged = true;
            break;
        }
        if iterations >= settings.max_iter {
            break;
        }
        iterations += 1;
        let step = match hess.clone().cholesky() {
            Some(ch) => ch.solve(&grad),
            None => {
                return Err(Error::Numerical("multinomial logit Hessian is not positive definite".into()));
            }
        };
        let step = DMatrix::from_row_slice(N_FREE, q, step.as_slice());
        let mut scale = 1.0;
        let mut accepted = false;
        for _ in 0..50 {
            let cand = &th + &step * scale;
            let cand_ll = penalized_loglik(z, labels, &cand, settings.ridge);
            if cand_ll.is_finite() && cand_ll >= ll - 1e-12 * (1.0 + ll.abs()) {
                th = cand;
                ll = cand_ll;
                accepted = true;
                break;
            }
            scale *= 0.5;
        }
        if !accepted {
            break;
        }
        trace.push(ll);
    }
    if !converged {
        return Err(Error::NonConvergence { grad_norm, iterations });
    }

    let mut theta = DMatrix::<f64>::zeros(N_FREE, q);
    for a in 0..N_FREE {
        let mut intercept = th[(a, 0)];
        for j in 1..q {
            theta[(a, j)] = th[(a, j)] / st.sd[j];
            intercept -= th[(a, j)] * st.mean[j] / st.sd[j];
        }
        theta[(a, 0)] = intercept;
    }
    let eta = z * th.transpose();
    let min_probability = (0..n)
        .map(|i| {
            let p = softmax_with_base(&[eta[(i, 0)], eta[(i, 1)], eta[(i, 2)]]);
            p.iter().cloned().fold(f64::INFINITY, f64::min)
        })
        .fold(f64::INFINITY, f64::min);
    Ok(PropensityModel {
        theta,
        diagnostics: LogitDiagnostics {
            iterations,
            grad_norm,
            converged,
            loglik_trace: trace,
            min_probability,
            separation_warning: min_probability < 1e-12,
        },
    })
}

/// Prepends an intercept column.
pub fn with_intercept(x: &DMatrix<f64>) -> DMatrix<f64> {
    let (n, k) = x.shape();
    DMatrix::from_fn(n, k + 1, |i, j| if j == 0 { 1.0 } else { x[(i, j - 1)] })
}

/// Fits the propensity model on a covariate matrix without intercept.
pub fn fit_propensity(x: &DMatrix<f64>, labels: &[usize]) -> Result<PropensityModel> {
    fit_multinomial_logit(&with_intercept(x), labels, &LogitSettings::default())
}

/// Cell probabilities (pi_gs, pi_gs', pi_cs, pi_cs') for one covariate vector.
pub fn predict_cell_probabilities(model: &PropensityModel, x: &[f64]) -> Result<[f64; N_CATEGORIES]> {
    let k = model.n_covariates();
    if x.len() != k {
        return Err(Error::Arity { expected: k, got: x.len() });
    }
    let mut idx = [0.0; N_FREE];
    for (a, v) in idx.iter_mut().enumerate() {
        *v = model.theta[(a, 0)] + (0..k).map(|j| model.theta[(a, j + 1)] * x[j]).sum::<f64>();
    }
    Ok(softmax_with_base(&idx))
}

/// Probabilities for every row of a covariate matrix (no intercept).
pub fn predict_rows(model: &PropensityModel, x: &DMatrix<f64>) -> Result<Vec<[f64; N_CATEGORIES]>> {
    let row = |i: usize| x.row(i).iter().cloned().collect::<Vec<f64>>();
    (0..x.nrows()).map(|i| predict_cell_probabilities(model, &row(i))).collect()
}

// ---------------------------------------------------------------------------
// Least squares
// ---------------------------------------------------------------------------

/// What an outcome regression was fitted to.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum OutcomeTarget {
    /// Panel change `Y_t - Y_from`.
    Change {
        from: i64,
        to: i64,
    },
    /// Repeated cross-section level `Y` in one period.
    Level {
        time: i64,
    },
    Unspecified,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OutcomeModel {
    /// Intercept first.
    pub beta: Vec<f64>,
    pub cell: Option<Cell>,
    pub target: OutcomeTarget,
    pub residual_variance: f64,
    pub rank: usize,
    pub ridge_used: bool,
}

impl OutcomeModel {
    pub fn n_covariates(&self) -> usize {
        self.beta.len() - 1
    }
}

/// Solution of a least-squares problem with the inverse Gram matrix.
pub(crate) struct LsSolution {
    pub beta: DVector<f64>,
    pub gram_inv: DMatrix<f64>,
    pub rank: usize,
    pub ridge_used: bool,
}

const RANK_TOL: f64 = 1e-12;
const LS_RIDGE: f64 = 1e-10;

fn rank_of(gram: &DMatrix<f64>) -> usize {
    if gram.nrows() == 0 {
        return 0;
    }
    let eig = gram.clone().symmetric_eigen();
    let max = eig.eigenvalues.iter().cloned().fold(0.0f64, f64::max);
    eig.eigenvalues.iter().filter(|&&v| v > RANK_TOL * max.max(f64::MIN_POSITIVE)).count()
}

/// Weighted least squares via column-equilibrated normal equations.
pub(crate) fn solve_least_squares(
    x: &DMatrix<f64>,
    y: &[f64],
    weights: Option<&[f64]>,
    names: &[String],
) -> Result<LsSolution> {
    let (n, q) = x.shape();
    if y.len() != n {
        return Err(Error::Arity { expected: n, got: y.len() });
    }
    if let Some(w) = weights {
        if w.len() != n {
            return Err(Error::Arity { expected: n, got: w.len() });
        }
        if w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::InvalidData("least-squares weights must be finite and nonnegative".into()));
        }
    }
    if n < q {
        return Err(Error::Degenerate(format!("least squares with {n} rows and {q} columns")));
    }
    let w = |i: usize| weights.map_or(1.0, |w| w[i]);
    let mut scale = vec![1.0; q];
    for (j, s) in scale.iter_mut().enumerate() {
        let ss: f64 = (0..n).map(|i| w(i) * x[(i, j)] * x[(i, j)]).sum();
        if ss > 0.0 {
            *s = ss.sqrt();
        }
    }
    let mut gram = DMatrix::<f64>::zeros(q, q);
    let mut rhs = DVector::<f64>::zeros(q);
    for i in 0..n {
        let wi = w(i);
        if wi == 0.0 {
            continue;
        }
        for j in 0..q {
            let a = wi * x[(i, j)] / scale[j];
            rhs[j] += a * y[i];
            for l in j..q {
                gram[(j, l)] += a * x[(i, l)] / scale[l];
            }
        }
    }
    for j in 0..q {
        for l in 0..j {
            gram[(j, l)] = gram[(l, j)];
        }
    }
    let rank = rank_of(&gram);
    if rank < q {
        let mut collinear = Vec::new();
        let mut kept: Vec<usize> = Vec::new();
        for j in 0..q {
            let mut trial = kept.clone();
            trial.push(j);
            let sub = DMatrix::from_fn(trial.len(), trial.len(), |a, b| gram[(trial[a], trial[b])]);
            if rank_of(&sub) == trial.len() {
                kept = trial;
            } else {
                collinear.push(names.get(j).cloned().unwrap_or_else(|| format!("column {j}")));
            }
        }
        return Err(Error::Collinear { columns: collinear });
    }
    let (chol, ridge_used) = match gram.clone().cholesky() {
        Some(c) => (c, false),
        None => {
            let ridged = &gram + DMatrix::<f64>::identity(q, q) * LS_RIDGE;
            match ridged.cholesky() {
                Some(c) => (c, true),
                None => return Err(Error::Numerical("normal equations not solvable after ridge".into())),
            }
        }
    };
    let b_scaled = chol.solve(&rhs);
    let inv_scaled = chol.inverse();
    let beta = DVector::from_fn(q, |j, _| b_scaled[j] / scale[j]);
    let gram_inv = DMatrix::from_fn(q, q, |j, l| inv_scaled[(j, l)] / (scale[j] * scale[l]));
    Ok(LsSolution { beta, gram_inv, rank, ridge_used })
}

fn default_names(q: usize) -> Vec<String> {
    (0..q).map(|j| if j == 0 { "intercept".to_string() } else { format!("x{j}") }).collect()
}

/// Fits `y ~ x` where `x` already carries an intercept column.
pub fn fit_least_squares(x: &DMatrix<f64>, y: &[f64], weights: Option<&[f64]>) -> Result<OutcomeModel> {
    fit_least_squares_named(x, y, weights, &default_names(x.ncols()))
}

pub fn fit_least_squares_named(
    x: &DMatrix<f64>,
    y: &[f64],
    weights: Option<&[f64]>,
    names: &[String],
) -> Result<OutcomeModel> {
    let sol = solve_least_squares(x, y, weights, names)?;
    let n = x.nrows();
    let fitted = x * &sol.beta;
    let ssr: f64 = (0..n).map(|i| weights.map_or(1.0, |w| w[i]) * (y[i] - fitted[i]).powi(2)).sum();
    let dof = n.saturating_sub(sol.rank);
    Ok(OutcomeModel {
        beta: sol.beta.iter().cloned().collect(),
        cell: None,
        target: OutcomeTarget::Unspecified,
        residual_variance: if dof > 0 { ssr / dof as f64 } else { 0.0 },
        rank: sol.rank,
        ridge_used: sol.ridge_used,
    })
}

/// Intercept plus slope times covariates.
pub fn predict_outcome(model: &OutcomeModel, x: &[f64]) -> Result<f64> {
    let k = model.n_covariates();
    if x.len() != k {
        return Err(Error::Arity { expected: k, got: x.len() });
    }
    Ok(model.beta[0] + x.iter().zip(&model.beta[1..]).map(|(a, b)| a * b).sum::<f64>())
}

pub fn predict_outcome_rows(model: &OutcomeModel, x: &DMatrix<f64>) -> Result<Vec<f64>> {
    let k = model.n_covariates();
    if x.ncols() != k {
        return Err(Error::Arity { expected: k, got: x.ncols() });
    }
    Ok((0..x.nrows()).map(|i| model.beta[0] + (0..k).map(|j| x[(i, j)] * model.beta[j + 1]).sum::<f64>()).collect())
}

/// Outcome regression with its inverse Gram matrix, fitted on a subset of rows.
pub(crate) struct CellFit {
    pub model: OutcomeModel,
    pub rows: Vec<usize>,
    /// (X'X)^{-1} on the fitting rows, intercept included.
    pub gram_inv: DMatrix<f64>,
}

/// Fits `y[rows] ~ 1 + x[rows]` and tags the model.
pub(crate) fn fit_cell(
    x: &DMatrix<f64>,
    y: &[f64],
    rows: &[usize],
    names: &[String],
    cell: Cell,
    target: OutcomeTarget,
) -> Result<CellFit> {
    let sub = with_intercept(&x.select_rows(rows.iter()));
    let ys: Vec<f64> = rows.iter().map(|&i| y[i]).collect();
    let mut all = vec!["intercept".to_string()];
    all.extend(names.iter().cloned());
    let sol = solve_least_squares(&sub, &ys, None, &all)?;
    let fitted = &sub * &sol.beta;
    let ssr: f64 = ys.iter().zip(fitted.iter()).map(|(a, b)| (a - b).powi(2)).sum();
    let dof = rows.len().saturating_sub(sol.rank);
    Ok(CellFit {
        model: OutcomeModel {
            beta: sol.beta.iter().cloned().collect(),
            cell: Some(cell),
            target,
            residual_variance: if dof > 0 { ssr / dof as f64 } else { 0.0 },
            rank: sol.rank,
            ridge_used: sol.ridge_used,
        },
        rows: rows.to_vec(),
        gram_inv: sol.gram_inv,
    })
}
