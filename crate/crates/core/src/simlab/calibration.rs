//! Synthetic covariate table and the calibration that produces the default
//! DGP coefficients.
//!
//! A hidden assignment and wage process is drawn on the synthetic table; the
//! multinomial logit and the wage regression fitted to those draws become the
//! DGP's propensity and outcome coefficients.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::working_models::{fit_least_squares, fit_multinomial_logit, with_intercept, LogitSettings};

pub const TABLE_ROWS: usize = 5000;
pub const TABLE_SEED: u64 = 12345;
const HIDDEN_SEED: u64 = 7;

/// How age enters the covariate vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AgeForm {
    /// `age` and `age^2 / 100`.
    Quadratic,
    /// Dummies for 25-29, 30-34 and 35-40 (20-24 omitted).
    Bins,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CovariateTable {
    pub names: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl CovariateTable {
    pub fn column_means(&self) -> Vec<f64> {
        let k = self.names.len();
        let n = self.rows.len() as f64;
        (0..k).map(|j| self.rows.iter().map(|r| r[j]).sum::<f64>() / n).collect()
    }
}

/// Base attributes of one synthetic worker.
#[derive(Debug, Clone, Copy)]
struct Person {
    educ: f64,
    age: f64,
    white: f64,
    union: f64,
    white_collar: f64,
}

impl Person {
    fn quadratic(&self) -> [f64; 6] {
        [self.educ, self.age, self.age * self.age / 100.0, self.white, self.union, self.white_collar]
    }

    fn encode(&self, form: AgeForm) -> Vec<f64> {
        match form {
            AgeForm::Quadratic => self.quadratic().to_vec(),
            AgeForm::Bins => {
                let bin = |lo: f64, hi: f64| (self.age >= lo && self.age <= hi) as u8 as f64;
                vec![
                    self.educ,
                    bin(25.0, 29.0),
                    bin(30.0, 34.0),
                    bin(35.0, 40.0),
                    self.white,
                    self.union,
                    self.white_collar,
                ]
            }
        }
    }
}

fn names(form: AgeForm) -> Vec<String> {
    let v: &[&str] = match form {
        AgeForm::Quadratic => &["educ", "age", "agesq", "white", "union", "wc"],
        AgeForm::Bins => &["educ", "age25_29", "age30_34", "age35_40", "white", "union", "wc"],
    };
    v.iter().map(|s| s.to_string()).collect()
}

fn people(n: usize, seed: u64) -> Vec<Person> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 2.5).expect("valid sd");
    (0..n)
        .map(|_| {
            let age = rng.random_range(20..=40) as f64;
            let educ = (12.5 + 0.03 * (age - 30.0) + noise.sample(&mut rng)).round().clamp(8.0, 20.0);
            let white = (rng.random::<f64>() < 0.85) as u8 as f64;
            let union = (rng.random::<f64>() < 0.25) as u8 as f64;
            let p_wc = 1.0 / (1.0 + (-(-3.0 + 0.2 * educ)).exp());
            let white_collar = (rng.random::<f64>() < p_wc) as u8 as f64;
            Person { educ, age, white, union, white_collar }
        })
        .collect()
}

/// Deterministic synthetic covariate table (education in years, ages 20-40).
pub fn synthetic_covariate_table(n: usize, seed: u64, form: AgeForm) -> CovariateTable {
    CovariateTable { names: names(form), rows: people(n, seed).iter().map(|p| p.encode(form)).collect() }
}

/// Coefficients fitted by `calibrate`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    /// Slopes for (G x S_s, G x S_s', C x S_s) against base C x S_s'.
    pub alpha: [Vec<f64>; 3],
    pub beta0: f64,
    pub beta: Vec<f64>,
    pub sigma_u: f64,
}

// Hidden process on (educ, age, agesq, white, union, wc), centered.
const HIDDEN_SUBGROUP: [f64; 6] = [0.0, 0.08, 0.0, 0.0, 0.5, 1.0];
const HIDDEN_TREATED: [f64; 6] = [0.08, 0.0, 0.0, 0.4, 0.2, 0.0];
const HIDDEN_WAGE: [f64; 6] = [0.06, 0.08, -0.1, 0.1, 0.3, 0.5];
const HIDDEN_WAGE_SD: f64 = 0.25;

/// Fits the DGP coefficients to hidden draws on the synthetic table.
pub fn calibrate(form: AgeForm) -> Result<Calibration> {
    let ppl = people(TABLE_ROWS, TABLE_SEED);
    let q: Vec<[f64; 6]> = ppl.iter().map(|p| p.quadratic()).collect();
    let n = q.len();
    let qmean: Vec<f64> = (0..6).map(|j| q.iter().map(|r| r[j]).sum::<f64>() / n as f64).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(HIDDEN_SEED);
    let noise = Normal::new(0.0, HIDDEN_WAGE_SD).expect("valid sd");
    let mut labels = Vec::with_capacity(n);
    let mut wage = Vec::with_capacity(n);
    for r in &q {
        let dot = |a: &[f64; 6]| (0..6).map(|j| a[j] * (r[j] - qmean[j])).sum::<f64>();
        let (s, w) = (dot(&HIDDEN_SUBGROUP), dot(&HIDDEN_TREATED));
        let e = [(w + s).exp(), w.exp(), s.exp(), 1.0];
        let tot: f64 = e.iter().sum();
        let u: f64 = rng.random::<f64>() * tot;
        let mut acc = 0.0;
        let mut lab = 3;
        for (k, v) in e.iter().enumerate() {
            acc += v;
            if u < acc {
                lab = k;
                break;
            }
        }
        labels.push(lab);
        wage.push((0..6).map(|j| HIDDEN_WAGE[j] * r[j]).sum::<f64>() + noise.sample(&mut rng));
    }
    let rows: Vec<Vec<f64>> = ppl.iter().map(|p| p.encode(form)).collect();
    let k = rows[0].len();
    let x = DMatrix::from_fn(n, k, |i, j| rows[i][j]);
    let design = with_intercept(&x);
    let pm = fit_multinomial_logit(&design, &labels, &LogitSettings::default())?;
    let alpha = std::array::from_fn(|a| (1..=k).map(|j| pm.theta[(a, j)]).collect());
    let om = fit_least_squares(&design, &wage, None)?;
    Ok(Calibration { alpha, beta0: om.beta[0], beta: om.beta[1..].to_vec(), sigma_u: om.residual_variance.sqrt() })
}
