//! Seeded simulation lab: calibrated data-generating processes, Monte Carlo
//! runs over estimator suites, and the bias/coverage metric set.
//!
//! Every trial draws from its own ChaCha8 stream seeded by
//! [`trial_seed`]`(master, trial)`, so a run is fully determined by the spec
//! and the master seed regardless of how trials are scheduled.

mod calibration;
mod report;

use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use calibration::{
    calibrate, synthetic_covariate_table, AgeForm, Calibration, CovariateTable, TABLE_ROWS, TABLE_SEED,
};
pub use report::{summarize_metrics, McReport, McRow, Metrics, TrialRecord};

use crate::cdatt::{estimate_cdatt, estimate_cdatt_rc};
use crate::dataset::{
    Cell, Cohort, Comparison, DesignSpec, Estimand, Estimator, PanelDataset, RcObservation, RepeatedCrossSection,
    UnitRecord,
};
use crate::datt::{estimate_datt, EffectEstimate};
use crate::error::{Error, Result};
use crate::inference::aggregate_group_time;

pub const SUBGROUP_S: &str = "targeted";
pub const SUBGROUP_SPRIME: &str = "untargeted";
pub const MISSPEC_COLUMN_NAME: &str = "xtilde";

const NU_SALT: u64 = 0x6e75_5f73_616c_7431;
const RC_SALT: u64 = 0x7263_5f73_616c_7432;

/// SplitMix64 finalizer.
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed of the independent substream for trial `index`.
pub fn trial_seed(master: u64, index: u64) -> u64 {
    splitmix64(splitmix64(master) ^ index)
}

// ---------------------------------------------------------------------------
// Specification
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum CovariateSource {
    /// The documented synthetic worker table.
    Synthetic { n: usize, seed: u64, age_form: AgeForm },
    /// Rows resampled from a CSV of numeric columns.
    Csv { path: PathBuf, columns: Option<Vec<String>> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Effect {
    None,
    Heterogeneous,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Layout {
    /// Periods 1 and 2, treated units start at 2.
    TwoPeriod,
    /// Periods `1..=last`; treated units split evenly across `cohorts`.
    Staggered { cohorts: Vec<i64>, last: i64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sampling {
    Panel,
    /// Each simulated unit is observed in one randomly chosen period.
    Rc,
}

/// Complete description of one simulation scenario.
///
/// Cell probabilities follow a four-category softmax with base
/// `C x S_s'`; each `alpha` vector holds an intercept followed by one slope
/// per covariate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DgpSpec {
    pub covariates: CovariateSource,
    /// Coefficients for `G x S_s`, `G x S_s'`, `C x S_s`.
    pub alpha: [Vec<f64>; 3],
    /// Subtract the table means before applying the slopes.
    pub center_covariates: bool,
    pub beta0: f64,
    pub beta: Vec<f64>,
    pub sigma_u: f64,
    pub gamma: f64,
    pub effect: Effect,
    pub ps_wrong: bool,
    pub or_wrong: bool,
    pub nu_range: (f64, f64),
    /// Covariate transformed into the misspecified design.
    pub misspec_column: usize,
    pub n: usize,
    pub layout: Layout,
    /// One weight per target pair, in `target_pairs` order.
    pub aggregation_weights: Option<Vec<f64>>,
    pub sampling: Sampling,
    pub comparison: Comparison,
    /// Estimators drop units below the overlap threshold instead of failing.
    pub trim_drop: bool,
}

// Fitted by `calibrate(AgeForm::Quadratic)`; a test keeps them in sync.
pub const DEFAULT_ALPHA: [[f64; 7]; 3] = [
    [
        0.0,
        0.07640315526347827,
        -0.04789995513815053,
        0.2198054315945467,
        0.47891357682509805,
        0.6440334106578782,
        1.074148955501878,
    ],
    [
        0.0,
        0.08178234820147154,
        -0.05657490176802702,
        0.07519272407269222,
        0.593722435190361,
        0.237958748335653,
        0.0695609151231961,
    ],
    [
        0.0,
        -0.007606746531736853,
        -0.004288220953817444,
        0.1408816595520284,
        0.012002241543284674,
        0.4327593206184429,
        0.9746574449495528,
    ],
];
pub const DEFAULT_BETA0: f64 = 0.15120809060170026;
pub const DEFAULT_BETA: [f64; 6] = [
    0.05907669339182637,
    0.07051025141912412,
    -0.08309826076537494,
    0.08000072574744091,
    0.3119867754458932,
    0.5001542629304975,
];
pub const DEFAULT_SIGMA_U: f64 = 0.25114496860202856;

impl Default for DgpSpec {
    fn default() -> Self {
        DgpSpec {
            covariates: CovariateSource::Synthetic { n: TABLE_ROWS, seed: TABLE_SEED, age_form: AgeForm::Quadratic },
            alpha: DEFAULT_ALPHA.map(|a| a.to_vec()),
            center_covariates: true,
            beta0: DEFAULT_BETA0,
            beta: DEFAULT_BETA.to_vec(),
            sigma_u: DEFAULT_SIGMA_U,
            gamma: 0.0,
            effect: Effect::Heterogeneous,
            ps_wrong: false,
            or_wrong: false,
            nu_range: (2.0, 5.0),
            misspec_column: 0,
            n: 1000,
            layout: Layout::TwoPeriod,
            aggregation_weights: None,
            sampling: Sampling::Panel,
            comparison: Comparison::Never,
            trim_drop: false,
        }
    }
}

impl DgpSpec {
    /// Default scenario with coefficients fitted for the given age encoding.
    pub fn calibrated(form: AgeForm) -> Result<Self> {
        let c = calibrate(form)?;
        Ok(DgpSpec {
            covariates: CovariateSource::Synthetic { n: TABLE_ROWS, seed: TABLE_SEED, age_form: form },
            alpha: c.alpha.map(|a| std::iter::once(0.0).chain(a).collect()),
            beta0: c.beta0,
            beta: c.beta,
            sigma_u: c.sigma_u,
            ..DgpSpec::default()
        })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Usage(format!("invalid DGP spec: {e}")))
    }

    /// Group-time pairs estimated in each trial.
    pub fn target_pairs(&self) -> Vec<(i64, i64)> {
        match &self.layout {
            Layout::TwoPeriod => vec![(2, 2)],
            Layout::Staggered { cohorts, last } => {
                let mut out = Vec::new();
                for &g in cohorts {
                    for t in g..=*last {
                        out.push((g, t));
                    }
                }
                out
            }
        }
    }

    pub fn times(&self) -> Vec<i64> {
        match &self.layout {
            Layout::TwoPeriod => vec![1, 2],
            Layout::Staggered { last, .. } => (1..=*last).collect(),
        }
    }

    fn validate_shape(&self, k: usize) -> Result<()> {
        for (a, v) in self.alpha.iter().enumerate() {
            if v.len() != k + 1 {
                return Err(arity(&format!("alpha[{a}]"), k + 1, v.len()));
            }
        }
        if self.beta.len() != k {
            return Err(arity("beta", k, self.beta.len()));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::Usage(format!("gamma must be >= 0, got {}", self.gamma)));
        }
        if !(self.sigma_u >= 0.0 && self.sigma_u.is_finite()) {
            return Err(Error::Usage(format!("sigma_u must be >= 0, got {}", self.sigma_u)));
        }
        if self.n < 100 {
            return Err(Error::Usage(format!("sample size n must be >= 100, got {}", self.n)));
        }
        let (lo, hi) = self.nu_range;
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            return Err(Error::Usage(format!("invalid nu range ({lo}, {hi})")));
        }
        if self.misspec_column >= k {
            return Err(Error::Usage(format!(
                "misspec_column {} out of range for {k} covariates",
                self.misspec_column
            )));
        }
        if let Layout::Staggered { cohorts, last } = &self.layout {
            if cohorts.is_empty() {
                return Err(Error::Usage("staggered layout needs at least one cohort".into()));
            }
            if cohorts.iter().any(|&g| g < 2 || g > *last) {
                return Err(Error::Usage(format!("cohorts must lie in 2..={last}")));
            }
        }
        if let Some(w) = &self.aggregation_weights {
            let pairs = self.target_pairs().len();
            if w.len() != pairs {
                return Err(arity("aggregation_weights", pairs, w.len()));
            }
            if w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) || (w.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return Err(Error::Usage("aggregation weights must be nonnegative and sum to 1".into()));
            }
        }
        Ok(())
    }

    /// Design handed to the estimators for this scenario.
    pub fn design_spec(&self, covariate_names: &[String], estimand: Estimand, estimator: Estimator) -> DesignSpec {
        let mut d = DesignSpec::new(estimand, estimator, SUBGROUP_S, SUBGROUP_SPRIME);
        d.comparison = Some(self.comparison);
        d.trim_drop = self.trim_drop;
        d.covariates = Some(covariate_names.to_vec());
        let wrong = Some(vec![MISSPEC_COLUMN_NAME.to_string()]);
        if self.ps_wrong {
            d.ps_covariates = wrong.clone();
        }
        if self.or_wrong {
            d.or_covariates = wrong;
        }
        d
    }
}

fn arity(what: &str, expected: usize, got: usize) -> Error {
    Error::Usage(format!("{what}: expected {expected} entries, got {got}"))
}

fn load_covariate_csv(path: &PathBuf, columns: Option<&Vec<String>>) -> Result<CovariateTable> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::InvalidData(format!("{}: {e}", path.display())))?;
    let headers: Vec<String> = rdr
        .headers()
        .map_err(|e| Error::InvalidData(format!("{}: {e}", path.display())))?
        .iter()
        .map(str::to_string)
        .collect();
    let idx: Vec<usize> = match columns {
        None => (0..headers.len()).collect(),
        Some(cols) => cols
            .iter()
            .map(|c| {
                headers
                    .iter()
                    .position(|h| h == c)
                    .ok_or_else(|| Error::Schema(format!("{}: missing covariate column '{c}'", path.display())))
            })
            .collect::<Result<_>>()?,
    };
    let mut rows = Vec::new();
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::InvalidData(format!("{}: {e}", path.display())))?;
        let row = idx
            .iter()
            .map(|&j| {
                rec.get(j).unwrap_or("").trim().parse::<f64>().map_err(|_| Error::Parse {
                    row: r + 1,
                    column: headers[j].clone(),
                    detail: format!("'{}' is not a number", rec.get(j).unwrap_or("")),
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::InvalidData(format!("{}: no covariate rows", path.display())));
    }
    Ok(CovariateTable { names: idx.iter().map(|&j| headers[j].clone()).collect(), rows })
}

// ---------------------------------------------------------------------------
// Compiled process
// ---------------------------------------------------------------------------

/// Population-level truths of a scenario.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TruthRecord {
    pub datt: f64,
    pub cdatt: f64,
    pub pairs: Vec<PairTruth>,
    /// Exponent used by the misspecified design in this trial.
    pub nu: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairTruth {
    pub g: i64,
    pub t: i64,
    pub datt: f64,
    pub cdatt: f64,
}

impl TruthRecord {
    pub fn value(&self, estimand: Estimand) -> Option<f64> {
        match estimand {
            Estimand::Datt => Some(self.datt),
            Estimand::Cdatt => Some(self.cdatt),
            _ => None,
        }
    }
}

/// A validated spec with its covariate table and per-row quantities.
#[derive(Debug, Clone)]
pub struct Dgp {
    pub spec: DgpSpec,
    pub table: CovariateTable,
    probs: Vec<[f64; 4]>,
    linear: Vec<f64>,
    /// Standard deviation of `beta . x` over the table.
    pub sd_linear: f64,
    pub truth_datt: f64,
}

impl Dgp {
    pub fn new(spec: &DgpSpec) -> Result<Self> {
        let table = match &spec.covariates {
            CovariateSource::Synthetic { n, seed, age_form } => {
                if *n == 0 {
                    return Err(Error::Usage("synthetic covariate table needs n >= 1".into()));
                }
                synthetic_covariate_table(*n, *seed, *age_form)
            }
            CovariateSource::Csv { path, columns } => load_covariate_csv(path, columns.as_ref())?,
        };
        let k = table.names.len();
        spec.validate_shape(k)?;
        if table.names.iter().any(|c| c == MISSPEC_COLUMN_NAME) {
            return Err(Error::Usage(format!("covariate name '{MISSPEC_COLUMN_NAME}' is reserved")));
        }
        let center = if spec.center_covariates { table.column_means() } else { vec![0.0; k] };
        let mut probs = Vec::with_capacity(table.rows.len());
        let mut linear = Vec::with_capacity(table.rows.len());
        for row in &table.rows {
            let idx: [f64; 3] = std::array::from_fn(|a| {
                spec.alpha[a][0] + (0..k).map(|j| spec.alpha[a][j + 1] * (row[j] - center[j])).sum::<f64>()
            });
            let m = idx.iter().cloned().fold(0.0, f64::max);
            let e = [(idx[0] - m).exp(), (idx[1] - m).exp(), (idx[2] - m).exp(), (-m).exp()];
            let tot: f64 = e.iter().sum();
            probs.push(e.map(|v| v / tot));
            linear.push(spec.beta.iter().zip(row).map(|(b, x)| b * x).sum());
        }
        let nrow = linear.len() as f64;
        let lm = linear.iter().sum::<f64>() / nrow;
        let sd_linear = (linear.iter().map(|v| (v - lm).powi(2)).sum::<f64>() / nrow).sqrt();
        let truth_datt = match spec.effect {
            Effect::None => 0.0,
            Effect::Heterogeneous => {
                let cond = |c: usize| {
                    let w: f64 = probs.iter().map(|p| p[c]).sum();
                    probs.iter().zip(&linear).map(|(p, l)| p[c] * l).sum::<f64>() / w
                };
                cond(Cell::TreatedS.index()) - cond(Cell::TreatedSprime.index())
            }
        };
        Ok(Dgp { spec: spec.clone(), table, probs, linear, sd_linear, truth_datt })
    }

    /// Large-sample cell shares implied by the table and `alpha`.
    pub fn cell_shares(&self) -> [f64; 4] {
        let n = self.probs.len() as f64;
        std::array::from_fn(|c| self.probs.iter().map(|p| p[c]).sum::<f64>() / n)
    }

    pub fn truth(&self) -> TruthRecord {
        TruthRecord {
            datt: self.truth_datt,
            cdatt: 0.0,
            pairs: self
                .spec
                .target_pairs()
                .into_iter()
                .map(|(g, t)| PairTruth { g, t, datt: self.truth_datt, cdatt: 0.0 })
                .collect(),
            nu: None,
        }
    }

    fn draw_cell(&self, row: usize, rng: &mut ChaCha8Rng) -> Cell {
        let u: f64 = rng.random();
        let p = &self.probs[row];
        let mut acc = 0.0;
        for (c, v) in p.iter().enumerate().take(3) {
            acc += v;
            if u < acc {
                return Cell::from_index(c);
            }
        }
        Cell::ComparisonSprime
    }

    fn draw_effect(&self, row: usize, rng: &mut ChaCha8Rng) -> f64 {
        match self.spec.effect {
            Effect::None => 0.0,
            Effect::Heterogeneous => {
                let z: f64 = StandardNormal.sample(rng);
                self.linear[row] + self.spec.gamma * self.sd_linear * z
            }
        }
    }

    /// One simulated panel and its truth record.
    pub fn generate(&self, seed: u64) -> Result<(PanelDataset, TruthRecord)> {
        let spec = &self.spec;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let times = spec.times();
        let cohorts: Vec<i64> = match &spec.layout {
            Layout::TwoPeriod => vec![2],
            Layout::Staggered { cohorts, .. } => cohorts.clone(),
        };
        let mut units = Vec::with_capacity(spec.n);
        for i in 0..spec.n {
            let row = rng.random_range(0..self.table.rows.len());
            let cell = self.draw_cell(row, &mut rng);
            let cohort =
                if cell.is_treated() { Cohort::At(cohorts[rng.random_range(0..cohorts.len())]) } else { Cohort::Never };
            let r = self.draw_effect(row, &mut rng);
            let base = spec.beta0 + self.linear[row];
            let y = times
                .iter()
                .map(|&t| {
                    let u: f64 = StandardNormal.sample(&mut rng);
                    base + spec.sigma_u * u + if cohort.treated_at(t) { r } else { 0.0 }
                })
                .collect();
            units.push(UnitRecord {
                unit_id: format!("u{i}"),
                cohort,
                subgroup: if cell.is_s() { SUBGROUP_S } else { SUBGROUP_SPRIME }.to_string(),
                x: self.table.rows[row].clone(),
                y,
            });
        }
        let mut data = PanelDataset::new(times, self.table.names.clone(), units)?;
        let mut truth = self.truth();
        if spec.ps_wrong || spec.or_wrong {
            let col: Vec<f64> = data.units.iter().map(|u| u.x[spec.misspec_column]).collect();
            let (xt, nu) = misspecify_covariates(&col, spec.nu_range, splitmix64(seed ^ NU_SALT))?;
            data = data.with_covariate(MISSPEC_COLUMN_NAME, &xt)?;
            truth.nu = Some(nu);
        }
        Ok((data, truth))
    }

    /// Repeated cross-section: each simulated unit keeps one random period.
    pub fn generate_rc(&self, seed: u64) -> Result<(RepeatedCrossSection, TruthRecord)> {
        let (panel, truth) = self.generate(seed)?;
        Ok((panel_to_rc(&panel, splitmix64(seed ^ RC_SALT))?, truth))
    }
}

/// Keeps one uniformly chosen period per unit.
pub fn panel_to_rc(panel: &PanelDataset, seed: u64) -> Result<RepeatedCrossSection> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let obs = panel
        .units
        .iter()
        .map(|u| {
            let j = rng.random_range(0..panel.times.len());
            RcObservation {
                time: panel.times[j],
                y: u.y[j],
                cohort: u.cohort,
                subgroup: u.subgroup.clone(),
                x: u.x.clone(),
            }
        })
        .collect();
    RepeatedCrossSection::new(panel.covariate_names.clone(), obs)
}

/// One simulated panel and its truth record.
pub fn generate_trial(spec: &DgpSpec, seed: u64) -> Result<(PanelDataset, TruthRecord)> {
    Dgp::new(spec)?.generate(seed)
}

/// `ln(x + 1) + sign(x) |x|^nu`.
pub fn misspecify(x: f64, nu: f64) -> Result<f64> {
    if x <= -1.0 || !x.is_finite() {
        return Err(Error::Domain(format!("misspecified transform needs x > -1, got {x}")));
    }
    let power = if x == 0.0 { 0.0 } else { x.signum() * x.abs().powf(nu) };
    Ok((x + 1.0).ln() + power)
}

/// Nonlinear transform of one covariate with `nu ~ U(range)` drawn once.
pub fn misspecify_covariates(x: &[f64], nu_range: (f64, f64), seed: u64) -> Result<(Vec<f64>, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let nu = if nu_range.0 == nu_range.1 { nu_range.0 } else { rng.random_range(nu_range.0..nu_range.1) };
    let out = x.iter().map(|&v| misspecify(v, nu)).collect::<Result<_>>()?;
    Ok((out, nu))
}

/// Monte Carlo DATT truth from `draws` simulated units.
///
/// Returns the estimate and its standard error.
pub fn oversample_truth(spec: &DgpSpec, draws: usize, seed: u64) -> Result<(f64, f64)> {
    let dgp = Dgp::new(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut acc = [(0.0f64, 0.0f64, 0usize); 2];
    for _ in 0..draws {
        let row = rng.random_range(0..dgp.table.rows.len());
        let cell = dgp.draw_cell(row, &mut rng);
        let r = dgp.draw_effect(row, &mut rng);
        let slot = match cell {
            Cell::TreatedS => 0,
            Cell::TreatedSprime => 1,
            _ => continue,
        };
        acc[slot].0 += r;
        acc[slot].1 += r * r;
        acc[slot].2 += 1;
    }
    if acc.iter().any(|a| a.2 < 2) {
        return Err(Error::Degenerate("oversampling drew too few treated units".into()));
    }
    let moments = acc.map(|(s, ss, n)| {
        let m = s / n as f64;
        (m, (ss / n as f64 - m * m).max(0.0) / n as f64)
    });
    Ok((moments[0].0 - moments[1].0, (moments[0].1 + moments[1].1).sqrt()))
}

// ---------------------------------------------------------------------------
// Monte Carlo
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SuiteEntry {
    pub estimand: Estimand,
    pub estimator: Estimator,
}

/// Unadjusted, 3WFE and RA/IPW/DR DATT, then RA/IPW/DR CDATT.
pub fn default_suite() -> Vec<SuiteEntry> {
    use Estimand::*;
    use Estimator::*;
    [(Datt, Unadjusted), (Datt, ThreeWfe), (Datt, Ra), (Datt, Ipw), (Datt, Dr), (Cdatt, Ra), (Cdatt, Ipw), (Cdatt, Dr)]
        .into_iter()
        .map(|(estimand, estimator)| SuiteEntry { estimand, estimator })
        .collect()
}

#[derive(Debug, Clone, Default)]
pub struct McOptions {
    /// Worker threads; `None` uses the global pool.
    pub threads: Option<usize>,
    /// Keep every trial's estimates in the report.
    pub keep_trials: bool,
}

fn check_suite(spec: &DgpSpec, suite: &[SuiteEntry]) -> Result<()> {
    if suite.is_empty() {
        return Err(Error::Usage("empty estimator suite".into()));
    }
    for e in suite {
        match (e.estimand, e.estimator) {
            (Estimand::Cdatt, Estimator::Unadjusted | Estimator::ThreeWfe) => {
                return Err(Error::Usage(format!("{} is not a CDATT estimator", e.estimator)))
            }
            (Estimand::Datt | Estimand::Cdatt, _) => {}
            (other, _) => return Err(Error::Usage(format!("estimand {other} cannot be simulated"))),
        }
        if spec.sampling == Sampling::Rc && (e.estimand, e.estimator) != (Estimand::Cdatt, Estimator::Dr) {
            return Err(Error::Usage(format!(
                "repeated cross-section sampling supports only cdatt/dr, not {}/{}",
                e.estimand, e.estimator
            )));
        }
    }
    Ok(())
}

type Attempt = std::result::Result<EffectEstimate, String>;

struct TrialOutput {
    seed: u64,
    truth: TruthRecord,
    /// Indexed `[entry][pair]`.
    results: Vec<Vec<Attempt>>,
}

fn run_trial(dgp: &Dgp, suite: &[SuiteEntry], pairs: &[(i64, i64)], seed: u64) -> Result<TrialOutput> {
    let spec = &dgp.spec;
    let names = dgp.table.names.clone();
    let (panel, rc, truth) = match spec.sampling {
        Sampling::Panel => {
            let (d, t) = dgp.generate(seed)?;
            (Some(d), None, t)
        }
        Sampling::Rc => {
            let (d, t) = dgp.generate_rc(seed)?;
            (None, Some(d), t)
        }
    };
    let results = suite
        .iter()
        .map(|e| {
            let design = spec.design_spec(&names, e.estimand, e.estimator);
            pairs
                .iter()
                .map(|&(g, t)| {
                    let r = match (&panel, &rc, e.estimand) {
                        (Some(d), _, Estimand::Cdatt) => estimate_cdatt(d, g, t, &design, e.estimator),
                        (Some(d), _, _) => estimate_datt(d, g, t, &design, e.estimator),
                        (None, Some(d), _) => estimate_cdatt_rc(d, g, t, &design),
                        (None, None, _) => unreachable!("trial produced no data"),
                    };
                    r.map_err(|err| err.to_string())
                })
                .collect()
        })
        .collect();
    Ok(TrialOutput { seed, truth, results })
}

/// Seeded Monte Carlo study; fails when any row lost more than 1% of trials.
pub fn run_monte_carlo(spec: &DgpSpec, suite: &[SuiteEntry], trials: usize, master_seed: u64) -> Result<McReport> {
    let report = run_monte_carlo_with(spec, suite, trials, master_seed, &McOptions::default())?;
    report.check_failures()?;
    Ok(report)
}

/// Like [`run_monte_carlo`], but returns the report whatever the failure
/// count; call [`McReport::check_failures`] to apply the 1% rule.
pub fn run_monte_carlo_with(
    spec: &DgpSpec,
    suite: &[SuiteEntry],
    trials: usize,
    master_seed: u64,
    options: &McOptions,
) -> Result<McReport> {
    if trials == 0 {
        return Err(Error::Usage("trials must be >= 1".into()));
    }
    check_suite(spec, suite)?;
    let dgp = Dgp::new(spec)?;
    let pairs = spec.target_pairs();
    let work = || -> Result<Vec<TrialOutput>> {
        (0..trials).into_par_iter().map(|i| run_trial(&dgp, suite, &pairs, trial_seed(master_seed, i as u64))).collect()
    };
    let outputs = match options.threads {
        Some(k) => rayon::ThreadPoolBuilder::new()
            .num_threads(k.max(1))
            .build()
            .map_err(|e| Error::Usage(format!("cannot start {k} worker threads: {e}")))?
            .install(work)?,
        None => work()?,
    };
    let level = 0.95;
    let mut rows = Vec::new();
    let mut records = Vec::new();
    for (ei, entry) in suite.iter().enumerate() {
        let truth_of = |out: &TrialOutput, pi: usize| match entry.estimand {
            Estimand::Cdatt => out.truth.pairs[pi].cdatt,
            _ => out.truth.pairs[pi].datt,
        };
        let mut targets: Vec<Option<(i64, i64)>> = pairs.iter().copied().map(Some).collect();
        if spec.aggregation_weights.is_some() {
            targets.push(None);
        }
        for (pi, pair) in targets.into_iter().enumerate() {
            let outcomes: Vec<(f64, std::result::Result<[f64; 4], String>)> = outputs
                .iter()
                .map(|out| match (pair, &spec.aggregation_weights) {
                    (None, Some(w)) => {
                        let truth = (0..pairs.len()).map(|k| w[k] * truth_of(out, k)).sum();
                        let parts: std::result::Result<Vec<EffectEstimate>, String> =
                            out.results[ei].iter().cloned().collect();
                        let agg = parts.and_then(|p| aggregate_group_time(&p, w).map_err(|e| e.to_string()));
                        (truth, agg.map(|a| [a.estimate, a.se, a.ci_lo, a.ci_hi]))
                    }
                    _ => {
                        let r = out.results[ei][pi].as_ref().map_err(Clone::clone);
                        (truth_of(out, pi), r.map(|e| [e.estimate, e.se, e.ci_lo, e.ci_hi]))
                    }
                })
                .collect();
            let (mut est, mut ses, mut truths, mut failures) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
            for (i, (truth, outcome)) in outcomes.iter().enumerate() {
                match outcome {
                    Ok(v) => {
                        est.push(v[0]);
                        ses.push(v[1]);
                        truths.push(*truth);
                    }
                    Err(msg) => failures.push(msg.clone()),
                }
                if options.keep_trials {
                    let o = outcome.as_ref().map(|v| *v).map_err(String::as_str);
                    records.push(TrialRecord::new((i, outputs[i].seed), entry, pair, *truth, o));
                }
            }
            if est.is_empty() {
                return Err(Error::MonteCarlo {
                    failed: failures.len(),
                    trials,
                    first: format!("{}/{}: {}", entry.estimand, entry.estimator, failures[0]),
                });
            }
            let metrics = summarize_metrics(&est, &ses, &truths, level)?;
            rows.push(McRow::new(entry, pair, trials, &truths, metrics, &failures));
        }
    }
    Ok(McReport {
        spec: spec.clone(),
        trials,
        master_seed,
        level,
        truth: dgp.truth(),
        rows,
        trial_records: options.keep_trials.then_some(records),
    })
}
