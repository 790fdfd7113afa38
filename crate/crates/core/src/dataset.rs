//! Panel and repeated cross-section data, design choices, and cell indicators.
//!
//! Treatment is never stored: `W_it = 1[t >= cohort]` is derived from the
//! cohort, so irreversibility holds for every loadable dataset.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// First treated period, or never treated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Cohort {
    At(i64),
    Never,
}

impl Cohort {
    pub fn treated_at(self, t: i64) -> bool {
        matches!(self, Cohort::At(g) if t >= g)
    }

    pub fn parse(raw: &str) -> std::result::Result<Self, String> {
        let v = raw.trim();
        if v.is_empty() || v.eq_ignore_ascii_case("never") || v.eq_ignore_ascii_case("inf") {
            return Ok(Cohort::Never);
        }
        v.parse::<i64>().map(Cohort::At).map_err(|_| format!("cohort '{v}' is neither an integer nor never/inf"))
    }
}

impl fmt::Display for Cohort {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Cohort::At(g) => write!(f, "{g}"),
            Cohort::Never => f.write_str("never"),
        }
    }
}

impl Serialize for Cohort {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Cohort::At(g) => s.serialize_i64(*g),
            Cohort::Never => s.serialize_str("never"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UnitRecord {
    pub unit_id: String,
    pub cohort: Cohort,
    pub subgroup: String,
    pub x: Vec<f64>,
    /// Outcomes aligned with `PanelDataset::times`.
    pub y: Vec<f64>,
}

/// Balanced long panel with time-invariant covariates.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PanelDataset {
    pub times: Vec<i64>,
    pub covariate_names: Vec<String>,
    pub subgroups: Vec<String>,
    pub units: Vec<UnitRecord>,
}

impl PanelDataset {
    /// Builds a dataset and checks every invariant.
    pub fn new(times: Vec<i64>, covariate_names: Vec<String>, units: Vec<UnitRecord>) -> Result<Self> {
        let mut sorted = times.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != times.len() || sorted != times {
            return Err(Error::InvalidData("time set must be strictly increasing".into()));
        }
        if times.is_empty() {
            return Err(Error::InvalidData("empty time set".into()));
        }
        let k = covariate_names.len();
        let mut labels = BTreeSet::new();
        for u in &units {
            if u.x.len() != k {
                return Err(Error::Arity { expected: k, got: u.x.len() });
            }
            if u.y.len() != times.len() {
                return Err(Error::Balance {
                    unit: u.unit_id.clone(),
                    detail: format!("has {} outcomes for {} periods", u.y.len(), times.len()),
                });
            }
            check_cohort(u.cohort, &times, &u.unit_id)?;
            labels.insert(u.subgroup.clone());
        }
        if labels.len() < 2 {
            return Err(Error::InvalidData(format!("need at least 2 subgroup labels, found {}", labels.len())));
        }
        Ok(PanelDataset { times, covariate_names, subgroups: labels.into_iter().collect(), units })
    }

    pub fn n_units(&self) -> usize {
        self.units.len()
    }

    pub fn time_index(&self, t: i64) -> Option<usize> {
        self.times.binary_search(&t).ok()
    }

    pub fn has_never_treated(&self) -> bool {
        self.units.iter().any(|u| u.cohort == Cohort::Never)
    }

    /// Appends a covariate column (used for misspecified working models).
    pub fn with_covariate(&self, name: &str, values: &[f64]) -> Result<Self> {
        if values.len() != self.units.len() {
            return Err(Error::Arity { expected: self.units.len(), got: values.len() });
        }
        if self.covariate_names.iter().any(|c| c == name) {
            return Err(Error::InvalidData(format!("covariate '{name}' already present")));
        }
        let mut out = self.clone();
        out.covariate_names.push(name.to_string());
        for (u, v) in out.units.iter_mut().zip(values) {
            u.x.push(*v);
        }
        Ok(out)
    }

    /// Flattens the panel into one observation per (unit, period).
    pub fn to_repeated_cross_section(&self) -> RepeatedCrossSection {
        let mut obs = Vec::with_capacity(self.units.len() * self.times.len());
        for u in &self.units {
            for (j, &t) in self.times.iter().enumerate() {
                obs.push(RcObservation {
                    time: t,
                    y: u.y[j],
                    cohort: u.cohort,
                    subgroup: u.subgroup.clone(),
                    x: u.x.clone(),
                });
            }
        }
        RepeatedCrossSection { covariate_names: self.covariate_names.clone(), subgroups: self.subgroups.clone(), obs }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RcObservation {
    pub time: i64,
    pub y: f64,
    pub cohort: Cohort,
    pub subgroup: String,
    pub x: Vec<f64>,
}

/// Independent draws of (t, Y, G, S, X); no unit is observed twice.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RepeatedCrossSection {
    pub covariate_names: Vec<String>,
    pub subgroups: Vec<String>,
    pub obs: Vec<RcObservation>,
}

impl RepeatedCrossSection {
    pub fn new(covariate_names: Vec<String>, obs: Vec<RcObservation>) -> Result<Self> {
        let k = covariate_names.len();
        let times: Vec<i64> = obs.iter().map(|o| o.time).collect::<BTreeSet<_>>().into_iter().collect();
        let mut labels = BTreeSet::new();
        for (i, o) in obs.iter().enumerate() {
            if o.x.len() != k {
                return Err(Error::Arity { expected: k, got: o.x.len() });
            }
            check_cohort(o.cohort, &times, &format!("obs{i}"))?;
            labels.insert(o.subgroup.clone());
        }
        if labels.len() < 2 {
            return Err(Error::InvalidData(format!("need at least 2 subgroup labels, found {}", labels.len())));
        }
        Ok(RepeatedCrossSection { covariate_names, subgroups: labels.into_iter().collect(), obs })
    }

    pub fn times(&self) -> Vec<i64> {
        self.obs.iter().map(|o| o.time).collect::<BTreeSet<_>>().into_iter().collect()
    }
}

fn check_cohort(c: Cohort, times: &[i64], who: &str) -> Result<()> {
    if let Cohort::At(g) = c {
        let (lo, hi) = (times[0], times[times.len() - 1]);
        if g <= lo {
            return Err(Error::InvalidData(format!(
                "{who}: cohort {g} is treated in the first observed period {lo} (always-treated units are not allowed)"
            )));
        }
        if g > hi {
            return Err(Error::InvalidData(format!(
                "{who}: cohort {g} lies beyond the last observed period {hi}; encode as never"
            )));
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Design choices
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Comparison {
    #[serde(rename = "notyet")]
    NotYet,
    #[serde(rename = "never")]
    Never,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Estimand {
    #[serde(rename = "datt")]
    Datt,
    #[serde(rename = "cdatt")]
    Cdatt,
    #[serde(rename = "att_unaffected")]
    AttUnaffected,
    #[serde(rename = "att_pop")]
    AttPopulation,
    #[serde(rename = "bound")]
    Bound,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Estimator {
    #[serde(rename = "unadjusted")]
    Unadjusted,
    #[serde(rename = "3wfe")]
    ThreeWfe,
    #[serde(rename = "ra")]
    Ra,
    #[serde(rename = "ipw")]
    Ipw,
    #[serde(rename = "dr")]
    Dr,
}

macro_rules! tag_enum_text {
    ($ty:ty { $($variant:ident => $text:literal),+ $(,)? }) => {
        impl $ty {
            pub fn as_str(self) -> &'static str {
                match self { $(<$ty>::$variant => $text),+ }
            }
        }
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }
        impl FromStr for $ty {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s.trim().to_ascii_lowercase().as_str() {
                    $($text => Ok(<$ty>::$variant),)+
                    other => Err(Error::Usage(format!(
                        "unknown {} '{}' (expected one of: {})",
                        stringify!($ty).to_ascii_lowercase(), other, [$($text),+].join(", ")
                    ))),
                }
            }
        }
    };
}

tag_enum_text!(Comparison { NotYet => "notyet", Never => "never" });
tag_enum_text!(Estimand {
    Datt => "datt",
    Cdatt => "cdatt",
    AttUnaffected => "att_unaffected",
    AttPopulation => "att_pop",
    Bound => "bound",
});
tag_enum_text!(Estimator {
    Unadjusted => "unadjusted",
    ThreeWfe => "3wfe",
    Ra => "ra",
    Ipw => "ipw",
    Dr => "dr",
});

/// User choices for one estimation problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DesignSpec {
    pub estimand: Estimand,
    pub estimator: Estimator,
    /// `None` picks never-treated when present, else not-yet-treated.
    pub comparison: Option<Comparison>,
    pub s: String,
    pub sprime: String,
    /// Covariates for both working models; `None` means every column.
    pub covariates: Option<Vec<String>>,
    /// Overrides `covariates` for the propensity model.
    pub ps_covariates: Option<Vec<String>>,
    /// Overrides `covariates` for the outcome models.
    pub or_covariates: Option<Vec<String>>,
    #[serde(default = "default_trim")]
    pub trim: f64,
    /// Drop units below the trim threshold instead of failing.
    #[serde(default)]
    pub trim_drop: bool,
    #[serde(default = "default_level")]
    pub level: f64,
}

fn default_trim() -> f64 {
    0.005
}

fn default_level() -> f64 {
    0.95
}

impl DesignSpec {
    pub fn new(estimand: Estimand, estimator: Estimator, s: &str, sprime: &str) -> Self {
        DesignSpec {
            estimand,
            estimator,
            comparison: None,
            s: s.to_string(),
            sprime: sprime.to_string(),
            covariates: None,
            ps_covariates: None,
            or_covariates: None,
            trim: default_trim(),
            trim_drop: false,
            level: default_level(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.trim > 0.0 && self.trim < 0.5) {
            return Err(Error::Usage(format!("trim threshold {} outside (0, 0.5)", self.trim)));
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err(Error::Usage(format!("confidence level {} outside (0, 1)", self.level)));
        }
        if self.s == self.sprime {
            return Err(Error::Usage(format!("subgroups s and s' are both '{}'", self.s)));
        }
        Ok(())
    }

    pub fn resolve_comparison(&self, has_never: bool) -> Comparison {
        self.comparison.unwrap_or(if has_never { Comparison::Never } else { Comparison::NotYet })
    }
}

// ---------------------------------------------------------------------------
// CSV ingestion
// ---------------------------------------------------------------------------

/// Column names in the input file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ColumnMapping {
    pub unit: String,
    pub time: String,
    pub outcome: String,
    pub cohort: String,
    pub subgroup: String,
    /// `None` takes every remaining column as a covariate.
    pub covariates: Option<Vec<String>>,
}

impl Default for ColumnMapping {
    fn default() -> Self {
        ColumnMapping {
            unit: "unit".into(),
            time: "time".into(),
            outcome: "y".into(),
            cohort: "cohort".into(),
            subgroup: "subgroup".into(),
            covariates: None,
        }
    }
}

struct Layout {
    unit: Option<usize>,
    time: usize,
    outcome: usize,
    cohort: usize,
    subgroup: usize,
    covariates: Vec<(usize, String)>,
}

fn resolve_layout(headers: &csv::StringRecord, map: &ColumnMapping, panel: bool) -> Result<Layout> {
    let find = |name: &str| {
        headers.iter().position(|h| h.trim() == name).ok_or_else(|| Error::Schema(format!("missing column '{name}'")))
    };
    let unit = if panel { Some(find(&map.unit)?) } else { None };
    let time = find(&map.time)?;
    let outcome = find(&map.outcome)?;
    let cohort = find(&map.cohort)?;
    let subgroup = find(&map.subgroup)?;
    let reserved: Vec<usize> =
        [unit, Some(time), Some(outcome), Some(cohort), Some(subgroup)].into_iter().flatten().collect();
    let covariates = match &map.covariates {
        Some(names) => names.iter().map(|n| Ok((find(n)?, n.clone()))).collect::<Result<Vec<_>>>()?,
        None => headers
            .iter()
            .enumerate()
            .filter(|(i, h)| !reserved.contains(i) && !(!panel && h.trim() == map.unit))
            .map(|(i, h)| (i, h.trim().to_string()))
            .collect(),
    };
    Ok(Layout { unit, time, outcome, cohort, subgroup, covariates })
}

fn field(rec: &csv::StringRecord, idx: usize) -> &str {
    rec.get(idx).unwrap_or("").trim()
}

fn parse_f64(rec: &csv::StringRecord, idx: usize, row: usize, column: &str) -> Result<f64> {
    let raw = field(rec, idx);
    if raw.is_empty() {
        return Err(Error::Parse { row, column: column.into(), detail: "missing value".into() });
    }
    match raw.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        _ => Err(Error::Parse { row, column: column.into(), detail: format!("'{raw}' is not a finite number") }),
    }
}

fn parse_time(rec: &csv::StringRecord, idx: usize, row: usize, column: &str) -> Result<i64> {
    let raw = field(rec, idx);
    raw.parse::<i64>().map_err(|_| Error::Parse {
        row,
        column: column.into(),
        detail: format!("'{raw}' is not an integer period"),
    })
}

/// Reads a long-format panel and checks balance.
pub fn load_panel(path: impl AsRef<Path>, schema: &ColumnMapping) -> Result<PanelDataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    read_panel(file, schema)
}

pub fn read_panel<R: Read>(reader: R, schema: &ColumnMapping) -> Result<PanelDataset> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers().map_err(|e| Error::Schema(e.to_string()))?.clone();
    let lay = resolve_layout(&headers, schema, true)?;
    let unit_col = lay.unit.expect("panel layout has a unit column");

    struct Partial {
        cohort: Cohort,
        subgroup: String,
        x: Vec<f64>,
        y: HashMap<i64, f64>,
    }
    let mut order: Vec<String> = Vec::new();
    let mut by_unit: HashMap<String, Partial> = HashMap::new();
    let mut times = BTreeSet::new();

    for (r, rec) in rdr.records().enumerate() {
        let row = r + 1;
        let rec = rec.map_err(|e| Error::Parse { row, column: "*".into(), detail: e.to_string() })?;
        let id = field(&rec, unit_col).to_string();
        if id.is_empty() {
            return Err(Error::Parse { row, column: schema.unit.clone(), detail: "missing unit id".into() });
        }
        let t = parse_time(&rec, lay.time, row, &schema.time)?;
        let y = parse_f64(&rec, lay.outcome, row, &schema.outcome)?;
        let cohort = Cohort::parse(field(&rec, lay.cohort)).map_err(|detail| Error::Parse {
            row,
            column: schema.cohort.clone(),
            detail,
        })?;
        let subgroup = field(&rec, lay.subgroup).to_string();
        if subgroup.is_empty() {
            return Err(Error::Parse { row, column: schema.subgroup.clone(), detail: "missing subgroup".into() });
        }
        let x = lay.covariates.iter().map(|(i, n)| parse_f64(&rec, *i, row, n)).collect::<Result<Vec<_>>>()?;
        times.insert(t);
        match by_unit.get_mut(&id) {
            None => {
                order.push(id.clone());
                by_unit.insert(id, Partial { cohort, subgroup, x, y: HashMap::from([(t, y)]) });
            }
            Some(p) => {
                if p.cohort != cohort || p.subgroup != subgroup || p.x != x {
                    return Err(Error::InvalidData(format!(
                        "row {row}: unit {id} changes cohort, subgroup or covariates over time"
                    )));
                }
                if p.y.insert(t, y).is_some() {
                    return Err(Error::InvalidData(format!(
                        "row {row}: duplicate observation for unit {id} at time {t}"
                    )));
                }
            }
        }
    }
    let times: Vec<i64> = times.into_iter().collect();
    let mut units = Vec::with_capacity(order.len());
    for id in order {
        let p = by_unit.remove(&id).expect("unit recorded in order");
        let mut y = Vec::with_capacity(times.len());
        for t in &times {
            match p.y.get(t) {
                Some(v) => y.push(*v),
                None => {
                    return Err(Error::Balance { unit: id, detail: format!("lacks period {t}") });
                }
            }
        }
        units.push(UnitRecord { unit_id: id, cohort: p.cohort, subgroup: p.subgroup, x: p.x, y });
    }
    let names = lay.covariates.into_iter().map(|(_, n)| n).collect();
    PanelDataset::new(times, names, units)
}

pub fn write_panel<W: Write>(data: &PanelDataset, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["unit".to_string(), "time".into(), "y".into(), "cohort".into(), "subgroup".into()];
    header.extend(data.covariate_names.iter().cloned());
    w.write_record(&header).map_err(csv_err)?;
    for u in &data.units {
        for (j, t) in data.times.iter().enumerate() {
            let mut rec =
                vec![u.unit_id.clone(), t.to_string(), u.y[j].to_string(), u.cohort.to_string(), u.subgroup.clone()];
            rec.extend(u.x.iter().map(|v| v.to_string()));
            w.write_record(&rec).map_err(csv_err)?;
        }
    }
    w.flush().map_err(|e| Error::io("csv writer", e))
}

/// Reads a repeated cross-section (no unit column).
pub fn load_rc(path: impl AsRef<Path>, schema: &ColumnMapping) -> Result<RepeatedCrossSection> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    read_rc(file, schema)
}

pub fn read_rc<R: Read>(reader: R, schema: &ColumnMapping) -> Result<RepeatedCrossSection> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers().map_err(|e| Error::Schema(e.to_string()))?.clone();
    let lay = resolve_layout(&headers, schema, false)?;
    let mut obs = Vec::new();
    for (r, rec) in rdr.records().enumerate() {
        let row = r + 1;
        let rec = rec.map_err(|e| Error::Parse { row, column: "*".into(), detail: e.to_string() })?;
        let time = parse_time(&rec, lay.time, row, &schema.time)?;
        let y = parse_f64(&rec, lay.outcome, row, &schema.outcome)?;
        let cohort = Cohort::parse(field(&rec, lay.cohort)).map_err(|detail| Error::Parse {
            row,
            column: schema.cohort.clone(),
            detail,
        })?;
        let subgroup = field(&rec, lay.subgroup).to_string();
        if subgroup.is_empty() {
            return Err(Error::Parse { row, column: schema.subgroup.clone(), detail: "missing subgroup".into() });
        }
        let x = lay.covariates.iter().map(|(i, n)| parse_f64(&rec, *i, row, n)).collect::<Result<Vec<_>>>()?;
        obs.push(RcObservation { time, y, cohort, subgroup, x });
    }
    let names = lay.covariates.into_iter().map(|(_, n)| n).collect();
    RepeatedCrossSection::new(names, obs)
}

pub fn write_rc<W: Write>(data: &RepeatedCrossSection, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["time".to_string(), "y".into(), "cohort".into(), "subgroup".into()];
    header.extend(data.covariate_names.iter().cloned());
    w.write_record(&header).map_err(csv_err)?;
    for o in &data.obs {
        let mut rec = vec![o.time.to_string(), o.y.to_string(), o.cohort.to_string(), o.subgroup.clone()];
        rec.extend(o.x.iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io("csv writer", e))
}

fn csv_err(e: csv::Error) -> Error {
    Error::InvalidData(format!("csv write failed: {e}"))
}

// ---------------------------------------------------------------------------
// Cells
// ---------------------------------------------------------------------------

/// The four treatment-by-subgroup cells, in propensity category order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum Cell {
    TreatedS = 0,
    TreatedSprime = 1,
    ComparisonS = 2,
    ComparisonSprime = 3,
}

impl Cell {
    pub const ALL: [Cell; 4] = [Cell::TreatedS, Cell::TreatedSprime, Cell::ComparisonS, Cell::ComparisonSprime];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Cell {
        Cell::ALL[i]
    }

    pub fn is_treated(self) -> bool {
        matches!(self, Cell::TreatedS | Cell::TreatedSprime)
    }

    pub fn is_s(self) -> bool {
        matches!(self, Cell::TreatedS | Cell::ComparisonS)
    }

    pub fn label(self) -> &'static str {
        match self {
            Cell::TreatedS => "G_g x S_s",
            Cell::TreatedSprime => "G_g x S_s'",
            Cell::ComparisonS => "C_c x S_s",
            Cell::ComparisonSprime => "C_c x S_s'",
        }
    }
}

/// Anything whose rows carry a cohort and a subgroup.
pub trait CellSource {
    fn n_rows(&self) -> usize;
    fn cohort(&self, i: usize) -> Cohort;
    fn subgroup(&self, i: usize) -> &str;
    /// Observation period for repeated cross-sections, `None` for panel units.
    fn row_time(&self, i: usize) -> Option<i64>;
    fn time_set(&self) -> Vec<i64>;
    fn row_id(&self, i: usize) -> String;
}

impl CellSource for PanelDataset {
    fn n_rows(&self) -> usize {
        self.units.len()
    }
    fn cohort(&self, i: usize) -> Cohort {
        self.units[i].cohort
    }
    fn subgroup(&self, i: usize) -> &str {
        &self.units[i].subgroup
    }
    fn row_time(&self, _i: usize) -> Option<i64> {
        None
    }
    fn time_set(&self) -> Vec<i64> {
        self.times.clone()
    }
    fn row_id(&self, i: usize) -> String {
        self.units[i].unit_id.clone()
    }
}

impl CellSource for RepeatedCrossSection {
    fn n_rows(&self) -> usize {
        self.obs.len()
    }
    fn cohort(&self, i: usize) -> Cohort {
        self.obs[i].cohort
    }
    fn subgroup(&self, i: usize) -> &str {
        &self.obs[i].subgroup
    }
    fn row_time(&self, i: usize) -> Option<i64> {
        Some(self.obs[i].time)
    }
    fn time_set(&self) -> Vec<i64> {
        self.times()
    }
    fn row_id(&self, i: usize) -> String {
        format!("obs{i}")
    }
}

/// Cell membership for one (g, t, c, s, s') problem.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellIndicators {
    pub g: i64,
    pub t: i64,
    pub comparison: Comparison,
    pub s: String,
    pub sprime: String,
    /// Row indices into the source data, in source order.
    pub included: Vec<usize>,
    /// Cell of each included row.
    pub cell: Vec<Cell>,
    pub counts: [usize; 4],
    pub excluded: Vec<usize>,
}

impl CellIndicators {
    pub fn n(&self) -> usize {
        self.included.len()
    }

    pub fn flags(&self, which: Cell) -> Vec<bool> {
        self.cell.iter().map(|c| *c == which).collect()
    }

    pub fn g_g(&self) -> Vec<bool> {
        self.cell.iter().map(|c| c.is_treated()).collect()
    }

    pub fn c_c(&self) -> Vec<bool> {
        self.cell.iter().map(|c| !c.is_treated()).collect()
    }

    pub fn s_s(&self) -> Vec<bool> {
        self.cell.iter().map(|c| c.is_s()).collect()
    }

    pub fn s_sprime(&self) -> Vec<bool> {
        self.cell.iter().map(|c| !c.is_s()).collect()
    }

    /// Positions (within `included`) of rows in a cell.
    pub fn positions(&self, which: Cell) -> Vec<usize> {
        (0..self.cell.len()).filter(|&i| self.cell[i] == which).collect()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.cell.iter().map(|c| c.index()).collect()
    }

    /// Keeps included rows where `keep` is true.
    pub fn restrict(&self, keep: &[bool]) -> Result<CellIndicators> {
        let mut out = self.clone();
        out.included.clear();
        out.cell.clear();
        out.counts = [0; 4];
        for (i, &k) in keep.iter().enumerate() {
            if k {
                out.included.push(self.included[i]);
                out.cell.push(self.cell[i]);
                out.counts[self.cell[i].index()] += 1;
            } else {
                out.excluded.push(self.included[i]);
            }
        }
        out.excluded.sort_unstable();
        out.check_nonempty()?;
        Ok(out)
    }

    fn check_nonempty(&self) -> Result<()> {
        for c in Cell::ALL {
            if self.counts[c.index()] == 0 {
                return Err(Error::Degenerate(format!(
                    "cell {} is empty (g={}, t={}, comparison={}, s={}, s'={})",
                    c.label(),
                    self.g,
                    self.t,
                    self.comparison,
                    self.s,
                    self.sprime
                )));
            }
        }
        Ok(())
    }
}

fn classify(cohort: Cohort, sub: &str, g: i64, t: i64, comparison: Comparison, s: &str, sp: &str) -> Option<Cell> {
    let treated = cohort == Cohort::At(g);
    let comp = match comparison {
        Comparison::NotYet => !treated && !cohort.treated_at(t),
        Comparison::Never => cohort == Cohort::Never,
    };
    let in_s = sub == s;
    let in_sp = sub == sp;
    match (treated, comp, in_s, in_sp) {
        (true, _, true, _) => Some(Cell::TreatedS),
        (true, _, _, true) => Some(Cell::TreatedSprime),
        (false, true, true, _) => Some(Cell::ComparisonS),
        (false, true, _, true) => Some(Cell::ComparisonSprime),
        _ => None,
    }
}

/// Assigns every row to one of the four cells or excludes it.
pub fn build_cells<D: CellSource + ?Sized>(data: &D, g: i64, t: i64, spec: &DesignSpec) -> Result<CellIndicators> {
    spec.validate()?;
    if t < g {
        return Err(Error::Usage(format!("t={t} precedes g={g}")));
    }
    let times = data.time_set();
    for need in [g - 1, t] {
        if !times.contains(&need) {
            return Err(Error::Usage(format!("period {need} is not in the time set {times:?} (g={g}, t={t})")));
        }
    }
    let has_never = (0..data.n_rows()).any(|i| data.cohort(i) == Cohort::Never);
    let comparison = spec.resolve_comparison(has_never);
    if comparison == Comparison::Never && !has_never {
        return Err(Error::NoNeverTreated { g, t });
    }
    let mut out = CellIndicators {
        g,
        t,
        comparison,
        s: spec.s.clone(),
        sprime: spec.sprime.clone(),
        included: Vec::new(),
        cell: Vec::new(),
        counts: [0; 4],
        excluded: Vec::new(),
    };
    for i in 0..data.n_rows() {
        if let Some(rt) = data.row_time(i) {
            if rt != t && rt != g - 1 {
                out.excluded.push(i);
                continue;
            }
        }
        match classify(data.cohort(i), data.subgroup(i), g, t, comparison, &spec.s, &spec.sprime) {
            Some(c) => {
                out.included.push(i);
                out.cell.push(c);
                out.counts[c.index()] += 1;
            }
            None => out.excluded.push(i),
        }
    }
    out.check_nonempty()?;
    if data.row_time(0).is_some() {
        for period in [g - 1, t] {
            for c in Cell::ALL {
                let present =
                    out.included.iter().zip(&out.cell).any(|(&i, &cc)| cc == c && data.row_time(i) == Some(period));
                if !present {
                    return Err(Error::Degenerate(format!(
                        "cell {} has no observations in period {period} (g={g}, t={t})",
                        c.label()
                    )));
                }
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Validation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Fatal,
    Warning,
    Info,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Finding {
    pub severity: Severity,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairReport {
    pub g: i64,
    pub t: i64,
    pub counts: [usize; 4],
    pub shares: [f64; 4],
    pub low_share_cells: Vec<String>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationReport {
    pub comparison: Comparison,
    pub trim: f64,
    pub pairs: Vec<PairReport>,
    pub findings: Vec<Finding>,
    pub pass: bool,
}

impl ValidationReport {
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "design validation: {} (comparison={}, eps={})\n",
            if self.pass { "pass" } else { "FAIL" },
            self.comparison,
            self.trim
        );
        for p in &self.pairs {
            out.push_str(&format!("  (g={}, t={}) ", p.g, p.t));
            match &p.error {
                Some(e) => out.push_str(&format!("error: {e}\n")),
                None => {
                    let cells: Vec<String> = Cell::ALL
                        .iter()
                        .map(|c| format!("{}: {} ({:.3})", c.label(), p.counts[c.index()], p.shares[c.index()]))
                        .collect();
                    out.push_str(&cells.join(", "));
                    out.push('\n');
                }
            }
        }
        for f in &self.findings {
            out.push_str(&format!("  [{}] {}\n", format!("{:?}", f.severity).to_lowercase(), f.message));
        }
        out
    }
}

/// Cell counts and shares for every estimable (g, t) pair.
pub fn validate_design<D: CellSource + ?Sized>(data: &D, spec: &DesignSpec) -> ValidationReport {
    let times = data.time_set();
    let has_never = (0..data.n_rows()).any(|i| data.cohort(i) == Cohort::Never);
    let comparison = spec.resolve_comparison(has_never);
    let cohorts: BTreeSet<i64> = (0..data.n_rows())
        .filter_map(|i| match data.cohort(i) {
            Cohort::At(g) => Some(g),
            Cohort::Never => None,
        })
        .collect();
    let mut pairs = Vec::new();
    let mut findings = Vec::new();
    if let Err(e) = spec.validate() {
        findings.push(Finding { severity: Severity::Fatal, message: e.to_string() });
    }
    let mut forced = spec.clone();
    forced.comparison = Some(comparison);
    for &g in &cohorts {
        if !times.contains(&(g - 1)) {
            continue;
        }
        for &t in times.iter().filter(|&&t| t >= g) {
            match build_cells(data, g, t, &forced) {
                Ok(cells) => {
                    let n = cells.n() as f64;
                    let shares = cells.counts.map(|c| c as f64 / n);
                    let low: Vec<String> = Cell::ALL
                        .iter()
                        .filter(|c| shares[c.index()] < spec.trim)
                        .map(|c| c.label().to_string())
                        .collect();
                    if !low.is_empty() {
                        findings.push(Finding {
                            severity: Severity::Warning,
                            message: format!("(g={g}, t={t}) cells below share {}: {}", spec.trim, low.join(", ")),
                        });
                    }
                    pairs.push(PairReport { g, t, counts: cells.counts, shares, low_share_cells: low, error: None });
                }
                Err(e) => {
                    findings.push(Finding { severity: Severity::Fatal, message: format!("(g={g}, t={t}) {e}") });
                    pairs.push(PairReport {
                        g,
                        t,
                        counts: [0; 4],
                        shares: [0.0; 4],
                        low_share_cells: Vec::new(),
                        error: Some(e.to_string()),
                    });
                }
            }
        }
    }
    if pairs.is_empty() {
        findings.push(Finding { severity: Severity::Fatal, message: "no estimable (g, t) pairs".into() });
    }
    findings.push(Finding {
        severity: Severity::Info,
        message: "treatment is derived as W_t = 1[t >= cohort], so irreversibility holds by construction".into(),
    });
    let pass = !findings.iter().any(|f| f.severity == Severity::Fatal);
    ValidationReport { comparison, trim: spec.trim, pairs, findings, pass }
}

// ---------------------------------------------------------------------------
// Estimation problem
// ---------------------------------------------------------------------------

/// Everything an estimator needs for one panel (g, t) problem.
#[derive(Debug, Clone)]
pub struct Problem {
    pub cells: CellIndicators,
    pub ids: Vec<String>,
    /// `Y_t - Y_{g-1}` per included unit (level `Y` for repeated cross-sections).
    pub dy: Vec<f64>,
    /// Propensity covariates, no intercept column.
    pub x_ps: DMatrix<f64>,
    /// Outcome-model covariates, no intercept column.
    pub x_or: DMatrix<f64>,
    pub ps_names: Vec<String>,
    pub or_names: Vec<String>,
}

impl Problem {
    pub fn n(&self) -> usize {
        self.dy.len()
    }

    pub fn restrict(&self, keep: &[bool]) -> Result<Problem> {
        let rows: Vec<usize> = (0..keep.len()).filter(|&i| keep[i]).collect();
        Ok(Problem {
            cells: self.cells.restrict(keep)?,
            ids: rows.iter().map(|&i| self.ids[i].clone()).collect(),
            dy: rows.iter().map(|&i| self.dy[i]).collect(),
            x_ps: self.x_ps.select_rows(rows.iter()),
            x_or: self.x_or.select_rows(rows.iter()),
            ps_names: self.ps_names.clone(),
            or_names: self.or_names.clone(),
        })
    }
}

pub(crate) fn covariate_indices(
    available: &[String],
    wanted: Option<&Vec<String>>,
) -> Result<(Vec<usize>, Vec<String>)> {
    match wanted {
        None => Ok(((0..available.len()).collect(), available.to_vec())),
        Some(names) => {
            let idx = names
                .iter()
                .map(|n| {
                    available
                        .iter()
                        .position(|a| a == n)
                        .ok_or_else(|| Error::Schema(format!("unknown covariate '{n}'")))
                })
                .collect::<Result<Vec<_>>>()?;
            Ok((idx, names.clone()))
        }
    }
}

pub(crate) type Selection = (Vec<usize>, Vec<String>);

pub(crate) fn design_covariates(spec: &DesignSpec, available: &[String]) -> Result<(Selection, Selection)> {
    let ps = covariate_indices(available, spec.ps_covariates.as_ref().or(spec.covariates.as_ref()))?;
    let or = covariate_indices(available, spec.or_covariates.as_ref().or(spec.covariates.as_ref()))?;
    Ok((ps, or))
}

/// Builds cells, outcome changes and covariate matrices for a panel problem.
pub fn prepare_problem(data: &PanelDataset, g: i64, t: i64, spec: &DesignSpec) -> Result<Problem> {
    let cells = build_cells(data, g, t, spec)?;
    let jt = data.time_index(t).expect("checked by build_cells");
    let jb = data.time_index(g - 1).expect("checked by build_cells");
    let ((ps_idx, ps_names), (or_idx, or_names)) = design_covariates(spec, &data.covariate_names)?;
    let units: Vec<&UnitRecord> = cells.included.iter().map(|&i| &data.units[i]).collect();
    let dy = units.iter().map(|u| u.y[jt] - u.y[jb]).collect();
    let ids = units.iter().map(|u| u.unit_id.clone()).collect();
    let x_ps = DMatrix::from_fn(units.len(), ps_idx.len(), |i, j| units[i].x[ps_idx[j]]);
    let x_or = DMatrix::from_fn(units.len(), or_idx.len(), |i, j| units[i].x[or_idx[j]]);
    Ok(Problem { cells, ids, dy, x_ps, x_or, ps_names, or_names })
}
