//! Report files.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::Serialize;
use triplediff::simlab::McReport;
use triplediff::{EffectEstimate, Error, Result};

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io { path: path.display().to_string(), source }
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let path = dir.join(name);
    File::create(&path).map(BufWriter::new).map_err(io_err(&path))
}

pub fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<()> {
    let mut w = create(dir, name)?;
    serde_json::to_writer_pretty(&mut w, value)
        .map_err(|e| Error::Numerical(format!("cannot serialize {name}: {e}")))?;
    writeln!(w).and_then(|_| w.flush()).map_err(io_err(&dir.join(name)))
}

#[derive(Serialize)]
struct EstimateReport<'a> {
    effects: &'a [EffectEstimate],
}

/// `report.json` with full estimates and `report.csv` with the flat table.
pub fn write_estimates(dir: &Path, effects: &[EffectEstimate]) -> Result<()> {
    write_json(dir, "report.json", &EstimateReport { effects })?;
    let path = dir.join("report.csv");
    let mut w = csv::Writer::from_writer(create(dir, "report.csv")?);
    let csv_err = |e: csv::Error| Error::Numerical(format!("cannot write {}: {e}", path.display()));
    w.write_record(["estimand", "estimator", "comparison", "g", "t", "estimate", "se", "ci_lo", "ci_hi"])
        .map_err(csv_err)?;
    for e in effects {
        w.write_record([
            e.estimand.to_string(),
            e.estimator.to_string(),
            e.comparison.to_string(),
            e.g.to_string(),
            e.t.to_string(),
            e.estimate.to_string(),
            e.se.to_string(),
            e.ci_lo.to_string(),
            e.ci_hi.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(io_err(&path))
}

/// `mc_report.json`, `mc_report.csv` and optionally `trials.csv`.
pub fn write_mc_report(dir: &Path, report: &McReport, dump_trials: bool) -> Result<()> {
    let mut w = create(dir, "mc_report.json")?;
    w.write_all(report.to_json()?.as_bytes())
        .and_then(|_| writeln!(w))
        .and_then(|_| w.flush())
        .map_err(io_err(&dir.join("mc_report.json")))?;
    report.write_csv(create(dir, "mc_report.csv")?)?;
    if dump_trials {
        report.write_trials_csv(create(dir, "trials.csv")?)?;
    }
    Ok(())
}
