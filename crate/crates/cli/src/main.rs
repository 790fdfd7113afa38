//! `triplediff` command-line front end.

mod output;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use triplediff::simlab::{default_suite, run_monte_carlo_with, McOptions, SuiteEntry};
use triplediff::{
    estimate_cdatt, estimate_cdatt_rc, estimate_datt, load_panel, load_rc, mts_lower_bound, recover_att_unaffected,
    validate_design, ColumnMapping, Comparison, DesignSpec, DgpSpec, EffectEstimate, Error, Estimand, Estimator,
    PanelDataset, RepeatedCrossSection, Result,
};

#[derive(Debug, Parser)]
#[command(name = "triplediff", version, about = "Triple-difference (DATT / CDATT) estimation and simulation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Estimate DATT / CDATT effects from a CSV.
    Estimate(EstimateArgs),
    /// Run a seeded Monte Carlo study from a DGP spec.
    Simulate(SimulateArgs),
    /// Check cell counts and overlap for every (g, t) pair.
    Validate(ValidateArgs),
}

#[derive(Debug, Args)]
struct InputArgs {
    /// Long-format CSV (one row per unit and period, or per observation with --rc).
    #[arg(long)]
    data: PathBuf,
    /// Treat the input as repeated cross-sections.
    #[arg(long)]
    rc: bool,
    #[arg(long, default_value = "unit")]
    unit_col: String,
    #[arg(long, default_value = "time")]
    time_col: String,
    #[arg(long, default_value = "y")]
    y_col: String,
    #[arg(long, default_value = "cohort")]
    cohort_col: String,
    #[arg(long, default_value = "subgroup")]
    subgroup_col: String,
}

impl InputArgs {
    fn mapping(&self) -> ColumnMapping {
        ColumnMapping {
            unit: self.unit_col.clone(),
            time: self.time_col.clone(),
            outcome: self.y_col.clone(),
            cohort: self.cohort_col.clone(),
            subgroup: self.subgroup_col.clone(),
            covariates: None,
        }
    }
}

#[derive(Debug, Args)]
struct DesignArgs {
    /// JSON design file; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Targeted subgroup label.
    #[arg(long)]
    s: Option<String>,
    /// Reference subgroup label.
    #[arg(long)]
    sprime: Option<String>,
    /// notyet or never; defaults to never when never-treated units exist.
    #[arg(long)]
    comparison: Option<Comparison>,
    /// Overlap threshold on denominator propensities.
    #[arg(long)]
    trim: Option<f64>,
    /// Drop units below the overlap threshold instead of failing.
    #[arg(long)]
    trim_drop: bool,
    #[arg(long)]
    level: Option<f64>,
    /// Comma-separated covariates for both working models.
    #[arg(long, value_delimiter = ',')]
    covariates: Option<Vec<String>>,
}

#[derive(Debug, Args)]
struct EstimateArgs {
    #[command(flatten)]
    input: InputArgs,
    #[command(flatten)]
    design: DesignArgs,
    /// datt, cdatt, att_unaffected or both (datt and cdatt).
    #[arg(long, default_value = "cdatt")]
    estimand: String,
    /// unadjusted, 3wfe, ra, ipw or dr.
    #[arg(long)]
    estimator: Option<Estimator>,
    /// Treatment cohort; all estimable pairs when omitted.
    #[arg(long, requires = "t")]
    g: Option<i64>,
    #[arg(long, requires = "g")]
    t: Option<i64>,
    /// Population shares of s and s' among the treated, e.g. 0.4,0.6.
    #[arg(long, value_delimiter = ',')]
    shares: Option<Vec<f64>>,
    /// Also report the one-sided CDATT lower bound from the DATT.
    #[arg(long)]
    bound: bool,
    #[arg(long, env = "TRIPLEDIFF_OUT", default_value = "triplediff-out")]
    out: PathBuf,
    /// Worker threads across (g, t) pairs.
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    /// JSON DGP spec; the calibrated default when omitted.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long, default_value_t = 1000)]
    trials: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    threads: Option<usize>,
    /// Estimator suite as estimand:estimator pairs, e.g. cdatt:dr,datt:ipw.
    #[arg(long, value_delimiter = ',')]
    suite: Option<Vec<String>>,
    /// Also write every trial's estimates to trials.csv.
    #[arg(long)]
    dump_trials: bool,
    #[arg(long, env = "TRIPLEDIFF_OUT", default_value = "triplediff-out")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ValidateArgs {
    #[command(flatten)]
    input: InputArgs,
    #[command(flatten)]
    design: DesignArgs,
    /// Also write validation.json here.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Estimate(a) => run_estimate(a),
        Command::Simulate(a) => run_simulate(a),
        Command::Validate(a) => run_validate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.class().code());
            ExitCode::from(e.class().exit_code() as u8)
        }
    }
}

enum Data {
    Panel(PanelDataset),
    Rc(RepeatedCrossSection),
}

impl Data {
    fn load(input: &InputArgs) -> Result<Data> {
        let map = input.mapping();
        Ok(if input.rc { Data::Rc(load_rc(&input.data, &map)?) } else { Data::Panel(load_panel(&input.data, &map)?) })
    }

    fn validate(&self, spec: &DesignSpec) -> triplediff::ValidationReport {
        match self {
            Data::Panel(d) => validate_design(d, spec),
            Data::Rc(d) => validate_design(d, spec),
        }
    }
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|source| Error::Io { path: path.display().to_string(), source })
}

fn design_spec(args: &DesignArgs, estimand: Estimand, estimator: Estimator) -> Result<DesignSpec> {
    let mut spec = match &args.config {
        Some(path) => serde_json::from_str::<DesignSpec>(&read_text(path)?)
            .map_err(|e| Error::Usage(format!("{}: invalid design config: {e}", path.display())))?,
        None => {
            let s = args.s.as_deref().ok_or_else(|| Error::Usage("--s is required without --config".into()))?;
            let sp =
                args.sprime.as_deref().ok_or_else(|| Error::Usage("--sprime is required without --config".into()))?;
            DesignSpec::new(estimand, estimator, s, sp)
        }
    };
    spec.estimand = estimand;
    spec.estimator = estimator;
    if let Some(s) = &args.s {
        spec.s = s.clone();
    }
    if let Some(s) = &args.sprime {
        spec.sprime = s.clone();
    }
    if args.comparison.is_some() {
        spec.comparison = args.comparison;
    }
    if let Some(v) = args.trim {
        spec.trim = v;
    }
    spec.trim_drop |= args.trim_drop;
    if let Some(v) = args.level {
        spec.level = v;
    }
    if args.covariates.is_some() {
        spec.covariates = args.covariates.clone();
    }
    spec.validate()?;
    Ok(spec)
}

fn with_threads<T: Send>(threads: Option<usize>, work: impl FnOnce() -> T + Send) -> Result<T> {
    match threads {
        Some(k) => Ok(rayon::ThreadPoolBuilder::new()
            .num_threads(k.max(1))
            .build()
            .map_err(|e| Error::Usage(format!("cannot start {k} worker threads: {e}")))?
            .install(work)),
        None => Ok(work()),
    }
}

fn run_estimate(a: EstimateArgs) -> Result<()> {
    let estimands: Vec<Estimand> = match a.estimand.as_str() {
        "both" => vec![Estimand::Datt, Estimand::Cdatt],
        "att_unaffected" => vec![Estimand::Datt],
        other => match Estimand::from_str(other)? {
            e @ (Estimand::Datt | Estimand::Cdatt) => vec![e],
            e => return Err(Error::Usage(format!("--estimand {e} is not estimable directly"))),
        },
    };
    let wants_att = a.estimand == "att_unaffected";
    let shares = match (&a.shares, wants_att) {
        (Some(v), _) if v.len() == 2 => Some((v[0], v[1])),
        (Some(v), _) => return Err(Error::Usage(format!("--shares takes 2 values, got {}", v.len()))),
        (None, true) => return Err(Error::Usage("--estimand att_unaffected needs --shares".into())),
        (None, false) => None,
    };
    let data = Data::load(&a.input)?;
    let estimator = a.estimator.unwrap_or(Estimator::Dr);
    let mut jobs = Vec::new();
    for &estimand in &estimands {
        if estimand == Estimand::Cdatt && matches!(estimator, Estimator::Unadjusted | Estimator::ThreeWfe) {
            return Err(Error::Usage(format!("{estimator} does not estimate the CDATT; use ra, ipw or dr")));
        }
        if matches!(data, Data::Rc(_)) && (estimand, estimator) != (Estimand::Cdatt, Estimator::Dr) {
            return Err(Error::Usage("repeated cross-sections support only --estimand cdatt --estimator dr".into()));
        }
        let spec = design_spec(&a.design, estimand, estimator)?;
        let pairs = match (a.g, a.t) {
            (Some(g), Some(t)) => vec![(g, t)],
            _ => {
                let report = data.validate(&spec);
                report.pairs.iter().filter(|p| p.error.is_none()).map(|p| (p.g, p.t)).collect()
            }
        };
        if pairs.is_empty() {
            return Err(Error::Degenerate("no estimable (g, t) pairs".into()));
        }
        jobs.extend(pairs.into_iter().map(|(g, t)| (spec.clone(), g, t)));
    }
    let results: Vec<Result<EffectEstimate>> = with_threads(a.threads, || {
        jobs.par_iter()
            .map(|(spec, g, t)| match (&data, spec.estimand) {
                (Data::Rc(d), _) => estimate_cdatt_rc(d, *g, *t, spec),
                (Data::Panel(d), Estimand::Cdatt) => estimate_cdatt(d, *g, *t, spec, spec.estimator),
                (Data::Panel(d), _) => estimate_datt(d, *g, *t, spec, spec.estimator),
            })
            .collect()
    })?;
    let mut effects = Vec::new();
    for r in results {
        let e = r?;
        if e.estimand == Estimand::Datt {
            if let Some(sh) = shares {
                let (att_s, att_pop) = recover_att_unaffected(&e, sh)?;
                effects.push(att_s);
                effects.push(att_pop);
            }
            if a.bound {
                effects.push(mts_lower_bound(&e)?);
            }
        }
        if !(wants_att && e.estimand == Estimand::Datt) {
            effects.push(e);
        }
    }
    output::write_estimates(&a.out, &effects)?;
    for e in &effects {
        println!(
            "{:<14} {:<10} g={} t={} estimate={:.6} se={:.6} ci=[{:.6}, {:.6}] n={}",
            e.estimand.to_string(),
            e.estimator.to_string(),
            e.g,
            e.t,
            e.estimate,
            e.se,
            e.ci_lo,
            e.ci_hi,
            e.n
        );
    }
    Ok(())
}

fn parse_suite(items: &[String]) -> Result<Vec<SuiteEntry>> {
    items
        .iter()
        .map(|item| {
            let (l, r) = item
                .split_once(':')
                .ok_or_else(|| Error::Usage(format!("suite entry '{item}' is not estimand:estimator")))?;
            Ok(SuiteEntry { estimand: Estimand::from_str(l.trim())?, estimator: Estimator::from_str(r.trim())? })
        })
        .collect()
}

fn run_simulate(a: SimulateArgs) -> Result<()> {
    let spec = match &a.spec {
        Some(path) => {
            DgpSpec::from_json(&read_text(path)?).map_err(|e| Error::Usage(format!("{}: {}", path.display(), e)))?
        }
        None => DgpSpec::default(),
    };
    let suite = match &a.suite {
        Some(items) => parse_suite(items)?,
        None => default_suite(),
    };
    let options = McOptions { threads: a.threads, keep_trials: a.dump_trials };
    let report = run_monte_carlo_with(&spec, &suite, a.trials, a.seed, &options)?;
    output::write_mc_report(&a.out, &report, a.dump_trials)?;
    println!("{} trials, master seed {}", report.trials, report.master_seed);
    for r in &report.rows {
        let m = &r.metrics;
        println!(
            "{:<6} {:<10} {:<9} bias={:+.4} median={:+.4} rmse={:.4} se={:.4} cover={:.3} len={:.4} failed={}",
            r.estimand.to_string(),
            r.estimator.to_string(),
            r.target(),
            m.avg_bias,
            m.median_bias,
            m.rmse,
            m.mean_se,
            m.coverage,
            m.ci_length,
            r.failures
        );
    }
    report.check_failures()
}

fn run_validate(a: ValidateArgs) -> Result<()> {
    let data = Data::load(&a.input)?;
    let spec = design_spec(&a.design, Estimand::Cdatt, Estimator::Dr)?;
    let report = data.validate(&spec);
    print!("{}", report.to_text());
    if let Some(dir) = &a.out {
        output::write_json(dir, "validation.json", &report)?;
    }
    if report.pass {
        Ok(())
    } else {
        Err(Error::Degenerate("design validation failed".into()))
    }
}
