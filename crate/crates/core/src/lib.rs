//! Triple-difference estimators for staggered designs.
//!
//! Two estimands are covered. The classical DATT contrasts subgroup ATTs and
//! picks up any gap in how the two subgroups respond to treatment. The causal
//! DATT (CDATT) reweights the second subgroup to the covariate distribution
//! of the first, so it isolates the effect of the targeting itself.
//! Both come with regression-adjustment, inverse-propensity and
//! doubly-robust estimators and influence-function standard errors.
//!
//! ```no_run
//! use triplediff::{load_panel, estimate_cdatt, ColumnMapping, DesignSpec, Estimand, Estimator};
//!
//! let data = load_panel("panel.csv", &ColumnMapping::default())?;
//! let spec = DesignSpec::new(Estimand::Cdatt, Estimator::Dr, "eligible", "ineligible");
//! let est = estimate_cdatt(&data, 2, 2, &spec, Estimator::Dr)?;
//! println!("{:.4} ({:.4})", est.estimate, est.se);
//! # Ok::<(), triplediff::Error>(())
//! ```

pub mod cdatt;
pub mod dataset;
pub mod datt;
pub mod error;
pub mod inference;
pub mod simlab;
pub mod working_models;

pub use cdatt::{estimate_cdatt, estimate_cdatt_rc, mts_lower_bound, recover_att_unaffected};
pub use dataset::{
    build_cells, load_panel, load_rc, prepare_problem, read_panel, read_rc, validate_design, write_panel, write_rc,
    Cell, CellIndicators, Cohort, ColumnMapping, Comparison, DesignSpec, Estimand, Estimator, PanelDataset,
    RcObservation, RepeatedCrossSection, UnitRecord, ValidationReport,
};
pub use datt::{estimate_datt, Diagnostics, EffectEstimate};
pub use error::{Error, ErrorClass, Result};
pub use inference::{aggregate_group_time, pairwise_covariance, AggregatedEffect};
pub use simlab::{generate_trial, run_monte_carlo, DgpSpec, McReport, TruthRecord};
