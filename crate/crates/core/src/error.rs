//! Error type shared by every module.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Coarse error class, mapped to CLI exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Usage,
    Data,
    Numerical,
    Design,
}

impl ErrorClass {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorClass::Usage => 2,
            ErrorClass::Data => 3,
            ErrorClass::Numerical => 4,
            ErrorClass::Design => 5,
        }
    }

    pub fn code(self) -> &'static str {
        match self {
            ErrorClass::Usage => "usage",
            ErrorClass::Data => "data",
            ErrorClass::Numerical => "numerical",
            ErrorClass::Design => "design_degenerate",
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("schema error: {0}")]
    Schema(String),
    #[error("unbalanced panel: unit {unit} {detail}")]
    Balance { unit: String, detail: String },
    #[error("parse error at row {row}, column {column}: {detail}")]
    Parse { row: usize, column: String, detail: String },
    #[error("invalid data: {0}")]
    InvalidData(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("arity mismatch: expected {expected} entries, got {got}")]
    Arity { expected: usize, got: usize },
    #[error("domain error: {0}")]
    Domain(String),
    #[error("degenerate design: {0}")]
    Degenerate(String),
    #[error("no never-treated units for comparison=never (g={g}, t={t}); use comparison=notyet")]
    NoNeverTreated { g: i64, t: i64 },
    #[error("overlap violation: {count} units with denominator propensity below {eps} (first: {units:?})")]
    Trim { count: usize, eps: f64, units: Vec<String> },
    #[error("multinomial logit did not converge: gradient max-norm {grad_norm:e} after {iterations} iterations")]
    NonConvergence { grad_norm: f64, iterations: usize },
    #[error("collinear design columns: {columns:?}")]
    Collinear { columns: Vec<String> },
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("monte carlo failure: {failed} of {trials} trials failed (first error: {first})")]
    MonteCarlo { failed: usize, trials: usize, first: String },
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Usage(_) => ErrorClass::Usage,
            Error::Io { .. }
            | Error::Schema(_)
            | Error::Balance { .. }
            | Error::Parse { .. }
            | Error::InvalidData(_)
            | Error::Arity { .. }
            | Error::Domain(_) => ErrorClass::Data,
            Error::NonConvergence { .. } | Error::Collinear { .. } | Error::Numerical(_) | Error::MonteCarlo { .. } => {
                ErrorClass::Numerical
            }
            Error::Degenerate(_) | Error::NoNeverTreated { .. } | Error::Trim { .. } => ErrorClass::Design,
        }
    }

    pub(crate) fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
