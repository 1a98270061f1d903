use thiserror::Error;

use crate::model::Violation;
use crate::optimize::SolveOutcome;

/// Crate-wide error type.
///
/// Validation findings are *data* (`Vec<Violation>`); they only become an
/// error when an operation that requires a usable model is handed one that
/// is not.
#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid model: {}", format_violations(.0))]
    InvalidModel(Vec<Violation>),

    #[error("unstable queue `{queue}`: offered load {offered} >= capacity {capacity}")]
    Unstable {
        queue: String,
        offered: f64,
        capacity: f64,
    },

    #[error("truncation insufficient: {0}")]
    TruncationInsufficient(String),

    #[error("state budget exceeded: {0}")]
    StateBudgetExceeded(String),

    #[error("unsupported oracle: {0}")]
    UnsupportedOracle(String),

    #[error("reducible chain: {0}")]
    ReducibleChain(String),

    #[error("solver did not converge: {message}")]
    NonConvergence {
        message: String,
        /// Best iterate reached before giving up.
        best: Box<SolveOutcome>,
    },

    #[error("inconsistent dual pair: {0}")]
    InconsistentDual(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("degenerate model: {0}")]
    DegenerateModel(String),

    #[error("no samples: {0}")]
    NoSamples(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// CLI exit code: 1 for input/validation problems, 2 for numerical ones.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Domain(_)
            | Error::InvalidModel(_)
            | Error::Parse(_)
            | Error::NoSamples(_)
            | Error::Io(_) => 1,
            Error::Unstable { .. }
            | Error::TruncationInsufficient(_)
            | Error::StateBudgetExceeded(_)
            | Error::UnsupportedOracle(_)
            | Error::ReducibleChain(_)
            | Error::NonConvergence { .. }
            | Error::InconsistentDual(_)
            | Error::Numerical(_)
            | Error::DegenerateModel(_) => 2,
        }
    }
}

fn format_violations(violations: &[Violation]) -> String {
    violations
        .iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join("; ")
}

pub type Result<T> = std::result::Result<T, Error>;
