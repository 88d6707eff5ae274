use thiserror::Error;

use crate::model::Violation;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Bad input shape, unknown names, or out-of-range settings.
    #[error("configuration error: {0}")]
    Config(String),

    /// A market failed structural validation.
    #[error("invalid market `{market}`: {}", join_violations(.violations))]
    InvalidMarket {
        market: String,
        violations: Vec<Violation>,
    },

    /// Non-finite values or a numerically degenerate computation.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// The likelihood is flat in the parameters (e.g. no market has two accelerators).
    #[error("identification error: {0}")]
    Identification(String),

    /// Regressors that are linearly dependent on each other.
    #[error("collinear regressors: {}", .0.join(", "))]
    Collinear(Vec<String>),

    /// A brute-force reference computation refused to run or ran out of samples.
    #[error("oracle error: {0}")]
    Oracle(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }
}

fn join_violations(v: &[Violation]) -> String {
    v.iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join("; ")
}
