use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{function} is undefined at {value}")]
    Domain { function: &'static str, value: f64 },

    #[error("invalid ranking: {0}")]
    InvalidRanking(String),

    #[error("invalid support vector: {0}")]
    InvalidSupport(String),

    /// A Plackett-Luce denominator `1 - sum(prefix)` collapsed to zero.
    #[error("Plackett-Luce denominator {denominator:e} at rank level {level} is not positive")]
    Structural { level: usize, denominator: f64 },

    #[error("cannot draw {requested} rank levels: only {available} alternatives have positive weight")]
    InsufficientSupport { requested: usize, available: usize },

    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("enumeration needs {needed} configurations for one individual, budget is {budget}")]
    EnumerationBudget { needed: f64, budget: f64 },

    #[error("every subgroup gives zero probability to the selection at slot {slot}")]
    ZeroResponsibility { slot: usize },

    #[error("{path}:{line}: {message}")]
    Parse { path: PathBuf, line: u64, message: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
