use thiserror::Error;

use crate::net::TransformerParams;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration at `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("prior truncation set of family {family} too tight: no accepted draw in {attempts} attempts")]
    Rejection { family: usize, attempts: usize },

    #[error("matrix lost positive definiteness ({0})")]
    NotPositiveDefinite(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("training diverged at step {step} (loss {loss})")]
    Diverged {
        step: usize,
        loss: f64,
        last_good: Box<TransformerParams<f64>>,
    },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("infeasible transport problem: {0}")]
    Infeasible(String),

    #[error("lattice with k={k}, m={m} has {size} points (limit {limit}); use a smaller k or m")]
    LatticeTooLarge {
        k: usize,
        m: usize,
        size: u128,
        limit: u128,
    },

    #[error("point {0:?} lies outside the grid domain")]
    OutsideDomain(Vec<f64>),

    #[error("lattice cache is missing entries: {0}")]
    MissingCache(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            message: message.into(),
        }
    }
}
