use thiserror::Error;

use crate::model::CoreId;

#[derive(Debug, Error)]
pub enum LedgerError {
    #[error("core {core}: {field} would go negative ({current} - {amount})")]
    Underflow {
        core: CoreId,
        field: &'static str,
        current: String,
        amount: String,
    },
    #[error("bandwidth underflow: {current} - {amount}")]
    Negative { current: String, amount: String },
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("ledger corruption: {0}")]
    Ledger(#[from] LedgerError),
    #[error("invariant violated at t={time}: {message}")]
    Invariant {
        time: String,
        message: String,
        /// Last trace records before the violation, oldest first.
        tail: Vec<String>,
    },
    #[error("configuration error: {0}")]
    Config(String),
}

#[derive(Debug, Error)]
pub enum GenError {
    #[error("uunifast-discard gave up after {0} consecutive discards")]
    TooManyDiscards(u64),
    #[error("scenario generation gave up after {attempts} discards (last reason: {reason})")]
    Exhausted { attempts: u64, reason: String },
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Gen(#[from] GenError),
    #[error("{path}: {message}")]
    Config { path: String, message: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
