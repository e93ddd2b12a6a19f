//! Crate-wide error type.

use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("dictionary atom {index} is zero or non-finite")]
    InvalidAtom { index: usize },

    #[error("dimension mismatch in {context}: expected {expected}, got {found}")]
    Dimension {
        context: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("{needed} candidate subsets exceed the exhaustive enumeration cap {cap}")]
    ExhaustiveCap { needed: u128, cap: usize },

    #[error("unsupported operation: {0}")]
    Unsupported(String),

    #[error(
        "restricted subproblem missed target accuracy {target:e}: \
         certificate {achieved:e} after {iters} iterations"
    )]
    SubproblemAccuracy {
        target: f64,
        achieved: f64,
        iters: usize,
    },

    #[error(
        "client {client} violates the well-conditioning requirement \
         2*rho_minus > rho_plus_bar (rho_minus = {rho_minus}, rho_plus_bar = {rho_plus_bar})"
    )]
    WellConditioning {
        client: usize,
        rho_minus: f64,
        rho_plus_bar: f64,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("round {round}, client {client}: {source}")]
    Client {
        round: usize,
        client: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("serialization failed: {0}")]
    Serialize(#[from] serde_json::Error),
}

impl Error {
    /// Annotates an error with the round and client where it occurred.
    pub fn at_client(self, round: usize, client: usize) -> Self {
        Error::Client {
            round,
            client,
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
