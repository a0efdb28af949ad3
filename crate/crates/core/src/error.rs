use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("invalid probability data in {context}: {detail}")]
    InvalidProbability {
        context: &'static str,
        detail: String,
    },

    #[error("domain error: {0}")]
    Domain(String),

    /// Dual ascent ran out of iterations without reaching `G <= epsilon`.
    #[error(
        "dual ascent did not reach feasibility after {iterations} iterations \
         (last G = {last_g:.6e}, lambda = {lambda:.6e})"
    )]
    DualAscent {
        iterations: usize,
        last_g: f64,
        lambda: f64,
    },

    #[error("no contraction value in the grid up to {cap} gives a feasible problem (last G = {last_g:.6e})")]
    Infeasible { cap: f64, last_g: f64 },

    #[error("episode {episode}: {source}")]
    Episode {
        episode: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("offline solver did not converge within {iterations} iterations (last step {last_step:.3e}, periodicity defect {defect:.3e}); raise the budget or relax the tolerance")]
    NonConvergence {
        iterations: usize,
        last_step: f64,
        defect: f64,
    },

    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },

    #[error("schema mismatch in {path}: column {column}")]
    Schema { path: PathBuf, column: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn at_episode(self, episode: usize) -> Self {
        Error::Episode {
            episode,
            source: Box::new(self),
        }
    }
}
