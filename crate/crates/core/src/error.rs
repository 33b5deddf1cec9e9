use thiserror::Error;

use crate::stokes::ConvergenceRecord;

#[derive(Debug, Error)]
pub enum Error {
    #[error("geometry error: {0}")]
    Geometry(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("linear solver failure: {0}")]
    LinearSolver(String),

    #[error("Newton solver did not converge after {} iterations (last residual {:.3e})", .0.iterations.len(), .0.final_residual())]
    NonConvergence(Box<ConvergenceRecord>),

    #[error("line search failed: {0}")]
    LineSearch(String),

    #[error("optimization did not converge: {0}")]
    Optimization(String),

    #[error("singular operator: {0}")]
    Singular(String),

    #[error("internal consistency check failed: {0}")]
    Consistency(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("missing artifact `{path}`; run the `{stage}` stage first")]
    MissingArtifact { path: String, stage: &'static str },

    #[error("parse error in {file}: {msg}")]
    Parse { file: String, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
