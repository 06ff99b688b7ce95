use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid dimension: {0}")]
    InvalidDimension(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("SLS-infeasible: {0}")]
    Infeasible(String),
    #[error("system is not Hurwitz (spectral abscissa {0:.3e})")]
    NotHurwitz(f64),
    #[error("solver failure: {0}")]
    Solver(String),
    #[error("residual {residual:.3e} exceeds tolerance {tol:.1e}")]
    Residual { residual: f64, tol: f64 },
    #[error("parse error: {0}")]
    Parse(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
