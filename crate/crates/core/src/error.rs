use thiserror::Error;

/// Errors produced by the estimation pipeline.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("parameter {name} = {value} is outside the domain of the {family} family")]
    ParamDomain {
        family: &'static str,
        name: &'static str,
        value: f64,
    },
    #[error("evaluation point {0} is outside the support")]
    OutsideSupport(f64),
    #[error("degenerate sample: {0}")]
    DegenerateSample(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("shape mismatch: expected {expected} values, got {got}")]
    Shape { expected: usize, got: usize },
    #[error("no convergence after {iterations} iterations (last iterate {last:?})")]
    Convergence { iterations: usize, last: [f64; 2] },
    #[error("realized Poisson sample is empty; redraw")]
    EmptySample,
    #[error("calibration failed for cluster(s) {0:?}")]
    Calibration(Vec<u32>),
    #[error("curvature matrix is not positive definite (eigenvalues {0:?})")]
    DegenerateCurvature([f64; 2]),
    #[error("too many rejected draws: {rejected} of {total}")]
    Unstable { rejected: usize, total: usize },
    #[error("design error: {0}")]
    Design(String),
    #[error("configuration error at `{key}`: {message}")]
    Config { key: String, message: String },
    #[error("schema error: {0}")]
    Schema(String),
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
