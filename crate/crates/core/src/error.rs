use thiserror::Error;

use crate::bpi::Phase;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("expected a square matrix, got {rows}x{cols}")]
    NonSquare { rows: usize, cols: usize },

    #[error("matrix is not symmetric (max asymmetry {asymmetry:e})")]
    Asymmetric { asymmetry: f64 },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("assumption violated: {0}")]
    Admissibility(String),

    #[error("gain is not stabilizing (spectral abscissa {abscissa:e})")]
    NotStabilizing { abscissa: f64 },

    #[error("generalized Lyapunov operator is singular (condition number {cond:e})")]
    SingularOperator { cond: f64 },

    #[error("{what} is not positive definite (min eigenvalue {min_eig:e})")]
    NonInvertible { what: &'static str, min_eig: f64 },

    #[error("value matrix is not positive definite (min eigenvalue {min_eig:e})")]
    NonPositiveP { min_eig: f64 },

    #[error("Sylvester spectra are resonant (min |lambda_i + mu_j| = {gap:e})")]
    ResonantSpectra { gap: f64 },

    #[error("eigenvalue computation failed: {0}")]
    EigenFailure(String),

    #[error(
        "initial condition violated: gamma = {gamma} must exceed zero-gain threshold {threshold} + alpha0 = {alpha0}"
    )]
    InitConditionViolated { gamma: f64, threshold: f64, alpha0: f64 },

    #[error("{phase} did not terminate within {max_iter} iterations")]
    MaxIterExceeded { phase: Phase, max_iter: usize },

    #[error("state blow-up on path {path} at t = {time}")]
    Blowup { path: usize, time: f64 },

    #[error("window out of range: {0}")]
    WindowOutOfRange(String),

    #[error("regressor is rank deficient: rank {rank} < required {required}")]
    RankDeficient {
        required: usize,
        rank: usize,
        singular_values: Vec<f64>,
    },

    #[error("alpha failed to increase for {0} consecutive iterations")]
    DivergedAlpha(usize),

    #[error("shadow pair (A_a, B) is not controllable (rank {rank} < {n})")]
    ShadowUncontrollable { rank: usize, n: usize },

    #[error("shadow learning requires D = 0 and zero plant input: {0}")]
    ShadowPrecondition(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("schema version mismatch: expected {expected}, found {found}")]
    SchemaVersion { expected: String, found: String },

    #[error("checksum mismatch for {0}")]
    Checksum(String),

    #[error("malformed data file {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit status used by the command-line runner.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_)
            | Error::SchemaVersion { .. }
            | Error::Admissibility(_)
            | Error::Dimension(_)
            | Error::Json(_) => 2,
            Error::RankDeficient { .. } => 3,
            Error::MaxIterExceeded { .. }
            | Error::InitConditionViolated { .. }
            | Error::ShadowPrecondition(_)
            | Error::ShadowUncontrollable { .. } => 5,
            _ => 4,
        }
    }
}
