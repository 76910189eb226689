use thiserror::Error;

/// Errors produced by the estimation, selection and simulation routines.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid dataset: {0}")]
    InvalidDataset(String),

    #[error("evaluation point {point} lies outside the curve grid [{lo}, {hi}]")]
    ExtrapolationRefused { point: f64, lo: f64, hi: f64 },

    #[error("bandwidth must be positive, got {0}")]
    InvalidBandwidth(f64),

    #[error("only {available} observations carry kernel weight at u = {point}; at least {required} are needed")]
    InsufficientLocalData {
        point: f64,
        available: usize,
        required: usize,
    },

    #[error("invalid problem: {0}")]
    InvalidProblem(String),

    #[error("oracle limited to p <= {max_p} and rows <= {max_rows}; got p = {p}, rows = {rows}")]
    OracleTooLarge {
        p: usize,
        rows: usize,
        max_p: usize,
        max_rows: usize,
    },

    #[error("density vanishes at quantile level {tau}")]
    DegenerateDensity { tau: f64 },

    #[error("singular linear system: {0}")]
    Singular(String),

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("matrix is not positive semidefinite")]
    NotPositiveSemidefinite,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("unknown distribution '{name}'; valid names: {valid}")]
    UnknownDistribution { name: String, valid: String },
}

impl Error {
    /// True for failures of the numerics rather than of the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Singular(_) | Error::DegenerateDensity { .. } | Error::NotPositiveSemidefinite
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
