use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("cell mask is empty")]
    EmptyMask,

    #[error("cell mask is not connected ({components} components)")]
    DisconnectedMask { components: usize },

    #[error("point {point:?} lies outside the closed domain")]
    OutsideDomain { point: [f64; 2] },

    #[error("conjugate gradient did not converge: {iterations} iterations, relative residual {residual:e}")]
    NotConverged { iterations: usize, residual: f64 },

    #[error("resolution mismatch: {0}")]
    ResolutionMismatch(String),

    #[error("invalid coefficient spec `{0}`")]
    Coefficient(String),

    #[error("config field `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("malformed field dump: {0}")]
    Dump(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    /// True for failures of the numerics, as opposed to bad input.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::NotConverged { .. })
    }
}
