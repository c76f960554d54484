use thiserror::Error;

/// Errors raised by the deformation and fitting pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("format error: {0}")]
    Format(String),

    #[error("parse error at row {row}, column {column}: {message}")]
    Parse { row: usize, column: usize, message: String },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("parameter out of range: {0}")]
    Domain(String),

    #[error("site {site} has no exceedances of q = {q}")]
    NoExceedances { site: String, q: f64 },

    #[error("singular system: {0}")]
    Singular(String),

    #[error("non-finite likelihood contribution for pair ({i}, {j}) in branch {branch}")]
    NonFinite { i: usize, j: usize, branch: &'static str },

    #[error("optimizer failed to converge: {0}")]
    Convergence(String),
}

impl Error {
    /// True for errors caused by bad input or configuration rather than numerics.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            Error::Config(_)
                | Error::Format(_)
                | Error::Parse { .. }
                | Error::DimensionMismatch(_)
                | Error::Io(_)
                | Error::Csv(_)
                | Error::Json(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
