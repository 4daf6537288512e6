use thiserror::Error;

/// Errors raised by the solvers, the simulator and problem-file handling.
#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("O(K) is not positive definite at label {label} (t = {time}): min eigenvalue {min_eig:e}")]
    NotPositiveDefinite { label: usize, time: f64, min_eig: f64 },

    #[error("K lost positive semidefiniteness at label {label} (t = {time}): min eigenvalue {min_eig:e}")]
    NotPositiveSemidefinite { label: usize, time: f64, min_eig: f64 },

    #[error("solution blew up at t = {time}{}", label.map(|l| format!(" (label {l})")).unwrap_or_default())]
    BlowUp { label: Option<usize>, time: f64 },

    #[error("operator norm {norm:e} of the kernel solution exceeds the ceiling {ceiling:e} at t = {time}")]
    NormCeiling { time: f64, norm: f64, ceiling: f64 },

    #[error("kernel `{name}` is not flip-transpose symmetric (max deviation {deviation:e})")]
    Asymmetric { name: String, deviation: f64 },

    #[error("{location}: {message}")]
    Parse { location: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
