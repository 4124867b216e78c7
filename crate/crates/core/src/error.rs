use thiserror::Error;

/// Errors raised by the estimation pipeline.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// An argument lies outside the domain of the function.
    #[error("domain error: {0}")]
    Domain(String),

    /// Input data violates a structural invariant.
    #[error("validation error: {0}")]
    Validation(String),

    /// A score cell where the normalization constant is below the log score.
    #[error("validation error: row {row}, expert '{expert}': normalization constant a={a} is below log score {score}")]
    ScoreAboveMaximum {
        row: usize,
        expert: String,
        a: f64,
        score: f64,
    },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// Cholesky factorization failed even after adding jitter.
    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("configuration error: {0}")]
    Config(String),

    /// The sampler hit a non-finite gradient at a finite log density.
    #[error("sampler aborted: non-finite gradient in chain {chain} at position {position:?}")]
    NonFiniteGradient { chain: usize, position: Vec<f64> },
}

impl Error {
    /// True for errors that originate in floating point trouble rather than bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::Numerical(_) | Error::NonFiniteGradient { .. })
    }
}

pub type Result<T> = std::result::Result<T, Error>;
