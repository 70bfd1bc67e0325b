use thiserror::Error;

/// Errors raised across the library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum FlurError {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("quadrature did not converge: {0}")]
    NonConvergence(String),
    #[error("matrix is not positive definite within the jitter budget (pivot {pivot})")]
    NotPositiveDefinite { pivot: usize },
    #[error("variance diverges: {0}")]
    Divergence(String),
    #[error("rank deficient design: smallest singular value {0:e}")]
    RankDeficient(f64),
    #[error("degenerate profile: residual sum of squares is flat in the knot")]
    DegenerateProfile,
    #[error("circulant embedding has a negative eigenvalue {0:e}")]
    NegativeEmbedding(f64),
    #[error("invalid configuration: {0}")]
    Config(String),
}

impl FlurError {
    /// True for errors caused by bad input rather than numerical trouble.
    pub fn is_validation(&self) -> bool {
        matches!(self, FlurError::Domain(_) | FlurError::Config(_) | FlurError::DegenerateProfile)
    }
}

pub type Result<T> = std::result::Result<T, FlurError>;

pub(crate) fn domain<T>(msg: impl Into<String>) -> Result<T> {
    Err(FlurError::Domain(msg.into()))
}
