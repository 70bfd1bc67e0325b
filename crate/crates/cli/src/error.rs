use flurlab::FlurError;
use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config file {0} does not exist")]
    ConfigNotFound(PathBuf),
    #[error("config file {path}: {message}")]
    ConfigInvalid { path: PathBuf, message: String },
    #[error("input file {0} does not exist")]
    InputNotFound(PathBuf),
    #[error("input: {0}")]
    InputInvalid(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("{0}")]
    Library(#[from] FlurError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("{failed} of {total} experiment tests failed")]
    TestsFailed { failed: usize, total: usize },
}

impl CliError {
    pub fn code(&self) -> &'static str {
        match self {
            CliError::ConfigNotFound(_) => "config_not_found",
            CliError::ConfigInvalid { .. } => "config_invalid",
            CliError::InputNotFound(_) => "input_not_found",
            CliError::InputInvalid(_) => "input_invalid",
            CliError::Argument(_) => "invalid_argument",
            CliError::Io(_) => "io",
            CliError::TestsFailed { .. } => "tests_failed",
            CliError::Library(e) => match e {
                FlurError::Domain(_) => "domain",
                FlurError::Config(_) => "config_invalid",
                FlurError::DegenerateProfile => "degenerate_profile",
                FlurError::RankDeficient(_) => "rank_deficient",
                FlurError::NonConvergence(_) => "non_convergence",
                FlurError::NotPositiveDefinite { .. } => "not_positive_definite",
                FlurError::Divergence(_) => "divergence",
                FlurError::NegativeEmbedding(_) => "negative_embedding",
            },
        }
    }

    /// 1 for bad input, 2 for numerical failure, 3 for failed experiment tests.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::TestsFailed { .. } => 3,
            CliError::Library(e) if !e.is_validation() => 2,
            CliError::Io(_) => 2,
            _ => 1,
        }
    }
}
