use thiserror::Error;

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),

    #[error("diverged: {0}")]
    Diverged(String),

    #[error("traces differ: {0}")]
    DiffFailed(String),

    #[error(transparent)]
    Core(parmcmc_core::Error),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

impl From<parmcmc_core::Error> for CliError {
    fn from(e: parmcmc_core::Error) -> Self {
        use parmcmc_core::Error as E;
        match e {
            E::Diverged { .. } | E::SolverDiverged { .. } => CliError::Diverged(e.to_string()),
            E::Config(msg) => CliError::Usage(msg),
            other => CliError::Core(other),
        }
    }
}

impl CliError {
    /// Process exit code: 1 usage, 2 divergence, 3 diff failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Diverged(_) => 2,
            CliError::DiffFailed(_) => 3,
            _ => 1,
        }
    }
}
