use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("index {index} out of range for {what} (len {len})")]
    Index {
        what: &'static str,
        index: usize,
        len: usize,
    },

    #[error("structural mismatch: {0}")]
    Structure(String),

    #[error("chain diverged at step {t}: {detail}")]
    Diverged { t: usize, detail: String },

    #[error("solver diverged at iteration {iteration}: {detail}")]
    SolverDiverged { iteration: usize, detail: String },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("parse error at line {line}: {detail}")]
    Parse { line: usize, detail: String },

    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
