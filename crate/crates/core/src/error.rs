use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("unknown system `{0}` (expected one of lorenz, chua, rossler, chen, lu)")]
    UnknownSystem(String),

    #[error("system `{system}` has no parameter `{key}`")]
    UnknownParameter { system: String, key: String },

    #[error("dimension mismatch: expected {expected}, got {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("length mismatch: {left} vs {right} samples")]
    LengthMismatch { left: usize, right: usize },

    #[error("system `{0}` is a hybrid and needs an embedding parameter")]
    MissingLambda(String),

    #[error("system `{0}` is not a hybrid and takes no embedding parameter")]
    UnexpectedLambda(String),

    #[error("embedding parameter {0} lies outside [0, 1]")]
    LambdaOutOfBounds(f64),

    #[error("state left the admissible region at step {step}")]
    Overflow { step: usize },

    #[error("misfit must be non-negative, got {0}")]
    NegativeMisfit(f64),

    #[error("Gram matrix is singular; use a positive regularization weight tau")]
    RankDeficient,

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("{}: {message}", match line { Some(l) => format!("config line {l}"), None => "config".to_string() })]
    Config { line: Option<usize>, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn is_config(&self) -> bool {
        matches!(
            self,
            Error::Config { .. }
                | Error::UnknownSystem(_)
                | Error::UnknownParameter { .. }
                | Error::MissingLambda(_)
                | Error::UnexpectedLambda(_)
                | Error::LambdaOutOfBounds(_)
        )
    }
}
