//! Crate-wide error type and exit-code mapping for the CLI.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Rotation angle is within 1e-6 of pi, where the matrix logarithm is
    /// multivalued.
    #[error("rotation angle within 1e-6 of pi; logarithm is ill-defined")]
    AngleNearPi,

    #[error("information matrix is singular or not positive definite")]
    SingularInfo,

    #[error("innovation covariance is not invertible")]
    SingularInnovation,

    #[error("posterior information matrix failed the positive-definite tolerance")]
    SingularPosterior,

    #[error("{given} targets exceed the configured maximum of {max}")]
    TooManyTargets { given: usize, max: usize },

    #[error("forward cache does not match the given parameters")]
    StaleCache,

    #[error("non-finite gradient in episode {episode} (scenario seed {seed})")]
    NonFiniteGradient { seed: u64, episode: u64 },

    #[error("checkpoint checksum mismatch")]
    ChecksumMismatch,

    #[error("invalid checkpoint: {0}")]
    BadCheckpoint(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code for the CLI: 2 invalid config, 3 non-finite
    /// gradient, 4 corrupt checkpoint, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidConfig(_) => 2,
            Error::NonFiniteGradient { .. } => 3,
            Error::ChecksumMismatch | Error::BadCheckpoint(_) => 4,
            _ => 1,
        }
    }
}
