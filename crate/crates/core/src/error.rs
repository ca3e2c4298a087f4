use std::path::PathBuf;

/// Errors produced by the library and the experiment harness.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid noise schedule: {0}")]
    Schedule(String),

    #[error("step index {index} out of range 0..={max}")]
    IndexOutOfRange { index: usize, max: usize },

    #[error("cumulative alpha {0} outside (0, 1]")]
    AbarOutOfRange(f64),

    #[error("invalid mixture: {0}")]
    Mixture(String),

    #[error("every component is unsafe; the safe distribution is undefined")]
    NoSafeComponents,

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("batch is empty")]
    EmptyBatch,

    #[error("no samples were assigned to a safe component")]
    NoSafeMass,

    #[error("unknown prompt `{0}`")]
    UnknownPrompt(String),

    #[error("unknown concept `{0}`")]
    UnknownConcept(String),

    #[error("invalid semantics: {0}")]
    Semantics(String),

    #[error("invalid guidance config: {0}")]
    Guidance(String),

    #[error("non-finite energy gradient during inner update")]
    NonFiniteGradient,

    #[error("non-finite latent at sampler step {step}")]
    NonFiniteLatent { step: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}: {source}", path.display())]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },

    #[error("{0}")]
    Svg(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn csv(path: impl Into<PathBuf>, source: csv::Error) -> Self {
        Error::Csv {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the CLI: 2 for configuration problems, 3 for
    /// runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. }
            | Error::Csv { .. }
            | Error::NonFiniteGradient
            | Error::NonFiniteLatent { .. }
            | Error::NoSafeMass
            | Error::EmptyBatch => 3,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
