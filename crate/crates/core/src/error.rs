//! Crate-wide error type.

use crate::env::EnvError;
use crate::nn::NnError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("missing artifact: {0}")]
    MissingArtifact(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Format { path: String, line: usize, message: String },
}

impl Error {
    pub fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        if source.kind() == std::io::ErrorKind::NotFound {
            return Error::MissingArtifact(path.display().to_string());
        }
        Error::Io {
            path: path.display().to_string(),
            source,
        }
    }

    /// True when a required input file does not exist.
    pub fn is_missing_artifact(&self) -> bool {
        match self {
            Error::MissingArtifact(_) => true,
            Error::Nn(NnError::Io(_, e)) => e.kind() == std::io::ErrorKind::NotFound,
            _ => false,
        }
    }

    /// True for failures caused by NaN or infinite values.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::Numerical(_) | Error::Nn(NnError::NonFinite(_)))
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Deterministic seed mixing (SplitMix64 finalizer over `base` and `stream`).
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
