use std::path::PathBuf;

/// Unified error type for the whole core.
///
/// Variants are grouped by how a driver should report them: configuration
/// and validation problems, numeric failures during optimization, and
/// filesystem / serialization trouble.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A tensor or model dimension did not line up.
    #[error("{op}: {axis}: expected {expected}, got {got}")]
    Dimension {
        op: &'static str,
        axis: &'static str,
        expected: usize,
        got: usize,
    },

    /// Rejected configuration value or combination.
    #[error("config: {0}")]
    Config(String),

    /// Invalid input data handed to an operation.
    #[error("invalid input: {0}")]
    Invalid(String),

    /// Numeric breakdown (non-finite loss, exploding parameters, ...).
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// Malformed on-disk artifact (scene file, checkpoint, graph, raster).
    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },

    /// Underlying I/O failure.
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Rejection sampling could not place the requested entities.
    #[error(
        "scene generation gave up after {attempts} placement attempts (seed {seed}); \
         loosen entity count, size range, or overlap limit"
    )]
    Placement { attempts: u32, seed: u64 },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format { path: path.into(), msg: msg.into() }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
