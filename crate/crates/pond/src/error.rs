//! Crate-wide error type and process exit-code policy.

use std::fmt;
use std::path::{Path, PathBuf};

/// Everything that can go wrong across the pipeline.
///
/// Variants are grouped by how the CLI reports them: configuration problems
/// exit with code 2, I/O and artifact-format problems with code 3, and
/// numeric failures surfaced by the autodiff engine with code 4.
#[derive(Debug)]
pub enum PondError {
    /// Invalid configuration: bad hyperparameter ranges, malformed config
    /// JSON, inconsistent geometry between config and data.
    Config { detail: String },
    /// An underlying filesystem operation failed.
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    /// The file does not start with the expected magic bytes.
    BadMagic { path: PathBuf },
    /// The file ends before the declared payload or trailer is complete.
    Truncated { path: PathBuf, detail: String },
    /// The payload checksum does not match the stored trailer.
    Checksum { path: PathBuf },
    /// The embedded header is malformed or inconsistent with the payload.
    Header { path: PathBuf, detail: String },
    /// Two artifacts that must share a geometry (model vs. dataset vs.
    /// prompt state) disagree.
    Incompatible { detail: String },
    /// A numeric failure (non-finite value, shape violation) inside the
    /// computation graph.
    Numeric { source: numgrad::Error },
}

impl PondError {
    /// Convenience constructor for configuration errors.
    pub fn config(detail: impl Into<String>) -> Self {
        PondError::Config {
            detail: detail.into(),
        }
    }

    /// Convenience constructor for geometry mismatches.
    pub fn incompatible(detail: impl Into<String>) -> Self {
        PondError::Incompatible {
            detail: detail.into(),
        }
    }

    /// Attach a path to an I/O error.
    pub fn io(path: impl AsRef<Path>, source: std::io::Error) -> Self {
        PondError::Io {
            path: path.as_ref().to_path_buf(),
            source,
        }
    }

    /// Process exit code the CLI uses for this error.
    ///
    /// 2 = configuration, 3 = I/O or artifact format, 4 = numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            PondError::Config { .. } => 2,
            PondError::Io { .. }
            | PondError::BadMagic { .. }
            | PondError::Truncated { .. }
            | PondError::Checksum { .. }
            | PondError::Header { .. }
            | PondError::Incompatible { .. } => 3,
            PondError::Numeric { .. } => 4,
        }
    }
}

impl fmt::Display for PondError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PondError::Config { detail } => write!(f, "invalid configuration: {detail}"),
            PondError::Io { path, source } => {
                write!(f, "i/o error on {}: {source}", path.display())
            }
            PondError::BadMagic { path } => {
                write!(f, "{}: not a recognized artifact (bad magic)", path.display())
            }
            PondError::Truncated { path, detail } => {
                write!(f, "{}: truncated file ({detail})", path.display())
            }
            PondError::Checksum { path } => {
                write!(f, "{}: payload checksum mismatch", path.display())
            }
            PondError::Header { path, detail } => {
                write!(f, "{}: invalid header ({detail})", path.display())
            }
            PondError::Incompatible { detail } => {
                write!(f, "incompatible artifacts: {detail}")
            }
            PondError::Numeric { source } => write!(f, "numeric failure: {source}"),
        }
    }
}

impl std::error::Error for PondError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            PondError::Io { source, .. } => Some(source),
            PondError::Numeric { source } => Some(source),
            _ => None,
        }
    }
}

impl From<numgrad::Error> for PondError {
    fn from(source: numgrad::Error) -> Self {
        PondError::Numeric { source }
    }
}
