use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Every failure the pipeline can report.
#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix is not square ({rows}x{cols})")]
    NonSquare { rows: usize, cols: usize },
    #[error("matrix is not symmetric (max asymmetry {0:.3e})")]
    NotSymmetric(f64),
    #[error("iterative routine did not converge after {0} iterations")]
    NoConvergence(usize),
    #[error("cannot form {k} clusters from {points} points")]
    TooFewPoints { points: usize, k: usize },

    #[error("domain `{0}` has no samples")]
    EmptyDomain(String),
    #[error("I/O failure on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("format violation: {0}")]
    FormatViolation(String),
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },

    #[error("invalid cluster count k={k} for {m} domains")]
    InvalidK { k: usize, m: usize },
    #[error("similarity graph is degenerate (row {0} has no usable spectral coordinates)")]
    DisconnectedDegenerate(usize),
    #[error("CH score undefined for k={k} with {n} points")]
    DegenerateK { k: usize, n: usize },
    #[error("domain pool too small: {0} domains (need at least 4)")]
    PoolTooSmall(usize),

    #[error("sample {index} of domain `{domain}` has zero norm")]
    ZeroVector { domain: String, index: usize },
    #[error("{count} combinations exceed the cap of {cap}")]
    CombinatorialBlowup { count: u128, cap: u128 },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("loss is not finite: {0}")]
    NonFiniteLoss(f64),
    #[error("anchor {0} has no positive in the batch")]
    NoPositives(usize),
    #[error("image {height}x{width} is smaller than the 5x5 filter support")]
    ImageTooSmall { height: usize, width: usize },
    #[error("empty batch: {0}")]
    EmptyBatch(String),
    #[error("could not place {families} family centers at separation {separation} after {attempts} attempts")]
    InfeasibleSeparation {
        families: usize,
        separation: f64,
        attempts: usize,
    },

    #[error("invalid value for `{field}`: {message}")]
    Config { field: String, message: String },
    #[error("required artifact missing: {}", .0.display())]
    StageArtifactMissing(PathBuf),
    #[error("invalid input: {0}")]
    InvalidInput(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    /// Broad class used by the command-line driver to pick an exit code.
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config { .. } => ErrorClass::Config,
            Error::StageArtifactMissing(_) => ErrorClass::MissingArtifact,
            Error::NoConvergence(_)
            | Error::NonFiniteLoss(_)
            | Error::DisconnectedDegenerate(_)
            | Error::DegenerateK { .. }
            | Error::NotSymmetric(_) => ErrorClass::Numeric,
            _ => ErrorClass::Other,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    MissingArtifact,
    Numeric,
    Other,
}
