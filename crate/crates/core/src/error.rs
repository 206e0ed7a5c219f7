use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid architecture `{arch}`: {reason}")]
    InvalidArchitecture { arch: String, reason: String },

    #[error("budget fraction {0} is outside [0, 1]")]
    InvalidFraction(f64),

    #[error("plan does not match architecture: {0}")]
    PlanMismatch(String),

    #[error("corrupted plan: stored achieved_params {stored}, recomputed {recomputed}")]
    CorruptedPlan { stored: u64, recomputed: u64 },

    #[error("unknown domain `{0}`")]
    UnknownDomain(String),

    #[error("duplicate domain `{0}`")]
    DuplicateDomain(String),

    #[error("shape mismatch for `{name}`: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("missing tensor `{0}`")]
    MissingTensor(String),

    #[error("label {label} out of range for domain `{domain}` with {num_classes} classes")]
    LabelOutOfRange {
        domain: String,
        label: usize,
        num_classes: usize,
    },

    #[error("dataset for domain `{domain}` has an empty {split} split")]
    EmptySplit { domain: String, split: String },

    #[error("non-finite loss at round {round} on domain `{domain}`{}", dump.as_ref().map(|p| format!(" (state dumped to {})", p.display())).unwrap_or_default())]
    Diverged {
        round: usize,
        domain: String,
        dump: Option<PathBuf>,
    },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("unsupported schema version {found} (expected {expected})")]
    SchemaVersion { found: u32, expected: u32 },

    #[error("malformed {what}: {reason}")]
    Format { what: String, reason: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(what: impl Into<String>, reason: impl ToString) -> Self {
        Error::Format {
            what: what.into(),
            reason: reason.to_string(),
        }
    }
}
