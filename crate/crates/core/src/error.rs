use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the toolkit.
#[derive(Debug, Error)]
pub enum FaarError {
    #[error("empty tensor: {0}")]
    EmptyTensor(&'static str),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("negative magnitude {0} passed to find_interval")]
    NegativeMagnitude(f64),

    #[error("non-positive or non-finite value {0} cannot be rounded to E4M3")]
    InvalidE4m3Input(f64),

    #[error("invalid probability distribution: {0}")]
    InvalidDistribution(String),

    #[error("step {step} exceeds schedule length {total}")]
    StepOutOfRange { step: usize, total: usize },

    #[error("too many free weights for brute force: {n} > max_n = {max_n}")]
    TooManyWeights { n: usize, max_n: usize },

    #[error("optimization diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },

    #[error("malformed header in {path}: {detail}")]
    MalformedHeader { path: PathBuf, detail: String },

    #[error("truncated payload in {path}: expected {expected} bytes, found {found}")]
    TruncatedPayload {
        path: PathBuf,
        expected: usize,
        found: usize,
    },

    #[error("trailing bytes in {path}: expected {expected} bytes, found {found}")]
    TrailingBytes {
        path: PathBuf,
        expected: usize,
        found: usize,
    },

    #[error("dtype mismatch in {path}: expected {expected}, found {found}")]
    DtypeMismatch {
        path: PathBuf,
        expected: String,
        found: String,
    },

    #[error("bad magic in {path}")]
    BadMagic { path: PathBuf },

    #[error("unsupported version {found} in {path} (expected {expected})")]
    VersionMismatch {
        path: PathBuf,
        expected: u16,
        found: u16,
    },

    #[error("size inconsistency in {path}: {detail}")]
    SizeInconsistency { path: PathBuf, detail: String },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl FaarError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        FaarError::Io {
            path: path.into(),
            source,
        }
    }

    /// Short stable identifier, used for machine-readable CLI errors.
    pub fn kind(&self) -> &'static str {
        match self {
            FaarError::EmptyTensor(_) => "empty_tensor",
            FaarError::ShapeMismatch(_) => "shape_mismatch",
            FaarError::InvalidArgument(_) => "invalid_argument",
            FaarError::NegativeMagnitude(_) => "negative_magnitude",
            FaarError::InvalidE4m3Input(_) => "invalid_e4m3_input",
            FaarError::InvalidDistribution(_) => "invalid_distribution",
            FaarError::StepOutOfRange { .. } => "step_out_of_range",
            FaarError::TooManyWeights { .. } => "too_many_weights",
            FaarError::Diverged { .. } => "diverged",
            FaarError::MalformedHeader { .. } => "malformed_header",
            FaarError::TruncatedPayload { .. } => "truncated_payload",
            FaarError::TrailingBytes { .. } => "trailing_bytes",
            FaarError::DtypeMismatch { .. } => "dtype_mismatch",
            FaarError::BadMagic { .. } => "bad_magic",
            FaarError::VersionMismatch { .. } => "version_mismatch",
            FaarError::SizeInconsistency { .. } => "size_inconsistency",
            FaarError::Config(_) => "invalid_config",
            FaarError::Io { .. } => "io",
        }
    }
}

pub type Result<T, E = FaarError> = std::result::Result<T, E>;
