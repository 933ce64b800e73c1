use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite entry {value} at ({row}, {col})")]
    NonFinite { row: usize, col: usize, value: f64 },

    #[error("{op}: dimension mismatch, expected {expected}, found {found}")]
    DimensionMismatch {
        op: &'static str,
        expected: String,
        found: String,
    },

    #[error("rank {rank} out of range 1..={max}{}", context.as_deref().map(|c| format!(" ({c})")).unwrap_or_default())]
    RankOutOfRange {
        rank: usize,
        max: usize,
        context: Option<String>,
    },

    #[error("singular system in {op}")]
    Singular { op: &'static str },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unknown layer index {0}")]
    UnknownLayer(usize),

    #[error("base-model mismatch: checkpoint fingerprint {expected:#018x}, model fingerprint {found:#018x}")]
    BaseModelMismatch { expected: u64, found: u64 },

    #[error("checkpoint parse error at byte {offset}: {reason}")]
    Parse { offset: usize, reason: String },

    #[error("non-finite loss at step {step} (last good step {last_good_step})")]
    Diverged { step: u64, last_good_step: u64 },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn mismatch(
        op: &'static str,
        expected: impl std::fmt::Display,
        found: impl std::fmt::Display,
    ) -> Self {
        Error::DimensionMismatch {
            op,
            expected: expected.to_string(),
            found: found.to_string(),
        }
    }
}
