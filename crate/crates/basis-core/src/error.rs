//! Error type shared across the crate.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Two operands with incompatible shapes reached a kernel.
    #[error("{op}: dimension mismatch between {lhs_rows}x{lhs_cols} and {rhs_rows}x{rhs_cols}")]
    ShapeMismatch {
        op: &'static str,
        lhs_rows: usize,
        lhs_cols: usize,
        rhs_rows: usize,
        rhs_cols: usize,
    },

    #[error("matrix data length {len} does not match {rows}x{cols}")]
    DataLength { rows: usize, cols: usize, len: usize },

    #[error("segment sum: bin index {bin} out of range for {r_bins} bins")]
    BinOutOfRange { bin: usize, r_bins: usize },

    #[error("{op}: {reason}")]
    InvalidArgument { op: &'static str, reason: String },

    #[error("non-finite gradient in tensor '{tensor}'")]
    NonFiniteGradient { tensor: String },

    #[error("non-finite loss at step {step} ({detail})")]
    NonFiniteLoss { step: usize, detail: String },

    #[error("config key '{key}': {reason}")]
    Config { key: String, reason: String },

    #[error("corpus file {path} is empty")]
    EmptyCorpus { path: PathBuf },

    #[error("corpus split too short: need at least {needed} encoded tokens, have {available}")]
    CorpusTooShort { needed: usize, available: usize },

    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    ) -> Self {
        Error::ShapeMismatch {
            op,
            lhs_rows: lhs.0,
            lhs_cols: lhs.1,
            rhs_rows: rhs.0,
            rhs_cols: rhs.1,
        }
    }
}
