use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid model spec: {0}")]
    InvalidSpec(String),

    #[error("width {width} out of range [{min}, {max}] for dropout layer {layer}")]
    WidthOutOfRange {
        layer: usize,
        width: usize,
        min: usize,
        max: usize,
    },

    #[error("expected {expected} widths (one per dropout layer), got {got}")]
    WidthCount { expected: usize, got: usize },

    #[error("cannot prune: {0}")]
    UnsupportedPrune(String),

    #[error("no record satisfies the policy; closest feasible: width {width} with {params} parameters")]
    Infeasible { width: usize, params: usize },

    #[error("{0}")]
    Policy(String),

    #[error("bad magic number {found:#010x} (expected {expected:#010x})")]
    BadMagic { expected: u32, found: u32 },

    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),

    #[error("truncated input: {0}")]
    Truncated(String),

    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },

    #[error("dataset error: {0}")]
    Data(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by an inadmissible width or an unsatisfiable
    /// selection policy, as opposed to configuration or I/O failures.
    pub fn is_domain(&self) -> bool {
        matches!(
            self,
            Error::WidthOutOfRange { .. }
                | Error::WidthCount { .. }
                | Error::Infeasible { .. }
                | Error::Policy(_)
        )
    }
}
