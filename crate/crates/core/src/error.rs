use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error at byte offset {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("label count mismatch: expected {expected} labels, found {actual}")]
    LabelCount { expected: usize, actual: usize },

    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("cannot build a kd-tree over an empty cloud")]
    EmptyCloud,

    #[error("invalid neighbor count k={k} for {n} points")]
    InvalidK { k: usize, n: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("corrupt cell assignment: {0}")]
    CorruptAssignment(String),

    #[error("dense projection matrix of {cells}x{points} exceeds the cap of {cap} elements")]
    MemoryCap { cells: usize, points: usize, cap: usize },

    #[error("every point carries the ignore label; the mean loss is undefined")]
    AllIgnored,

    #[error("no class has a non-zero IoU denominator")]
    NoClassPresent,

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("results disagree: {0}")]
    Mismatch(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    /// Short stable identifier, used for machine-parsable CLI errors.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Format { .. } => "format",
            Error::LabelCount { .. } => "label_count",
            Error::Shape { .. } => "shape",
            Error::EmptyCloud => "empty_cloud",
            Error::InvalidK { .. } => "invalid_k",
            Error::Config(_) => "config",
            Error::CorruptAssignment(_) => "corrupt_assignment",
            Error::MemoryCap { .. } => "memory_cap",
            Error::AllIgnored => "all_ignored",
            Error::NoClassPresent => "no_class_present",
            Error::NonFinite(_) => "non_finite",
            Error::Checkpoint(_) => "checkpoint",
            Error::Mismatch(_) => "mismatch",
        }
    }
}
