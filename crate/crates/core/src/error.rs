use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// A tensor did not have the extent an operation requires.
    #[error("{op}: axis {axis} has extent {actual}, expected {expected}")]
    AxisMismatch {
        op: &'static str,
        axis: usize,
        expected: usize,
        actual: usize,
    },
    #[error("{op}: expected rank {expected}, got rank {actual}")]
    RankMismatch {
        op: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("{op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("invalid {what}: {detail}")]
    Invalid { what: &'static str, detail: String },
    #[error("batch_norm: channel {channel} has a single element in train mode, variance is undefined")]
    UndefinedVariance { channel: usize },
    #[error("tape node {node} refers to node {parent}, which is not earlier on the tape")]
    TapeCycle { node: usize, parent: usize },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NotScalar(alloc::vec::Vec<usize>),
    #[error("only one class present in labels")]
    SingleClass,
    #[error("class {class} has {count} members, fewer than the {k} folds requested")]
    ClassTooSmall { class: u8, count: usize, k: usize },
    #[error("train and validation sets overlap at sample {0}")]
    OverlappingSplits(usize),
    #[error("generator parameter {parameter} puts the vessel tree out of bounds: {detail}")]
    OutOfBounds {
        parameter: &'static str,
        detail: String,
    },
    #[error("unknown view {0:?}; expected frontal, transverse or sagittal")]
    UnknownView(String),
}

impl Error {
    pub(crate) fn invalid(what: &'static str, detail: impl Into<String>) -> Self {
        Error::Invalid {
            what,
            detail: detail.into(),
        }
    }

    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }
}
