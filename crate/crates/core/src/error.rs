use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("dimension mismatch in {op}: expected {expected}, got {actual}")]
    Dim {
        op: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("invalid axis {axis} for rank-{rank} tensor")]
    Axis { axis: usize, rank: usize },

    #[error("non-finite value at parameter {param}, index {index}")]
    NonFinite { param: usize, index: usize },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("conditioner mode {0} does not support this operation")]
    UnsupportedMode(&'static str),

    #[error("missing parameter block: {0}")]
    MissingParam(String),

    #[error("missing field: {0}")]
    MissingField(&'static str),

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("sequence too short: {0} frames (need at least {1})")]
    SequenceTooShort(usize, usize),

    #[error("infeasible CTC alignment: target needs {needed} frames, have {frames}")]
    InfeasibleAlignment { needed: usize, frames: usize },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("reference transcript is empty")]
    UndefinedReference,

    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("invariant breach: {0}")]
    InvariantBreach(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("metric name mismatch: {0}")]
    MetricMismatch(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    /// True for errors that indicate a numerical failure rather than bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NonFinite { .. } | Error::Numerical(_) | Error::InfeasibleAlignment { .. }
        )
    }
}
