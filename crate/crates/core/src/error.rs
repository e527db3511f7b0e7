use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: row {row} has no unmasked entries")]
    FullyMasked { op: &'static str, row: usize },
    #[error("{op}: zero-norm vector at row {row}")]
    ZeroNorm { op: &'static str, row: usize },
    #[error("{what}: index {index} out of range (size {size})")]
    Index {
        what: &'static str,
        index: usize,
        size: usize,
    },
    #[error("backward already ran on this tape")]
    BackwardTwice,
    #[error("backward needs a 1x1 output, got {0:?}")]
    NonScalar(Vec<usize>),
    #[error("non-finite {which} gradient at input {input}, entry {entry}")]
    NonFiniteGradient {
        which: &'static str,
        input: usize,
        entry: usize,
    },
    #[error("layout: {0}")]
    Layout(String),
    #[error("domain: {0}")]
    Domain(String),
    #[error("{file}:{line}: {msg}")]
    Config {
        file: String,
        line: usize,
        msg: String,
    },
    #[error("format: {0}")]
    Format(String),
    #[error("data: {0}")]
    Data(String),
    #[error("usage: {0}")]
    Usage(String),
    #[error("gradient check failed: {0}")]
    GradCheck(String),
    #[error("non-finite loss at step {step} ({breakdown})")]
    NonFiniteLoss { step: usize, breakdown: String },
    #[error("sampler state became non-finite at step {0}")]
    NonFiniteState(usize),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit status for this error: 1 for usage, 2 for data and
    /// config problems, 3 for numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::FullyMasked { .. }
            | Error::ZeroNorm { .. }
            | Error::NonFiniteGradient { .. }
            | Error::NonFiniteLoss { .. }
            | Error::NonFiniteState(_)
            | Error::GradCheck(_) => 3,
            Error::Usage(_) => 1,
            _ => 2,
        }
    }
}
