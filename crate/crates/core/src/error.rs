use thiserror::Error;

/// Errors raised anywhere in the model, data and training stack.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: String },
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("non-finite value in {context}")]
    NonFinite { context: String },
    #[error("token id {id} is out of vocabulary (size {vocab})")]
    OutOfVocabulary { id: usize, vocab: usize },
    #[error("drop rate {0} outside [0, 1)")]
    InvalidRate(f64),
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("batch of {0} cannot supply in-batch negatives (need at least 2)")]
    InsufficientNegatives(usize),
    #[error("degenerate vector: {0}")]
    Degenerate(&'static str),
    #[error("sequence length {len} exceeds relative-bias range {max_len}")]
    SequenceTooLong { len: usize, max_len: usize },
    #[error("invalid label vector: {0}")]
    InvalidLabels(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("no text-bearing clip in stream")]
    NoText,
    #[error("incompatible model: {0}")]
    Incompatible(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}
