use thiserror::Error;

/// Errors raised anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("non-finite value encountered in {0}")]
    NonFinite(String),
    #[error("target index {index} out of range for {classes} classes")]
    TargetOutOfRange { index: usize, classes: usize },
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("variable was not recorded on this tape")]
    ForeignVar,
    #[error("tensor is frozen and cannot receive gradients")]
    Frozen,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("sequence of length {len} exceeds maximum context {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("token id {id} out of range for vocabulary of size {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },
    #[error("layer count {layers} out of range 1..={max}")]
    LayerOutOfRange { layers: usize, max: usize },
    #[error("expected {expected} auxiliary variant")]
    VariantMismatch { expected: &'static str },
    #[error("vocabulary mismatch: {0}")]
    VocabMismatch(String),
    #[error("bad checkpoint magic bytes")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u16),
    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
    #[error("non-finite gradient at step {step} in {param}")]
    NonFiniteGradient { step: usize, param: String },
    #[error("empty {0}")]
    Empty(&'static str),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("unknown word {0:?}")]
    UnknownWord(String),
    #[error("unknown keyword {word:?}; valid keywords: {}", valid.join(", "))]
    UnknownKeyword { word: String, valid: Vec<String> },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
