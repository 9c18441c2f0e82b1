use thiserror::Error;

/// Errors raised by the explainability engine.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("empty logits")]
    EmptyLogits,
    #[error("non-finite logit at index {0}")]
    NonFiniteLogit(usize),
    #[error("invalid probability vector: {0}")]
    InvalidProbVector(String),
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("dimension mismatch: expected {expected:?}, got {actual:?}")]
    DimMismatch {
        expected: (usize, usize),
        actual: (usize, usize),
    },
    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("zero-norm map")]
    ZeroNormMap,
    #[error("invalid model spec: {0}")]
    InvalidModelSpec(String),
    #[error("image too small: {height}x{width}, minimum {min}x{min}")]
    ImageTooSmall {
        height: usize,
        width: usize,
        min: usize,
    },
    #[error("unknown layer `{0}`")]
    UnknownLayer(String),
    #[error("layer `{0}` has no spatial extent")]
    NonSpatialLayer(String),
    #[error("class index {index} out of range for {num_classes} classes")]
    ClassOutOfRange { index: usize, num_classes: usize },
    #[error("fullgrad unsupported")]
    FullGradUnsupported,
    #[error("malformed weight file at byte {offset}: {reason}")]
    MalformedWeights { offset: usize, reason: String },
    #[error("io error: {0}")]
    Io(String),
    #[error("degenerate histogram")]
    DegenerateHistogram,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("degenerate features: all feature dimensions have zero variance")]
    DegenerateFeatures,
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("missing map for method `{0}` with non-zero weight")]
    MissingMethod(String),
    #[error("attention gates do not sum to one at pixel {0}")]
    GateSumViolation(usize),
    #[error("non-finite input: {0}")]
    NonFinite(&'static str),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
