//! Crate-wide error type.

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },

    /// Pearson correlation with a zero-variance argument.
    #[error("undefined correlation: zero variance in {0}")]
    UndefinedCorrelation(&'static str),

    #[error("zero variance: all rows identical")]
    ZeroVariance,

    #[error("softmax over all -inf inputs")]
    AllMasked,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid model config: {0}")]
    InvalidConfig(String),

    #[error("token id {token} at position {position} out of range for vocab of {vocab}")]
    TokenOutOfRange {
        token: u32,
        position: usize,
        vocab: usize,
    },

    #[error("sequence of length {len} exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("empty input sequence")]
    EmptySequence,

    #[error("layer {layer} out of range 1..={n_layers}")]
    LayerOutOfRange { layer: usize, n_layers: usize },

    #[error("adapter already present at layer {0}")]
    AdapterExists(usize),

    #[error("non-finite loss {loss} at step {step}")]
    NonFiniteLoss { step: usize, loss: f64 },

    #[error("checkpoint digest mismatch (file truncated or corrupted)")]
    DigestMismatch,

    #[error("unsupported checkpoint format version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("shape mismatch for {name}: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("malformed checkpoint: {0}")]
    MalformedCheckpoint(String),

    #[error("{path}:{line}: {message}")]
    GazeParse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("empty corpus")]
    EmptyCorpus,

    #[error("cannot align word {word_index} ({word:?}) of sentence {sentence_id}: {message}")]
    Alignment {
        sentence_id: String,
        word_index: usize,
        word: String,
        message: String,
    },

    #[error("all {0} candidate layers failed to train")]
    AllCandidatesFailed(usize),

    #[error("model configs differ between original and contrast models")]
    ConfigMismatch,

    #[error("prompt sets differ between reports")]
    PromptMismatch,

    #[error("scorer failed: {0}")]
    Scorer(String),

    #[error("every continuation of prompt {0} failed to score")]
    AllContinuationsFailed(usize),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
