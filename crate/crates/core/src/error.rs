use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("model not initialized: {0}")]
    UnknownModel(String),

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("position {position} out of range for a prompt of {len} tokens")]
    PositionOutOfRange { position: usize, len: usize },

    #[error("layer {layer} out of range (model has layers 1..={num_layers})")]
    LayerOutOfRange { layer: usize, num_layers: usize },

    #[error("token id {id} out of range for vocabulary of {vocab_size}")]
    TokenOutOfRange { id: usize, vocab_size: usize },

    #[error("position {0} was not captured")]
    MissingPosition(usize),

    #[error("attention was not captured at layer {layer} for query position {position}")]
    AttentionNotCaptured { layer: usize, position: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("empty rank profile")]
    EmptyProfile,

    #[error("invalid prompt: {0}")]
    InvalidPrompt(String),

    #[error("label space error: {0}")]
    LabelSpace(String),

    #[error("pool too small: need {needed} examples, {available} remain after filtering")]
    InsufficientPool { needed: usize, available: usize },

    #[error("no exemplar for label {0:?}")]
    MissingExemplar(String),

    #[error("marker {marker:?} not found in tokenized prompt")]
    MarkerNotFound { marker: String },

    #[error("threshold {name} = {value} must lie in (0, 1)")]
    ThresholdOutOfRange { name: &'static str, value: f64 },

    #[error("value out of range: {0}")]
    OutOfRange(String),

    #[error("{path}:{line}: {message}")]
    Record {
        path: String,
        line: usize,
        message: String,
    },

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("missing incorrect-label assignment for sample {0}")]
    MissingAssignment(usize),

    #[error("model load error for {path}: {message}")]
    ModelLoad { path: PathBuf, message: String },

    #[error("tokenizer error: {0}")]
    Tokenizer(String),

    #[error("trace format error: {0}")]
    TraceFormat(String),

    #[error("experiment {experiment} failed at sample {sample}: {source}")]
    Sample {
        experiment: String,
        sample: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("plot error: {0}")]
    Plot(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
