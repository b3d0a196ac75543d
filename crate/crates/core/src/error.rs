use std::fmt;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Pipeline stage a failure originated from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Load,
    Similarity,
    Attention,
    Prompting,
    Segmentation,
    Output,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Stage::Load => "load",
            Stage::Similarity => "similarity",
            Stage::Attention => "attention",
            Stage::Prompting => "prompting",
            Stage::Segmentation => "segmentation",
            Stage::Output => "output",
        };
        f.write_str(name)
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("non-finite value in tensor at index {0}")]
    NonFinite(usize),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("node {0} was not recorded on this tape")]
    UnknownNode(usize),

    #[error("degenerate embedding (norm {0:e})")]
    DegenerateEmbedding(f64),

    #[error("embedding is not normalized (norm {0})")]
    NotNormalized(f64),

    #[error("caption is empty after tokenization")]
    EmptyCaption,

    #[error("attention map has no activation")]
    NoActivation,

    #[error("point ({x}, {y}) lies outside the {width}x{height} image")]
    OutOfBounds {
        x: i64,
        y: i64,
        width: usize,
        height: usize,
    },

    #[error("unsupported format: {0}")]
    UnsupportedFormat(String),

    #[error("truncated data: {0}")]
    Truncated(String),

    #[error("malformed file {path}: {message}")]
    Malformed { path: PathBuf, message: String },

    #[error("manifest line {line}: {message}")]
    ManifestLine { line: usize, message: String },

    #[error("duplicate manifest id `{0}`")]
    DuplicateId(String),

    #[error("missing file {0}")]
    MissingFile(PathBuf),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("adapter spawn failed: {0}")]
    AdapterSpawn(String),

    #[error("adapter timed out after {0} ms")]
    AdapterTimeout(u64),

    #[error("malformed adapter reply: {0}")]
    AdapterReply(String),

    #[error("adapter reported failure: {0}")]
    AdapterFailure(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("unsupported protocol version {0}")]
    ProtocolVersion(u64),

    #[error("unknown protocol op `{0}`")]
    UnknownOp(String),

    #[error("bad base64 payload: {0}")]
    Base64(String),

    #[error("tensor payload is {got} bytes, shape and dtype require {expected}")]
    PayloadLength { expected: usize, got: usize },

    #[error("mask is {got_w}x{got_h}, expected {want_w}x{want_h}")]
    DimMismatch {
        want_w: usize,
        want_h: usize,
        got_w: usize,
        got_h: usize,
    },

    #[error("{stage} stage failed: {source}")]
    Stage {
        stage: Stage,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub fn at(self, stage: Stage) -> Self {
        match self {
            e @ Error::Stage { .. } => e,
            e => Error::Stage {
                stage,
                source: Box::new(e),
            },
        }
    }

    /// Innermost error with stage tags removed.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root(),
            e => e,
        }
    }
}
