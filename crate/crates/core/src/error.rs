//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid shape: {0}")]
    InvalidShape(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("unsupported op in recorded graph: {0}")]
    UnsupportedOp(String),

    #[error("duplicate parameter name: {0}")]
    DuplicateParam(String),

    #[error("unknown parameter: {0}")]
    UnknownParam(String),

    #[error("epsilon {0} outside [1e-7, 1e-3]")]
    EpsilonRange(f64),

    #[error("forward pass is not deterministic: two evaluations disagree")]
    NonDeterministic,

    #[error("invalid box: {0}")]
    InvalidBox(String),

    #[error("invalid sample: {0}")]
    InvalidSample(String),

    #[error("infeasible scene spec: {0}")]
    InfeasibleScene(String),

    #[error("no unique-identifying command template after {retries} retries")]
    NoUniqueCommand { retries: usize },

    #[error("dataset error at line {line}: {msg}")]
    Dataset { line: usize, msg: String },

    #[error("unsupported dataset grammar version {found}, loader supports {supported}")]
    GrammarVersion { found: u32, supported: u32 },

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("bad checkpoint magic: expected \"LFCK\", found {found:?}")]
    BadMagic { found: [u8; 4] },

    #[error("checkpoint/dataset incompatible: {0}")]
    Incompatible(String),

    #[error("analysis unsupported for fusion kind {0}: it produces no layer weights")]
    UnsupportedAnalysis(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}
