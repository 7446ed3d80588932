use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    Shape {
        context: String,
        expected: usize,
        got: usize,
    },
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
    #[error("stratification infeasible: class {class} has {count} records for {splits} splits")]
    StratificationInfeasible {
        class: u8,
        count: usize,
        splits: usize,
    },
    #[error("corrupt archive at {path}: {array}: {reason}")]
    CorruptArchive {
        path: PathBuf,
        array: String,
        reason: String,
    },
    #[error("malformed stream for patient {patient}: {reason}")]
    MalformedStream { patient: String, reason: String },
    #[error("record {patient} rejected: {reason}")]
    RejectedRecord { patient: String, reason: String },
    #[error("ingestion error in {file}: {reason}")]
    Ingest { file: String, reason: String },
    #[error("non-finite gradient in parameter {param}")]
    NonFiniteGradient { param: String },
    #[error("non-finite loss: {breakdown}")]
    NonFiniteLoss { breakdown: String },
    #[error("training diverged at epoch {epoch}")]
    Diverged { epoch: usize },
    #[error("single-class training data for task {task}")]
    SingleClass { task: String },
    #[error("AUROC undefined: {positives} positives, {negatives} negatives")]
    UndefinedAuroc { positives: usize, negatives: usize },
    #[error("cosine distance undefined for a zero-norm embedding ({which})")]
    ZeroNorm { which: String },
    #[error("unknown {kind}: {name}")]
    Unknown { kind: String, name: String },
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(context: impl Into<String>, expected: usize, got: usize) -> Self {
        Error::Shape {
            context: context.into(),
            expected,
            got,
        }
    }
}
