use thiserror::Error;

use crate::log::Judgment;

#[derive(Debug, Error)]
pub enum AnnotateError {
    #[error("unknown sequence `{0}`")]
    UnknownSequence(String),
    #[error("annotator `{annotator}` already labeled `{sequence}` as {existing:?}, not {attempted:?}")]
    Conflict { annotator: String, sequence: String, existing: Judgment, attempted: Judgment },
    #[error("no sequences left for annotator `{0}`")]
    Exhausted(String),
    #[error("no sequence passed the concordance filter")]
    NothingExported,
    #[error("invalid request: {0}")]
    Invalid(String),
    #[error("log line {line}: {detail}")]
    Corrupt { line: usize, detail: String },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Core(#[from] deadnet::Error),
}

pub type Result<T, E = AnnotateError> = std::result::Result<T, E>;
