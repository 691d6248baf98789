use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left} vs {right}")]
    ShapeMismatch {
        op: &'static str,
        left: String,
        right: String,
    },

    #[error("{op}: output spatial dims would be non-positive ({detail})")]
    NonPositiveOutput { op: &'static str, detail: String },

    #[error("{0}")]
    InvalidArgument(String),

    #[error("invalid network config: {0}")]
    InvalidConfig(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("op `{0}` has no registered backward")]
    NoBackward(String),

    #[error("config line {line}: {message}")]
    ConfigParse { line: usize, message: String },

    #[error("weight file {path}: {message}")]
    WeightFile { path: PathBuf, message: String },

    #[error("training diverged at epoch {epoch}, iteration {iteration}{}", last_checkpoint_note(.last_checkpoint))]
    Diverged {
        epoch: usize,
        iteration: usize,
        last_checkpoint: Option<PathBuf>,
    },

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("image {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn last_checkpoint_note(path: &Option<PathBuf>) -> String {
    match path {
        Some(p) => format!(" (last good checkpoint: {})", p.display()),
        None => String::from(" (no checkpoint written yet)"),
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
