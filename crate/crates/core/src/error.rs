use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("unknown token `{0}`")]
    UnknownToken(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("dataset corruption: {0}")]
    DatasetCorruption(String),

    #[error("checkpoint incompatible, differing fields: {}", .0.join(", "))]
    ConfigMismatch(Vec<String>),

    #[error("evaluation contamination: {0} held-out ids also appear in the training split")]
    Contamination(usize),

    #[error("non-finite loss at step {step}; state dumped to {}", dump.display())]
    NonFiniteLoss { step: u64, dump: PathBuf },

    #[error("refusing to write into non-empty directory {}", .0.display())]
    DirectoryNotEmpty(PathBuf),

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("png: {0}")]
    Png(String),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }
}

/// Attaches a path to an I/O result.
pub(crate) trait IoContext<T> {
    fn at(self, path: &std::path::Path) -> Result<T>;
}

impl<T> IoContext<T> for std::io::Result<T> {
    fn at(self, path: &std::path::Path) -> Result<T> {
        self.map_err(|e| Error::io(path.display().to_string(), e))
    }
}
