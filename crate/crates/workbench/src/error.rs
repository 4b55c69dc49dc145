use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{}: {source}", path.display())]
    Json {
        path: PathBuf,
        source: serde_json::Error,
    },
    #[error("{}: corrupt checkpoint: {reason}", path.display())]
    Corrupt { path: PathBuf, reason: String },
    #[error(
        "{}: checkpoint format version {found} is not readable by this build (expects {expected}); \
         re-run the stage that wrote it to regenerate the file",
        path.display()
    )]
    Version {
        path: PathBuf,
        found: u32,
        expected: u32,
    },
    #[error("stage `{stage}` needs {} which does not exist; run the earlier stage first", artifact.display())]
    MissingArtifact {
        stage: &'static str,
        artifact: PathBuf,
    },
    #[error("stage `{stage}`: {reason}")]
    Stage { stage: &'static str, reason: String },
    #[error("invalid experiment config: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] rkld::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
    let path = path.into();
    move |source| Error::Io { path, source }
}
