use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Crate-wide error type.
///
/// `Config` and `Validation` mean the inputs were bad before any work
/// started; everything else is a runtime failure of a stage or operation.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A malformed record inside an otherwise readable file.
    #[error("{path}:{line}: {msg}")]
    Record {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("{0}")]
    Validation(String),

    #[error("language {lang}: {have} sample bytes available, {want} requested")]
    InsufficientBytes { lang: String, have: u64, want: u64 },

    #[error("vocab size {requested} is smaller than the base alphabet ({base})")]
    VocabTooSmall { requested: usize, base: usize },

    #[error("no threshold calibrated for language pair {src}-{tgt}")]
    MissingThreshold { src: String, tgt: String },

    #[error(
        "language {lang}: document pool exhausted; presentation {requested} requested but the upsampling cap allows {cap}"
    )]
    PoolExhausted {
        lang: String,
        requested: u32,
        cap: u32,
    },

    #[error("external command failed: {0}")]
    Command(String),

    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 1 for bad inputs, 2 for runtime stage failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Validation(_) => 1,
            _ => 2,
        }
    }
}
