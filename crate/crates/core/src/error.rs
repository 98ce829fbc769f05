use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("manifest line {line}: {message}")]
    ManifestParse { line: usize, message: String },

    #[error("image file not found: {0}")]
    MissingFile(PathBuf),

    #[error("duplicate id {id:?} in split {split}")]
    DuplicateId { id: String, split: String },

    #[error("identity {0:?} appears in both train and test splits")]
    SplitLeak(String),

    #[error("split {0} is empty")]
    EmptySplit(String),

    #[error("cannot decode image {path}: {message}")]
    Decode { path: PathBuf, message: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("corrupt checkpoint: {0}")]
    CheckpointCorrupt(String),

    #[error("epoch {epoch} outside schedule of {total} epochs")]
    EpochOutOfRange { epoch: u64, total: u64 },

    #[error("{0}")]
    Invalid(String),

    #[error("{}stage {stage}: {source}", round.map(|r| format!("round {r}, ")).unwrap_or_default())]
    Stage {
        /// `None` for the base stages that precede the first round.
        round: Option<usize>,
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error("run interrupted after stage {0}")]
    Interrupted(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
