use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the workbench.
#[derive(Debug, Error)]
pub enum Error {
    #[error("input too short: {samples} samples, need at least {frame_len}")]
    InputTooShort { samples: usize, frame_len: usize },

    #[error("invalid audio: {0}")]
    InvalidAudio(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("wrong feature domain: expected {expected}, got {actual}")]
    WrongDomain {
        expected: &'static str,
        actual: &'static str,
    },

    #[error("unknown word: {0}")]
    UnknownWord(String),

    #[error("noise has zero power but a finite SNR was requested")]
    ZeroPowerNoise,

    #[error("clean signal has zero power")]
    ZeroPowerClean,

    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("infeasible alignment: {frames} frames, path needs at least {min_frames}")]
    InfeasibleAlignment { frames: usize, min_frames: usize },

    #[error("single-class training data, constant model required")]
    SingleClass,

    #[error("state index {0} out of range ({1} states)")]
    StateOutOfRange(usize, usize),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error("missing artifact {}: run `{stage}` first", path.display())]
    MissingArtifact { path: PathBuf, stage: &'static str },

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad user input (config, flags, missing
    /// prerequisites) rather than a failure while doing the work.
    pub fn is_validation(&self) -> bool {
        match self {
            Error::InvalidConfig(_) | Error::MissingArtifact { .. } => true,
            Error::Stage { source, .. } => source.is_validation(),
            _ => false,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
