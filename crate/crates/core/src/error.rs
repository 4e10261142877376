use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("audio too short: {samples} samples, need at least one window of {window}")]
    TooShort { samples: usize, window: usize },
    #[error("invalid frame range {start}..{end} for {frames} frames")]
    InvalidRange {
        start: usize,
        end: usize,
        frames: usize,
    },
    #[error("overlapping frame ranges {first:?} and {second:?}")]
    OverlappingRanges {
        first: (usize, usize),
        second: (usize, usize),
    },
    #[error("out-of-lexicon word: {0}")]
    OutOfLexicon(String),
    #[error("unknown phone: {0}")]
    UnknownPhone(String),
    #[error("alignment/feature length mismatch: durations sum to {sum}, features have {frames} frames")]
    AlignmentMismatch { sum: usize, frames: usize },
    #[error("phone count mismatch: expected {expected}, got {found}")]
    PhoneCountMismatch { expected: usize, found: usize },
    #[error("empty frame sequence")]
    EmptyFrames,
    #[error("empty masked region")]
    EmptyMask,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("embedding provider failed: {0}")]
    Provider(String),
    #[error("non-finite loss at step {step} (batch: {ids:?})")]
    NonFiniteLoss { step: u64, ids: Vec<String> },
    #[error("checkpoint schema version {found} is not supported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },
    #[error("corrupt checkpoint: {0}")]
    CheckpointCorrupt(String),
    #[error("malformed file: {0}")]
    Format(String),
    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("wav: {0}")]
    Wav(#[from] hound::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub fn at_stage(self, stage: &'static str) -> Self {
        match self {
            e @ Error::Stage { .. } => e,
            e => Error::Stage {
                stage,
                source: Box::new(e),
            },
        }
    }

    /// Pipeline stage tag, when the error came out of the edit pipeline.
    pub fn stage(&self) -> Option<&'static str> {
        match self {
            Error::Stage { stage, .. } => Some(stage),
            _ => None,
        }
    }

    /// Innermost error with stage tags stripped.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root(),
            e => e,
        }
    }
}

pub(crate) trait StageExt<T> {
    fn stage(self, stage: &'static str) -> Result<T>;
}

impl<T> StageExt<T> for Result<T> {
    fn stage(self, stage: &'static str) -> Result<T> {
        self.map_err(|e| e.at_stage(stage))
    }
}
