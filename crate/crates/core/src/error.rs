use std::path::PathBuf;

use thiserror::Error;

use crate::model::Segment;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("clip {clip_id}: ground-truth segments {first} and {second} overlap")]
    Overlap {
        clip_id: String,
        first: Segment,
        second: Segment,
    },

    #[error("clip {clip_id}: segment {segment} lies outside [0, {}]", num_frames.saturating_sub(1))]
    Range {
        clip_id: String,
        segment: Segment,
        num_frames: usize,
    },

    #[error("clip {clip_id}: segment {segment} has an empty letter sequence")]
    EmptyLabel { clip_id: String, segment: Segment },

    #[error("symbol {0:?} is not in the alphabet")]
    InvalidSymbol(char),

    #[error("invalid segment: start {start} > end {end}")]
    InvalidSegment { start: usize, end: usize },

    #[error("score {0} is not a finite value in [0, 1]")]
    InvalidScore(f64),

    #[error("letter accuracy is undefined for an empty reference sequence")]
    EmptyTruth,

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("precision-recall curve needs at least one ground-truth segment")]
    ZeroGroundTruth,

    #[error("length mismatch: {what} has {got} entries, expected {expected}")]
    LengthMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("invalid data: {0}")]
    Invalid(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("attention map {0} has no positive cell")]
    PeakUndefined(usize),

    #[error("proposal scores sum to zero")]
    ZeroScores,

    #[error("recognizer failed: {0}")]
    Recognizer(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("{path}:{line}: {source}")]
    Validation {
        path: PathBuf,
        line: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// True for errors caused by bad input data rather than bad configuration.
    pub fn is_data_error(&self) -> bool {
        !matches!(self, Error::Config(_))
    }
}
