//! Evaluation toolkit for temporal fingerspelling detection.
//!
//! - [`metrics`]: temporal IoU, greedy matching, AP@IoU, AP@Acc and frame-level AP
//! - [`msa`]: full-video letter sequences and maximum sequence accuracy
//! - [`align`]: edit distance, letter accuracy and CTC scoring
//! - [`extract`]: posterior-to-segment conversion, NMS and temporal anchors
//! - [`objectives`]: multi-task training loss values and crop-tube geometry
//! - [`recognizer`]: the recognizer contract plus deterministic mocks
//! - [`io`]: corpus, detection and posterior file formats, clip chunking
//! - [`report`]: metric reports and per-duration breakdowns

pub mod align;
pub mod error;
pub mod extract;
pub mod io;
pub mod metrics;
pub mod model;
pub mod msa;
pub mod objectives;
pub mod recognizer;
pub mod report;

pub use error::{Error, Result};
pub use model::{
    segment_length, validate_clip, validate_clip_with, Alphabet, Clip, FramePosteriors, LabeledSegment,
    LetterSequence, PosteriorColumns, ScoredSegment, Segment, Symbol,
};
