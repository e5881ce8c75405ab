//! Shared domain types: frame segments, letter sequences, clips and
//! per-frame posteriors.
//!
//! Segment endpoints are inclusive frame indices, so `(0, 9)` covers ten
//! frames. Every metric in the crate uses this convention.

use std::collections::BTreeSet;
use std::fmt;

use crate::error::{Error, Result};

/// Inclusive frame interval `[start, end]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Segment {
    start: usize,
    end: usize,
}

impl Segment {
    /// Panics if `start > end`; use [`Segment::try_new`] for untrusted input.
    pub fn new(start: usize, end: usize) -> Self {
        Self::try_new(start, end).expect("segment start must not exceed end")
    }

    pub fn try_new(start: usize, end: usize) -> Result<Self> {
        if start > end {
            return Err(Error::InvalidSegment { start, end });
        }
        Ok(Segment { start, end })
    }

    pub fn start(&self) -> usize {
        self.start
    }

    pub fn end(&self) -> usize {
        self.end
    }

    /// Number of frames covered, `end - start + 1`.
    pub fn len(&self) -> usize {
        self.end - self.start + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn contains_frame(&self, frame: usize) -> bool {
        self.start <= frame && frame <= self.end
    }

    pub fn contains(&self, other: &Segment) -> bool {
        self.start <= other.start && other.end <= self.end
    }

    pub fn overlaps(&self, other: &Segment) -> bool {
        self.start <= other.end && other.start <= self.end
    }

    /// Number of shared frames.
    pub fn intersection_len(&self, other: &Segment) -> usize {
        let lo = self.start.max(other.start);
        let hi = self.end.min(other.end);
        if lo > hi {
            0
        } else {
            hi - lo + 1
        }
    }

    /// Shift both endpoints down by `offset` frames.
    pub fn rebase(&self, offset: usize) -> Segment {
        Segment::new(self.start - offset, self.end - offset)
    }
}

impl fmt::Display for Segment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.start, self.end)
    }
}

pub fn segment_length(segment: &Segment) -> usize {
    segment.len()
}

/// A predicted segment and its confidence.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredSegment {
    pub segment: Segment,
    score: f64,
}

impl ScoredSegment {
    /// Scores outside `[0, 1]` are rejected rather than clamped.
    pub fn new(segment: Segment, score: f64) -> Result<Self> {
        if !score.is_finite() || !(0.0..=1.0).contains(&score) {
            return Err(Error::InvalidScore(score));
        }
        Ok(ScoredSegment { segment, score })
    }

    pub fn score(&self) -> f64 {
        self.score
    }
}

/// Output alphabet symbols, including the two reserved symbols.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Symbol {
    Letter(char),
    /// Separator for non-fingerspelling regions.
    NoLetter,
    /// CTC blank.
    Blank,
}

impl fmt::Display for Symbol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Symbol::Letter(c) => write!(f, "{c}"),
            Symbol::NoLetter => f.write_str("∅"),
            Symbol::Blank => f.write_str("_"),
        }
    }
}

/// A sequence of letters. Reserved symbols cannot be represented, so a
/// recognizer returning this type can never emit them.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct LetterSequence(Vec<char>);

impl LetterSequence {
    pub fn new(letters: Vec<char>) -> Self {
        LetterSequence(letters)
    }

    pub fn empty() -> Self {
        LetterSequence(Vec::new())
    }

    pub fn letters(&self) -> &[char] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn symbols(&self) -> impl Iterator<Item = Symbol> + '_ {
        self.0.iter().map(|&c| Symbol::Letter(c))
    }

    pub fn to_symbols(&self) -> Vec<Symbol> {
        self.symbols().collect()
    }
}

impl From<&str> for LetterSequence {
    fn from(s: &str) -> Self {
        LetterSequence(s.chars().collect())
    }
}

impl fmt::Display for LetterSequence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.0 {
            write!(f, "{c}")?;
        }
        Ok(())
    }
}

/// Finite letter set the corpus is drawn from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Alphabet {
    letters: BTreeSet<char>,
}

impl Alphabet {
    pub fn new(letters: impl IntoIterator<Item = char>) -> Result<Self> {
        let letters: BTreeSet<char> = letters.into_iter().collect();
        if letters.is_empty() {
            return Err(Error::Config("alphabet must not be empty".into()));
        }
        Ok(Alphabet { letters })
    }

    /// Uppercase `A`..=`Z`.
    pub fn latin() -> Self {
        Alphabet {
            letters: ('A'..='Z').collect(),
        }
    }

    pub fn contains(&self, c: char) -> bool {
        self.letters.contains(&c)
    }

    pub fn letters(&self) -> impl Iterator<Item = char> + '_ {
        self.letters.iter().copied()
    }

    pub fn len(&self) -> usize {
        self.letters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.letters.is_empty()
    }

    pub fn check(&self, seq: &LetterSequence) -> Result<()> {
        match seq.letters().iter().find(|c| !self.contains(**c)) {
            Some(&c) => Err(Error::InvalidSymbol(c)),
            None => Ok(()),
        }
    }
}

impl Default for Alphabet {
    fn default() -> Self {
        Alphabet::latin()
    }
}

/// Ground-truth segment with its letters.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledSegment {
    pub segment: Segment,
    pub letters: LetterSequence,
}

impl LabeledSegment {
    pub fn new(segment: Segment, letters: impl Into<LetterSequence>) -> Self {
        LabeledSegment {
            segment,
            letters: letters.into(),
        }
    }
}

/// An annotated video clip.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Clip {
    pub clip_id: String,
    pub num_frames: usize,
    pub ground_truth: Vec<LabeledSegment>,
}

impl Clip {
    pub fn new(clip_id: impl Into<String>, num_frames: usize, ground_truth: Vec<LabeledSegment>) -> Self {
        Clip {
            clip_id: clip_id.into(),
            num_frames,
            ground_truth,
        }
    }

    pub fn gt_segments(&self) -> Vec<Segment> {
        self.ground_truth.iter().map(|g| g.segment).collect()
    }

    /// True if the frame lies in some ground-truth segment.
    pub fn is_fingerspelling(&self, frame: usize) -> bool {
        self.ground_truth.iter().any(|g| g.segment.contains_frame(frame))
    }
}

/// Validate with the default Latin alphabet.
pub fn validate_clip(clip: Clip) -> Result<Clip> {
    validate_clip_with(clip, &Alphabet::latin())
}

pub fn validate_clip_with(clip: Clip, alphabet: &Alphabet) -> Result<Clip> {
    if clip.num_frames == 0 {
        return Err(Error::Config(format!("clip {} has zero frames", clip.clip_id)));
    }
    for g in &clip.ground_truth {
        if g.segment.end() >= clip.num_frames {
            return Err(Error::Range {
                clip_id: clip.clip_id.clone(),
                segment: g.segment,
                num_frames: clip.num_frames,
            });
        }
        if g.letters.is_empty() {
            return Err(Error::EmptyLabel {
                clip_id: clip.clip_id.clone(),
                segment: g.segment,
            });
        }
        alphabet.check(&g.letters)?;
    }
    for pair in clip.ground_truth.windows(2) {
        let (a, b) = (pair[0].segment, pair[1].segment);
        if a.overlaps(&b) {
            return Err(Error::Overlap {
                clip_id: clip.clip_id.clone(),
                first: a,
                second: b,
            });
        }
        if b.start() < a.start() {
            return Err(Error::Invalid(format!(
                "clip {}: ground-truth segments are not sorted by start ({a} before {b})",
                clip.clip_id
            )));
        }
    }
    Ok(clip)
}

/// Column layout of a posterior matrix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PosteriorColumns {
    /// Two columns: fingerspelling, then background.
    Binary,
    /// One column per symbol (letters, no-letter and blank).
    Symbols(Vec<Symbol>),
}

impl PosteriorColumns {
    pub fn width(&self) -> usize {
        match self {
            PosteriorColumns::Binary => 2,
            PosteriorColumns::Symbols(s) => s.len(),
        }
    }

    pub fn index_of(&self, symbol: Symbol) -> Option<usize> {
        match self {
            PosteriorColumns::Binary => None,
            PosteriorColumns::Symbols(s) => s.iter().position(|&x| x == symbol),
        }
    }
}

/// Tolerance on per-frame row sums.
pub const ROW_SUM_TOLERANCE: f64 = 1e-6;

/// Per-frame probability vectors for one clip, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FramePosteriors {
    pub clip_id: String,
    columns: PosteriorColumns,
    values: Vec<f64>,
}

impl FramePosteriors {
    /// Checks that every row is a probability distribution.
    pub fn new(clip_id: impl Into<String>, columns: PosteriorColumns, rows: Vec<Vec<f64>>) -> Result<Self> {
        let width = columns.width();
        if width == 0 {
            return Err(Error::Shape("posterior header has no columns".into()));
        }
        let mut values = Vec::with_capacity(rows.len() * width);
        for (t, row) in rows.iter().enumerate() {
            if row.len() != width {
                return Err(Error::Shape(format!(
                    "frame {t} has {} values, header declares {width}",
                    row.len()
                )));
            }
            if let Some(v) = row.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
                return Err(Error::Shape(format!(
                    "frame {t} has probability {v} outside [0, 1]"
                )));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
                return Err(Error::Shape(format!("frame {t} sums to {sum}, not 1")));
            }
            values.extend_from_slice(row);
        }
        Ok(FramePosteriors {
            clip_id: clip_id.into(),
            columns,
            values,
        })
    }

    /// Binary posteriors from a per-frame fingerspelling probability.
    pub fn from_fs_probabilities(clip_id: impl Into<String>, probs: &[f64]) -> Result<Self> {
        let rows = probs.iter().map(|&p| vec![p, 1.0 - p]).collect();
        Self::new(clip_id, PosteriorColumns::Binary, rows)
    }

    pub fn columns(&self) -> &PosteriorColumns {
        &self.columns
    }

    pub fn width(&self) -> usize {
        self.columns.width()
    }

    pub fn num_frames(&self) -> usize {
        self.values.len() / self.width()
    }

    pub fn row(&self, t: usize) -> &[f64] {
        let w = self.width();
        &self.values[t * w..(t + 1) * w]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks_exact(self.width())
    }

    /// Per-frame fingerspelling probability: the first column for binary
    /// posteriors, `1 - p(no-letter)` for symbol posteriors.
    pub fn fs_probabilities(&self) -> Result<Vec<f64>> {
        match &self.columns {
            PosteriorColumns::Binary => Ok(self.rows().map(|r| r[0]).collect()),
            PosteriorColumns::Symbols(_) => {
                let nl = self
                    .columns
                    .index_of(Symbol::NoLetter)
                    .ok_or_else(|| Error::Shape("symbol posteriors have no no-letter column".into()))?;
                Ok(self.rows().map(|r| (1.0 - r[nl]).clamp(0.0, 1.0)).collect())
            }
        }
    }
}
