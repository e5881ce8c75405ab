//! Maximum sequence accuracy.
//!
//! A clip becomes one long symbol sequence: the letters of each segment in
//! order, with a single no-letter symbol wherever uncovered frames precede,
//! separate or follow segments. Detections above a score threshold are made
//! disjoint, recognized and concatenated the same way; MSA is the best
//! accuracy of that sequence against the reference over all thresholds.
//!
//! The selection for a clip only changes at the clip's own score values, so
//! sweeping the distinct scores of the corpus (plus one threshold above all
//! of them) visits every reachable outcome.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::align::{accuracy_from_distance, edit_distance};
use crate::error::{Error, Result};
use crate::metrics::{by_score_desc, temporal_iou};
use crate::model::{Clip, LetterSequence, ScoredSegment, Segment, Symbol};
use crate::recognizer::Recognizer;

/// Letters and no-letter separators for a whole clip.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FullVideoSequence(Vec<Symbol>);

impl FullVideoSequence {
    pub fn symbols(&self) -> &[Symbol] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl std::fmt::Display for FullVideoSequence {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        self.0.iter().try_for_each(|s| write!(f, "{s}"))
    }
}

/// Concatenate segment letters with no-letter separators over uncovered
/// frames. Segments must be sorted and disjoint. An empty letter sequence
/// adds nothing, and adjacent separators are merged.
pub fn build_label_sequence<'a>(
    clip_id: &str,
    num_frames: usize,
    segments: impl IntoIterator<Item = (Segment, &'a LetterSequence)>,
) -> Result<FullVideoSequence> {
    let mut out = Vec::new();
    let push_gap = |out: &mut Vec<Symbol>| {
        if out.last() != Some(&Symbol::NoLetter) {
            out.push(Symbol::NoLetter);
        }
    };
    let mut prev: Option<Segment> = None;
    for (seg, letters) in segments {
        if seg.end() >= num_frames {
            return Err(Error::Range {
                clip_id: clip_id.to_owned(),
                segment: seg,
                num_frames,
            });
        }
        let gap_before = match prev {
            None => seg.start() > 0,
            Some(p) if p.end() >= seg.start() => {
                return Err(Error::Overlap {
                    clip_id: clip_id.to_owned(),
                    first: p,
                    second: seg,
                })
            }
            Some(p) => seg.start() > p.end() + 1,
        };
        if gap_before {
            push_gap(&mut out);
        }
        out.extend(letters.symbols());
        prev = Some(seg);
    }
    let gap_after = match prev {
        None => num_frames > 0,
        Some(p) => p.end() + 1 < num_frames,
    };
    if gap_after {
        push_gap(&mut out);
    }
    Ok(FullVideoSequence(out))
}

/// The reference sequence of a clip's ground truth.
pub fn reference_sequence(clip: &Clip) -> Result<FullVideoSequence> {
    build_label_sequence(
        &clip.clip_id,
        clip.num_frames,
        clip.ground_truth.iter().map(|g| (g.segment, &g.letters)),
    )
}

/// How overlapping detections are resolved before concatenation.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectionConfig {
    /// Candidates whose IoU with a kept segment is at most this value are
    /// trimmed to their uncovered part instead of dropped. Zero keeps only
    /// candidates that share no frame with a kept segment.
    pub overlap_tolerance: f64,
}

/// Drop detections scoring below `threshold`, then keep segments greedily by
/// score so that the output is pairwise disjoint. Sorted by start.
pub fn select_detections(preds: &[ScoredSegment], threshold: f64) -> Vec<Segment> {
    select_detections_with(preds, threshold, &SelectionConfig::default())
}

pub fn select_detections_with(
    preds: &[ScoredSegment],
    threshold: f64,
    config: &SelectionConfig,
) -> Vec<Segment> {
    let mut candidates: Vec<&ScoredSegment> = preds.iter().filter(|p| p.score() >= threshold).collect();
    candidates.sort_by(|a, b| by_score_desc(a, b));

    let mut kept: Vec<Segment> = Vec::new();
    for cand in candidates {
        let seg = cand.segment;
        if !kept.iter().any(|k| k.overlaps(&seg)) {
            kept.push(seg);
            continue;
        }
        if config.overlap_tolerance <= 0.0
            || kept
                .iter()
                .any(|k| temporal_iou(k, &seg) > config.overlap_tolerance)
        {
            continue;
        }
        if let Some(trimmed) = trim_against(seg, &kept) {
            kept.push(trimmed);
        }
    }
    kept.sort();
    kept
}

/// The part of `seg` not covered by `kept`, if it is one non-empty interval.
fn trim_against(seg: Segment, kept: &[Segment]) -> Option<Segment> {
    let (mut lo, mut hi) = (seg.start(), seg.end());
    for k in kept.iter().filter(|k| k.overlaps(&seg)) {
        if k.start() <= lo && k.end() >= hi {
            return None;
        }
        if k.start() > lo && k.end() < hi {
            // Trimming would split the candidate.
            return None;
        }
        if k.start() <= lo {
            lo = k.end() + 1;
        } else {
            hi = k.start() - 1;
        }
        if lo > hi {
            return None;
        }
    }
    Some(Segment::new(lo, hi))
}

/// Candidate score thresholds for the sweep.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdGrid {
    /// Every distinct prediction score plus one threshold above all scores.
    #[default]
    DistinctScores,
    /// `points` evenly spaced thresholds covering `[0, 1]`.
    Uniform(usize),
    Explicit(Vec<f64>),
}

impl ThresholdGrid {
    pub fn uniform_points(n: usize) -> Vec<f64> {
        match n {
            0 => Vec::new(),
            1 => vec![0.0],
            _ => (0..n).map(|i| i as f64 / (n - 1) as f64).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MsaConfig {
    pub grid: ThresholdGrid,
    pub selection: SelectionConfig,
}

/// Sequence accuracy of the corpus at one threshold.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MsaPoint {
    /// `f64::INFINITY` stands for "above every score".
    pub threshold: f64,
    /// Total edit distance over total reference length.
    pub pooled: f64,
    /// Mean of per-clip accuracies.
    pub mean_per_clip: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MsaValue {
    pub threshold: f64,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MsaResult {
    pub pooled: MsaValue,
    pub mean_per_clip: MsaValue,
    pub curve: Vec<MsaPoint>,
}

/// Edit distances of one clip at each of its own distinct thresholds.
#[derive(Debug, Clone)]
struct ClipSweep {
    /// Distinct scores, descending.
    scores: Vec<f64>,
    /// `distances[k]` applies when the first `k` scores pass the threshold.
    distances: Vec<usize>,
    reference_len: usize,
}

impl ClipSweep {
    fn distance_at(&self, threshold: f64) -> usize {
        let passing = self.scores.partition_point(|&s| s >= threshold);
        self.distances[passing]
    }

    fn accuracy_at(&self, threshold: f64) -> f64 {
        accuracy_from_distance(self.distance_at(threshold), self.reference_len)
    }
}

fn sweep_clip<R: Recognizer>(
    clip: &Clip,
    preds: &[ScoredSegment],
    recognizer: &R,
    selection: &SelectionConfig,
) -> Result<ClipSweep> {
    let reference = reference_sequence(clip)?;
    let mut scores: Vec<f64> = preds.iter().map(|p| p.score()).collect();
    scores.sort_by(|a, b| b.total_cmp(a));
    scores.dedup();

    let mut cache: HashMap<Segment, LetterSequence> = HashMap::new();
    let mut distances = Vec::with_capacity(scores.len() + 1);
    for k in 0..=scores.len() {
        let threshold = if k == 0 { f64::INFINITY } else { scores[k - 1] };
        let selected = select_detections_with(preds, threshold, selection);
        for &seg in &selected {
            if let std::collections::hash_map::Entry::Vacant(e) = cache.entry(seg) {
                e.insert(recognizer.recognize(clip, seg)?);
            }
        }
        let hyp = build_label_sequence(
            &clip.clip_id,
            clip.num_frames,
            selected.iter().map(|s| (*s, &cache[s])),
        )?;
        distances.push(edit_distance(reference.symbols(), hyp.symbols()));
    }
    Ok(ClipSweep {
        scores,
        distances,
        reference_len: reference.len(),
    })
}

/// Maximum sequence accuracy over a score-threshold grid.
pub fn msa<R: Recognizer>(
    clips: &[Clip],
    preds: &[Vec<ScoredSegment>],
    recognizer: &R,
    config: &MsaConfig,
) -> Result<MsaResult> {
    if clips.len() != preds.len() {
        return Err(Error::LengthMismatch {
            what: "prediction lists",
            expected: clips.len(),
            got: preds.len(),
        });
    }
    if clips.is_empty() {
        return Err(Error::Invalid("sequence accuracy of an empty corpus".into()));
    }
    if let ThresholdGrid::Uniform(0) = config.grid {
        return Err(Error::Config(
            "uniform threshold grid needs at least one point".into(),
        ));
    }
    let sweeps: Vec<ClipSweep> = clips
        .par_iter()
        .zip(preds.par_iter())
        .map(|(clip, p)| sweep_clip(clip, p, recognizer, &config.selection))
        .collect::<Result<_>>()?;
    let total_len: usize = sweeps.iter().map(|s| s.reference_len).sum();

    let curve = match &config.grid {
        ThresholdGrid::DistinctScores => distinct_score_curve(&sweeps, total_len),
        ThresholdGrid::Uniform(n) => grid_curve(&sweeps, total_len, &ThresholdGrid::uniform_points(*n)),
        ThresholdGrid::Explicit(points) => {
            if points.is_empty() {
                return Err(Error::Config("threshold grid is empty".into()));
            }
            grid_curve(&sweeps, total_len, points)
        }
    };

    let best_by = |value: fn(&MsaPoint) -> f64| {
        // Ties go to the highest threshold.
        let mut best: Option<&MsaPoint> = None;
        for p in &curve {
            let better = match best {
                None => true,
                Some(b) => value(p) > value(b) || (value(p) == value(b) && p.threshold > b.threshold),
            };
            if better {
                best = Some(p);
            }
        }
        best.map(|p| MsaValue {
            threshold: p.threshold,
            value: value(p),
        })
        .expect("threshold grid is non-empty")
    };
    let pooled = best_by(|p| p.pooled);
    let mut mean_per_clip = best_by(|p| p.mean_per_clip);
    mean_per_clip.value = mean_accuracy(&sweeps, mean_per_clip.threshold);
    Ok(MsaResult {
        pooled,
        mean_per_clip,
        curve,
    })
}

fn mean_accuracy(sweeps: &[ClipSweep], threshold: f64) -> f64 {
    sweeps.iter().map(|s| s.accuracy_at(threshold)).sum::<f64>() / sweeps.len() as f64
}

fn grid_curve(sweeps: &[ClipSweep], total_len: usize, points: &[f64]) -> Vec<MsaPoint> {
    points
        .iter()
        .map(|&threshold| {
            let distance: usize = sweeps.iter().map(|s| s.distance_at(threshold)).sum();
            MsaPoint {
                threshold,
                pooled: accuracy_from_distance(distance, total_len),
                mean_per_clip: mean_accuracy(sweeps, threshold),
            }
        })
        .collect()
}

/// Event sweep over every distinct score, from the top down.
fn distinct_score_curve(sweeps: &[ClipSweep], total_len: usize) -> Vec<MsaPoint> {
    let n = sweeps.len() as f64;
    let mut distance: usize = sweeps.iter().map(|s| s.distances[0]).sum();
    let mut acc_sum: f64 = sweeps
        .iter()
        .map(|s| accuracy_from_distance(s.distances[0], s.reference_len))
        .sum();
    let mut curve = vec![MsaPoint {
        threshold: f64::INFINITY,
        pooled: accuracy_from_distance(distance, total_len),
        mean_per_clip: acc_sum / n,
    }];

    // (score, clip, step) with step k moving clip from distances[k-1] to distances[k].
    let mut events: Vec<(f64, usize, usize)> = sweeps
        .iter()
        .enumerate()
        .flat_map(|(c, s)| s.scores.iter().enumerate().map(move |(k, &v)| (v, c, k + 1)))
        .collect();
    events.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));

    let mut i = 0;
    while i < events.len() {
        let threshold = events[i].0;
        while i < events.len() && events[i].0 == threshold {
            let (_, c, k) = events[i];
            let s = &sweeps[c];
            distance = distance + s.distances[k] - s.distances[k - 1];
            acc_sum += accuracy_from_distance(s.distances[k], s.reference_len)
                - accuracy_from_distance(s.distances[k - 1], s.reference_len);
            i += 1;
        }
        curve.push(MsaPoint {
            threshold,
            pooled: accuracy_from_distance(distance, total_len),
            mean_per_clip: acc_sum / n,
        });
    }
    curve
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::align::accuracy;
    use crate::model::LabeledSegment;
    use crate::recognizer::OracleRecognizer;

    fn lab(s: usize, e: usize, l: &str) -> LabeledSegment {
        LabeledSegment::new(Segment::new(s, e), l)
    }

    fn ss(s: usize, e: usize, score: f64) -> ScoredSegment {
        ScoredSegment::new(Segment::new(s, e), score).unwrap()
    }

    fn seq(s: &str) -> Vec<Symbol> {
        s.chars()
            .map(|c| {
                if c == '∅' {
                    Symbol::NoLetter
                } else {
                    Symbol::Letter(c)
                }
            })
            .collect()
    }

    #[test]
    fn reference_sequence_figure_style() {
        // Signing runs to the first frame and the last, with a gap between.
        let clip = Clip::new("fig", 60, vec![lab(0, 20, "PIRATES"), lab(30, 59, "PATRICK")]);
        let r = reference_sequence(&clip).unwrap();
        assert_eq!(r.to_string(), "PIRATES∅PATRICK");
    }

    #[test]
    fn reference_sequence_without_gaps() {
        let clip = Clip::new("c", 10, vec![lab(0, 4, "AB"), lab(5, 9, "CD")]);
        assert_eq!(reference_sequence(&clip).unwrap().symbols(), seq("ABCD"));
    }

    #[test]
    fn reference_sequence_with_both_margins() {
        let clip = Clip::new("c", 20, vec![lab(5, 9, "AB")]);
        assert_eq!(reference_sequence(&clip).unwrap().symbols(), seq("∅AB∅"));
        let empty = Clip::new("c", 20, vec![]);
        assert_eq!(reference_sequence(&empty).unwrap().symbols(), seq("∅"));
    }

    #[test]
    fn build_rejects_overlap_and_merges_empty_segments() {
        let ab: LetterSequence = "AB".into();
        let none = LetterSequence::empty();
        let err = build_label_sequence("c", 30, [(Segment::new(0, 9), &ab), (Segment::new(5, 12), &ab)]);
        assert!(matches!(err, Err(Error::Overlap { .. })));
        let merged = build_label_sequence(
            "c",
            30,
            [(Segment::new(3, 5), &none), (Segment::new(10, 12), &ab)],
        )
        .unwrap();
        assert_eq!(merged.symbols(), seq("∅AB∅"));
    }

    #[test]
    fn selection_examples() {
        let preds = [ss(0, 9, 0.9), ss(2, 11, 0.8), ss(20, 29, 0.7)];
        assert_eq!(
            select_detections(&preds, 0.5),
            vec![Segment::new(0, 9), Segment::new(20, 29)]
        );
        assert!(select_detections(&preds, 0.95).is_empty());
        let disjoint = [ss(20, 29, 0.9), ss(0, 9, 0.6)];
        assert_eq!(
            select_detections(&disjoint, 0.1),
            vec![Segment::new(0, 9), Segment::new(20, 29)]
        );
    }

    #[test]
    fn selection_with_tolerance_trims() {
        let preds = [ss(0, 9, 0.9), ss(8, 19, 0.8), ss(2, 5, 0.7)];
        let cfg = SelectionConfig {
            overlap_tolerance: 0.2,
        };
        assert_eq!(
            select_detections_with(&preds, 0.0, &cfg),
            vec![Segment::new(0, 9), Segment::new(10, 19)]
        );
    }

    #[test]
    fn msa_perfect_detections_is_one() {
        let clips = vec![
            Clip::new("a", 40, vec![lab(3, 9, "AB"), lab(20, 30, "CDE")]),
            Clip::new("b", 15, vec![lab(0, 14, "XYZ")]),
        ];
        let preds: Vec<Vec<ScoredSegment>> = clips
            .iter()
            .map(|c| {
                c.gt_segments()
                    .into_iter()
                    .map(|g| ScoredSegment::new(g, 0.8).unwrap())
                    .collect()
            })
            .collect();
        let r = msa(&clips, &preds, &OracleRecognizer, &MsaConfig::default()).unwrap();
        assert_eq!(r.pooled.value, 1.0);
        assert_eq!(r.pooled.threshold, 0.8);
        assert_eq!(r.mean_per_clip.value, 1.0);
    }

    #[test]
    fn msa_without_detections() {
        let clips = vec![Clip::new("a", 20, vec![lab(0, 9, "AB")])];
        let r = msa(&clips, &[vec![]], &OracleRecognizer, &MsaConfig::default()).unwrap();
        // Reference "AB∅" against "∅": two deletions.
        assert_eq!(r.pooled.value, 1.0 - 2.0 / 3.0);
        assert_eq!(accuracy(&seq("∅AB∅"), &seq("∅")).unwrap(), 0.25);
    }

    #[test]
    fn msa_grid_variants_agree_on_reachable_thresholds() {
        let clips = vec![Clip::new("a", 50, vec![lab(5, 14, "ABCD"), lab(30, 44, "EFG")])];
        let preds = vec![vec![ss(4, 14, 0.9), ss(30, 40, 0.55), ss(20, 25, 0.3)]];
        let distinct = msa(&clips, &preds, &OracleRecognizer, &MsaConfig::default()).unwrap();
        let uniform = msa(
            &clips,
            &preds,
            &OracleRecognizer,
            &MsaConfig {
                grid: ThresholdGrid::Uniform(1000),
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(distinct.pooled.value, uniform.pooled.value);
        assert_eq!(distinct.curve.len(), 4);
    }
}
