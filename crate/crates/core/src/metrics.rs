//! Temporal IoU, greedy score-ordered matching, precision-recall curves and
//! interpolated average precision.
//!
//! Matching follows the usual detection protocol: predictions are visited
//! in descending score order and each one claims the best still-unmatched
//! ground truth that clears the threshold. Both thresholds are strict.
//!
//! Determinism rules:
//! - score ties are broken by earlier segment start, then input order;
//! - quality ties (equal IoU or accuracy) go to the ground truth with the
//!   lower start frame, then the lower index.
//!
//! At corpus level matching runs per clip and the precision-recall curve
//! is built over the globally score-sorted union of predictions.

use std::cmp::Ordering;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::align::letter_accuracy;
use crate::error::{Error, Result};
use crate::model::{Clip, LabeledSegment, LetterSequence, ScoredSegment, Segment};

/// Intersection over union of two inclusive frame intervals.
pub fn temporal_iou(a: &Segment, b: &Segment) -> f64 {
    let inter = a.intersection_len(b);
    if inter == 0 {
        return 0.0;
    }
    let union = a.len() + b.len() - inter;
    inter as f64 / union as f64
}

/// Which recall levels the interpolated AP averages over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecallGrid {
    /// `1/N_r, 2/N_r, ..., 1`, averaged with factor `1/N_r`.
    #[default]
    Printed,
    /// `0, 1/N_r, ..., 1`, averaged with factor `1/(N_r + 1)`.
    WithZero,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ApConfig {
    pub num_recall_levels: usize,
    pub recall_grid: RecallGrid,
}

impl Default for ApConfig {
    fn default() -> Self {
        ApConfig {
            num_recall_levels: 100,
            recall_grid: RecallGrid::Printed,
        }
    }
}

impl ApConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_recall_levels == 0 {
            return Err(Error::Config("number of recall levels must be at least 1".into()));
        }
        Ok(())
    }
}

fn check_iou_threshold(t: f64) -> Result<()> {
    if !(0.0..1.0).contains(&t) {
        return Err(Error::Config(format!("IoU threshold {t} is outside [0, 1)")));
    }
    Ok(())
}

fn check_acc_threshold(t: f64) -> Result<()> {
    if t.is_nan() || t > 1.0 {
        return Err(Error::Config(format!("accuracy threshold {t} must be at most 1")));
    }
    Ok(())
}

/// Descending score, then earlier start. `sort_by` is stable, so input
/// order settles the remaining ties.
pub(crate) fn by_score_desc(a: &ScoredSegment, b: &ScoredSegment) -> Ordering {
    b.score()
        .total_cmp(&a.score())
        .then(a.segment.start().cmp(&b.segment.start()))
}

/// Indices of `preds` in processing order.
pub fn score_order(preds: &[ScoredSegment]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&i, &j| by_score_desc(&preds[i], &preds[j]));
    order
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Match {
    pub gt: usize,
    /// IoU or accuracy, depending on the matching rule.
    pub quality: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    /// Prediction indices in the order they were processed.
    pub order: Vec<usize>,
    /// Indexed by prediction.
    pub assignments: Vec<Option<Match>>,
}

impl MatchResult {
    pub fn num_matched(&self) -> usize {
        self.assignments.iter().flatten().count()
    }

    pub fn is_matched(&self, pred: usize) -> bool {
        self.assignments[pred].is_some()
    }

    /// Matched flags in processing order.
    pub fn flags_in_order(&self) -> Vec<bool> {
        self.order.iter().map(|&i| self.is_matched(i)).collect()
    }
}

fn greedy_match(
    preds: &[ScoredSegment],
    gt_starts: &[usize],
    quality: impl Fn(usize, usize) -> Option<f64>,
) -> MatchResult {
    let order = score_order(preds);
    let mut taken = vec![false; gt_starts.len()];
    let mut assignments = vec![None; preds.len()];
    for &i in &order {
        let mut best: Option<Match> = None;
        for (j, _) in taken.iter().enumerate().filter(|(_, t)| !**t) {
            let Some(q) = quality(i, j) else { continue };
            let better = match best {
                None => true,
                Some(b) => match q.total_cmp(&b.quality) {
                    Ordering::Greater => true,
                    Ordering::Less => false,
                    Ordering::Equal => gt_starts[j] < gt_starts[b.gt],
                },
            };
            if better {
                best = Some(Match { gt: j, quality: q });
            }
        }
        if let Some(m) = best {
            debug_assert!(!taken[m.gt], "ground truth assigned twice");
            taken[m.gt] = true;
            assignments[i] = Some(m);
        }
    }
    MatchResult { order, assignments }
}

/// Greedy IoU matching; a candidate needs `IoU > iou_threshold`.
pub fn match_by_iou(preds: &[ScoredSegment], gt: &[Segment], iou_threshold: f64) -> MatchResult {
    let starts: Vec<usize> = gt.iter().map(|g| g.start()).collect();
    greedy_match(preds, &starts, |i, j| {
        let iou = temporal_iou(&preds[i].segment, &gt[j]);
        (iou > iou_threshold).then_some(iou)
    })
}

/// Greedy accuracy matching. A candidate needs `IoU > iou_threshold` and
/// `Acc > acc_threshold`; the most accurate candidate wins.
pub fn match_by_accuracy(
    preds: &[ScoredSegment],
    recognized: &[LetterSequence],
    gt: &[LabeledSegment],
    iou_threshold: f64,
    acc_threshold: f64,
) -> Result<MatchResult> {
    if recognized.len() != preds.len() {
        return Err(Error::LengthMismatch {
            what: "recognizer outputs",
            expected: preds.len(),
            got: recognized.len(),
        });
    }
    let starts: Vec<usize> = gt.iter().map(|g| g.segment.start()).collect();
    let result = greedy_match(preds, &starts, |i, j| {
        if temporal_iou(&preds[i].segment, &gt[j].segment) <= iou_threshold {
            return None;
        }
        // Ground-truth labels are non-empty after validation.
        let acc = letter_accuracy(&gt[j].letters, &recognized[i]).ok()?;
        (acc > acc_threshold).then_some(acc)
    });
    Ok(result)
}

/// A point on the precision-recall curve, kept as exact counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PrPoint {
    pub true_positives: usize,
    /// Number of predictions retained.
    pub rank: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PrCurve {
    pub points: Vec<PrPoint>,
    pub num_gt: usize,
}

impl PrCurve {
    pub fn precision(&self, p: &PrPoint) -> f64 {
        p.true_positives as f64 / p.rank as f64
    }

    pub fn recall(&self, p: &PrPoint) -> f64 {
        p.true_positives as f64 / self.num_gt as f64
    }

    /// `(recall, precision)` pairs.
    pub fn recall_precision(&self) -> Vec<(f64, f64)> {
        self.points
            .iter()
            .map(|p| (self.recall(p), self.precision(p)))
            .collect()
    }
}

/// Precision and recall after each of the top-m predictions.
pub fn pr_curve(matched_in_score_order: &[bool], num_gt: usize) -> Result<PrCurve> {
    if num_gt == 0 {
        return Err(Error::ZeroGroundTruth);
    }
    let mut tp = 0;
    let points = matched_in_score_order
        .iter()
        .enumerate()
        .map(|(m, &hit)| {
            tp += usize::from(hit);
            PrPoint {
                true_positives: tp,
                rank: m + 1,
            }
        })
        .collect();
    Ok(PrCurve { points, num_gt })
}

/// Interpolated AP: the mean over recall levels of the best precision
/// reached at a recall of at least that level (zero when never reached).
pub fn average_precision(curve: &PrCurve, config: &ApConfig) -> f64 {
    let n_r = config.num_recall_levels;
    let first_level = match config.recall_grid {
        RecallGrid::Printed => 1,
        RecallGrid::WithZero => 0,
    };
    let divisor = (n_r + 1 - first_level) as f64;

    // Best precision from each point onwards.
    let mut suffix_max = vec![0.0f64; curve.points.len() + 1];
    for (k, p) in curve.points.iter().enumerate().rev() {
        suffix_max[k] = suffix_max[k + 1].max(curve.precision(p));
    }

    let mut sum = 0.0;
    let mut k = 0;
    for level in first_level..=n_r {
        // recall >= level / n_r, compared exactly on integers.
        while k < curve.points.len() && curve.points[k].true_positives * n_r < level * curve.num_gt {
            k += 1;
        }
        sum += suffix_max[k];
    }
    sum / divisor
}

/// Per-clip IoU matching over a corpus; `preds[c]` belongs to `clips[c]`.
pub fn match_corpus_by_iou(
    clips: &[Clip],
    preds: &[Vec<ScoredSegment>],
    iou_threshold: f64,
) -> Result<Vec<MatchResult>> {
    check_iou_threshold(iou_threshold)?;
    check_aligned(clips, preds.len(), "prediction lists")?;
    Ok(clips
        .par_iter()
        .zip(preds.par_iter())
        .map(|(clip, p)| match_by_iou(p, &clip.gt_segments(), iou_threshold))
        .collect())
}

/// Per-clip accuracy matching over a corpus.
pub fn match_corpus_by_accuracy(
    clips: &[Clip],
    preds: &[Vec<ScoredSegment>],
    recognized: &[Vec<LetterSequence>],
    iou_threshold: f64,
    acc_threshold: f64,
) -> Result<Vec<MatchResult>> {
    check_iou_threshold(iou_threshold)?;
    check_acc_threshold(acc_threshold)?;
    check_aligned(clips, preds.len(), "prediction lists")?;
    check_aligned(clips, recognized.len(), "recognizer output lists")?;
    clips
        .par_iter()
        .zip(preds.par_iter().zip(recognized.par_iter()))
        .map(|(clip, (p, r))| match_by_accuracy(p, r, &clip.ground_truth, iou_threshold, acc_threshold))
        .collect()
}

fn check_aligned(clips: &[Clip], got: usize, what: &'static str) -> Result<()> {
    if clips.len() != got {
        return Err(Error::LengthMismatch {
            what,
            expected: clips.len(),
            got,
        });
    }
    Ok(())
}

/// Global processing order over a corpus as `(clip, prediction)` pairs.
pub fn corpus_score_order(preds: &[Vec<ScoredSegment>]) -> Vec<(usize, usize)> {
    let mut all: Vec<(usize, usize)> = preds
        .iter()
        .enumerate()
        .flat_map(|(c, p)| (0..p.len()).map(move |i| (c, i)))
        .collect();
    all.sort_by(|&(c1, i1), &(c2, i2)| by_score_desc(&preds[c1][i1], &preds[c2][i2]));
    all
}

/// Pool per-clip matches into one corpus-level curve.
pub fn pooled_curve(
    clips: &[Clip],
    preds: &[Vec<ScoredSegment>],
    matches: &[MatchResult],
) -> Result<PrCurve> {
    let num_gt = clips.iter().map(|c| c.ground_truth.len()).sum();
    let flags: Vec<bool> = corpus_score_order(preds)
        .into_iter()
        .map(|(c, i)| matches[c].is_matched(i))
        .collect();
    pr_curve(&flags, num_gt)
}

pub fn ap_at_iou(
    clips: &[Clip],
    preds: &[Vec<ScoredSegment>],
    iou_threshold: f64,
    config: &ApConfig,
) -> Result<f64> {
    config.validate()?;
    let matches = match_corpus_by_iou(clips, preds, iou_threshold)?;
    let curve = pooled_curve(clips, preds, &matches)?;
    Ok(average_precision(&curve, config))
}

/// AP@Acc. `recognized[c][i]` is the recognizer output for `preds[c][i]`.
pub fn ap_at_acc(
    clips: &[Clip],
    preds: &[Vec<ScoredSegment>],
    recognized: &[Vec<LetterSequence>],
    iou_threshold: f64,
    acc_threshold: f64,
    config: &ApConfig,
) -> Result<f64> {
    config.validate()?;
    let matches = match_corpus_by_accuracy(clips, preds, recognized, iou_threshold, acc_threshold)?;
    let curve = pooled_curve(clips, preds, &matches)?;
    Ok(average_precision(&curve, config))
}

/// Per-frame probability from region proposals: the highest score among
/// proposals containing the frame, 0 where none does.
pub fn frame_probs_from_proposals(num_frames: usize, proposals: &[ScoredSegment]) -> Vec<f64> {
    let mut probs = vec![0.0f64; num_frames];
    for p in proposals {
        let end = p.segment.end().min(num_frames.saturating_sub(1));
        for v in probs.iter_mut().take(end + 1).skip(p.segment.start()) {
            *v = v.max(p.score());
        }
    }
    probs
}

/// Frame-level precision-recall curve. Frames with equal probability are
/// admitted together, so each point corresponds to one threshold.
pub fn frame_level_curve(clips: &[Clip], frame_probs: &[Vec<f64>]) -> Result<PrCurve> {
    check_aligned(clips, frame_probs.len(), "frame probability lists")?;
    let mut frames: Vec<(f64, bool)> = Vec::new();
    for (clip, probs) in clips.iter().zip(frame_probs) {
        if probs.len() != clip.num_frames {
            return Err(Error::LengthMismatch {
                what: "frame probabilities",
                expected: clip.num_frames,
                got: probs.len(),
            });
        }
        let mut positive = vec![false; clip.num_frames];
        for g in &clip.ground_truth {
            positive[g.segment.start()..=g.segment.end()].fill(true);
        }
        frames.extend(probs.iter().copied().zip(positive));
    }
    let num_pos = frames.iter().filter(|f| f.1).count();
    if num_pos == 0 {
        return Err(Error::ZeroGroundTruth);
    }
    frames.sort_by(|a, b| b.0.total_cmp(&a.0));

    let mut points = Vec::new();
    let mut tp = 0;
    for (k, &(prob, positive)) in frames.iter().enumerate() {
        tp += usize::from(positive);
        let group_ends = frames.get(k + 1).is_none_or(|next| next.0 != prob);
        if group_ends {
            points.push(PrPoint {
                true_positives: tp,
                rank: k + 1,
            });
        }
    }
    Ok(PrCurve {
        points,
        num_gt: num_pos,
    })
}

pub fn frame_level_ap(clips: &[Clip], frame_probs: &[Vec<f64>], config: &ApConfig) -> Result<f64> {
    config.validate()?;
    Ok(average_precision(&frame_level_curve(clips, frame_probs)?, config))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ss(s: usize, e: usize, score: f64) -> ScoredSegment {
        ScoredSegment::new(Segment::new(s, e), score).unwrap()
    }

    fn lab(s: usize, e: usize, l: &str) -> LabeledSegment {
        LabeledSegment::new(Segment::new(s, e), l)
    }

    #[test]
    fn iou_examples() {
        let s = Segment::new;
        assert_eq!(temporal_iou(&s(0, 9), &s(0, 9)), 1.0);
        assert_eq!(temporal_iou(&s(0, 9), &s(5, 14)), 1.0 / 3.0);
        assert_eq!(temporal_iou(&s(0, 4), &s(10, 19)), 0.0);
    }

    #[test]
    fn iou_matching_consumes_ground_truth() {
        let preds = [ss(0, 9, 0.9), ss(5, 14, 0.8)];
        let m = match_by_iou(&preds, &[Segment::new(4, 13)], 0.1);
        assert_eq!(
            m.assignments[0],
            Some(Match {
                gt: 0,
                quality: 3.0 / 7.0
            })
        );
        assert_eq!(m.assignments[1], None);
    }

    #[test]
    fn iou_matching_identity_and_disjoint() {
        let gt = [Segment::new(0, 4), Segment::new(10, 20), Segment::new(30, 31)];
        let preds: Vec<_> = gt
            .iter()
            .zip([0.2, 0.9, 0.5])
            .map(|(g, s)| ss(g.start(), g.end(), s))
            .collect();
        let m = match_by_iou(&preds, &gt, 0.5);
        for (i, a) in m.assignments.iter().enumerate() {
            assert_eq!(a.unwrap().gt, i);
        }
        let m = match_by_iou(&[ss(0, 4, 0.9)], &[Segment::new(10, 19)], 0.1);
        assert_eq!(m.num_matched(), 0);
    }

    #[test]
    fn iou_ties_prefer_earlier_ground_truth() {
        // Equal IoU with both ground truths.
        let gt = [Segment::new(10, 19), Segment::new(0, 9)];
        let m = match_by_iou(&[ss(5, 14, 1.0)], &gt, 0.0);
        assert_eq!(m.assignments[0].unwrap().gt, 1);
    }

    #[test]
    fn score_ties_prefer_earlier_start_then_input_order() {
        let preds = [ss(10, 12, 0.5), ss(3, 4, 0.5), ss(3, 8, 0.5), ss(0, 1, 0.7)];
        assert_eq!(score_order(&preds), vec![3, 1, 2, 0]);
    }

    #[test]
    fn accuracy_matching_examples() {
        let gt = [lab(0, 9, "AB")];
        let preds = [ss(2, 9, 0.7)];
        let m = match_by_accuracy(&preds, &["AB".into()], &gt, 0.0, 0.0).unwrap();
        assert_eq!(m.assignments[0], Some(Match { gt: 0, quality: 1.0 }));
        let m = match_by_accuracy(&preds, &["XY".into()], &gt, 0.0, 0.0).unwrap();
        assert_eq!(m.num_matched(), 0);
        let m = match_by_accuracy(&[ss(20, 25, 0.7)], &["AB".into()], &gt, 0.0, -10.0).unwrap();
        assert_eq!(m.num_matched(), 0);
        assert!(matches!(
            match_by_accuracy(&preds, &[], &gt, 0.0, 0.0),
            Err(Error::LengthMismatch { .. })
        ));
    }

    #[test]
    fn accuracy_matching_picks_most_accurate_not_highest_iou() {
        let gt = [lab(0, 9, "AB"), lab(12, 40, "CDE")];
        // Higher IoU with gt 1, but the transcript matches gt 0.
        let preds = [ss(5, 30, 0.9)];
        let m = match_by_accuracy(&preds, &["AB".into()], &gt, 0.0, 0.0).unwrap();
        assert_eq!(m.assignments[0].unwrap().gt, 0);
    }

    #[test]
    fn pr_curve_examples() {
        let rp = |flags: &[bool], g| pr_curve(flags, g).unwrap().recall_precision();
        assert_eq!(rp(&[true], 1), vec![(1.0, 1.0)]);
        assert_eq!(rp(&[true, false], 2), vec![(0.5, 1.0), (0.5, 0.5)]);
        assert_eq!(rp(&[false], 1), vec![(0.0, 0.0)]);
        assert!(matches!(pr_curve(&[true], 0), Err(Error::ZeroGroundTruth)));
    }

    #[test]
    fn average_precision_examples() {
        let cfg = ApConfig::default();
        assert_eq!(average_precision(&pr_curve(&[true], 1).unwrap(), &cfg), 1.0);
        assert_eq!(
            average_precision(&pr_curve(&[true, false], 2).unwrap(), &cfg),
            0.5
        );
        assert_eq!(average_precision(&pr_curve(&[], 3).unwrap(), &cfg), 0.0);
    }

    #[test]
    fn recall_grid_with_zero_level() {
        let cfg = ApConfig {
            num_recall_levels: 100,
            recall_grid: RecallGrid::WithZero,
        };
        let curve = pr_curve(&[true, false], 2).unwrap();
        // Levels 0..=50 reach precision 1: 51 of 101.
        assert_eq!(average_precision(&curve, &cfg), 51.0 / 101.0);
    }

    #[test]
    fn corpus_ap_gt_replay_and_empty() {
        let clips = vec![
            Clip::new("a", 50, vec![lab(0, 9, "AB"), lab(20, 29, "C")]),
            Clip::new("b", 50, vec![lab(5, 40, "XYZ")]),
        ];
        let preds: Vec<Vec<ScoredSegment>> = clips
            .iter()
            .map(|c| {
                c.gt_segments()
                    .iter()
                    .map(|g| ScoredSegment::new(*g, 1.0).unwrap())
                    .collect()
            })
            .collect();
        for d in [0.1, 0.3, 0.5] {
            assert_eq!(ap_at_iou(&clips, &preds, d, &ApConfig::default()).unwrap(), 1.0);
        }
        let none = vec![vec![], vec![]];
        assert_eq!(ap_at_iou(&clips, &none, 0.5, &ApConfig::default()).unwrap(), 0.0);
        assert!(matches!(
            ap_at_iou(&clips, &preds, 1.0, &ApConfig::default()),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn frame_probabilities_from_proposals() {
        let probs = frame_probs_from_proposals(10, &[ss(0, 4, 0.9)]);
        assert_eq!(probs, [0.9, 0.9, 0.9, 0.9, 0.9, 0.0, 0.0, 0.0, 0.0, 0.0]);
        let probs = frame_probs_from_proposals(6, &[ss(0, 4, 0.3), ss(2, 5, 0.6)]);
        assert_eq!(probs, [0.3, 0.3, 0.6, 0.6, 0.6, 0.6]);
    }

    #[test]
    fn frame_level_ap_examples() {
        let clips = vec![Clip::new("a", 10, vec![lab(0, 4, "A")])];
        let cfg = ApConfig::default();
        let perfect: Vec<f64> = (0..10).map(|t| if t < 5 { 1.0 } else { 0.0 }).collect();
        assert_eq!(frame_level_ap(&clips, &[perfect], &cfg).unwrap(), 1.0);
        assert_eq!(frame_level_ap(&clips, &[vec![0.5; 10]], &cfg).unwrap(), 0.5);
    }
}
