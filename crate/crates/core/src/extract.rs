//! Detector-side post-processing: turning frame posteriors into scored
//! segments, greedy temporal NMS, and the 1-D anchor machinery of a
//! region-proposal detector.

use std::collections::HashSet;

use crate::error::{Error, Result};
use crate::metrics::{by_score_desc, temporal_iou};
use crate::model::{ScoredSegment, Segment};

/// Default posterior thresholds for building a segment pool, 0.9 down to 0.1.
pub const DEFAULT_POOL_THRESHOLDS: [f64; 9] = [0.9, 0.8, 0.7, 0.6, 0.5, 0.4, 0.3, 0.2, 0.1];

pub const DEFAULT_NMS_THRESHOLD: f64 = 0.7;

/// Maximal runs of frames with `p[t] >= threshold`, each scored by the mean
/// posterior over its frames.
pub fn runs_from_posteriors(probs: &[f64], threshold: f64) -> Vec<ScoredSegment> {
    let mut out = Vec::new();
    let mut t = 0;
    while t < probs.len() {
        if probs[t] < threshold {
            t += 1;
            continue;
        }
        let start = t;
        let mut sum = 0.0;
        while t < probs.len() && probs[t] >= threshold {
            sum += probs[t];
            t += 1;
        }
        let score = (sum / (t - start) as f64).clamp(0.0, 1.0);
        out.push(
            ScoredSegment::new(Segment::new(start, t - 1), score)
                .expect("mean of probabilities lies in [0, 1]"),
        );
    }
    out
}

fn check_probabilities(probs: &[f64]) -> Result<()> {
    match probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        Some(p) => Err(Error::Invalid(format!("frame probability {p} is outside [0, 1]"))),
        None => Ok(()),
    }
}

/// Union of runs over decreasing thresholds, one entry per distinct span.
pub fn build_segment_pool(probs: &[f64], thresholds: &[f64]) -> Result<Vec<ScoredSegment>> {
    check_probabilities(probs)?;
    if thresholds.iter().any(|t| !(*t > 0.0 && *t < 1.0)) {
        return Err(Error::Config("pool thresholds must lie in (0, 1)".into()));
    }
    if thresholds.windows(2).any(|w| w[0] <= w[1]) {
        return Err(Error::Config(
            "pool thresholds must be strictly descending".into(),
        ));
    }
    let mut seen = HashSet::new();
    let mut pool = Vec::new();
    for &t in thresholds {
        for run in runs_from_posteriors(probs, t) {
            if seen.insert(run.segment) {
                pool.push(run);
            }
        }
    }
    Ok(pool)
}

/// Greedy NMS: keep in descending score order, dropping any candidate whose
/// IoU with a kept segment exceeds `threshold`. Output is in score order.
pub fn nms(preds: &[ScoredSegment], threshold: f64) -> Vec<ScoredSegment> {
    let mut sorted = preds.to_vec();
    sorted.sort_by(by_score_desc);
    let mut kept: Vec<ScoredSegment> = Vec::new();
    for cand in sorted {
        if kept
            .iter()
            .all(|k| temporal_iou(&k.segment, &cand.segment) <= threshold)
        {
            kept.push(cand);
        }
    }
    kept
}

/// Score filter (`score >= min_score`) followed by NMS.
pub fn cull(pool: &[ScoredSegment], min_score: f64, nms_threshold: f64) -> Vec<ScoredSegment> {
    let passing: Vec<ScoredSegment> = pool.iter().filter(|p| p.score() >= min_score).copied().collect();
    nms(&passing, nms_threshold)
}

/// Posterior-to-detection pipeline used for frame-based detectors.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtractConfig {
    pub pool_thresholds: Vec<f64>,
    pub min_score: f64,
    pub nms_threshold: f64,
}

impl Default for ExtractConfig {
    fn default() -> Self {
        ExtractConfig {
            pool_thresholds: DEFAULT_POOL_THRESHOLDS.to_vec(),
            min_score: 0.0,
            nms_threshold: DEFAULT_NMS_THRESHOLD,
        }
    }
}

pub fn extract_segments(probs: &[f64], config: &ExtractConfig) -> Result<Vec<ScoredSegment>> {
    if !(0.0..=1.0).contains(&config.nms_threshold) {
        return Err(Error::Config(format!(
            "NMS threshold {} is outside [0, 1]",
            config.nms_threshold
        )));
    }
    let pool = build_segment_pool(probs, &config.pool_thresholds)?;
    Ok(cull(&pool, config.min_score, config.nms_threshold))
}

/// Anchor lengths in frames, roughly geometric over `[8, 320]`.
pub const DEFAULT_ANCHOR_LENGTHS: [usize; 12] = [8, 12, 16, 24, 32, 48, 64, 96, 128, 192, 256, 320];
pub const ANCHOR_STRIDE: usize = 8;
pub const MIN_ANCHOR_LENGTH: usize = 8;
pub const MAX_ANCHOR_LENGTH: usize = 320;
pub const POSITIVE_IOU: f64 = 0.7;
pub const NEGATIVE_IOU: f64 = 0.3;

/// A fixed-length candidate interval. Covers `[center - length/2,
/// center + length/2)` in continuous frame coordinates, where frame `f`
/// occupies `[f, f + 1)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Anchor {
    pub center: f64,
    pub length: usize,
}

impl Anchor {
    pub fn bounds(&self) -> (f64, f64) {
        let half = self.length as f64 / 2.0;
        (self.center - half, self.center + half)
    }

    /// IoU with a segment, measured in continuous frame coordinates.
    pub fn iou(&self, segment: &Segment) -> f64 {
        let (a0, a1) = self.bounds();
        let (b0, b1) = (segment.start() as f64, (segment.end() + 1) as f64);
        let inter = (a1.min(b1) - a0.max(b0)).max(0.0);
        if inter == 0.0 {
            return 0.0;
        }
        inter / ((a1 - a0) + (b1 - b0) - inter)
    }
}

/// One anchor per (feature position, length); positions are
/// `stride * j + stride / 2` for `j < ceil(num_frames / stride)`.
pub fn generate_anchors(num_frames: usize, lengths: &[usize], stride: usize) -> Result<Vec<Anchor>> {
    if stride == 0 {
        return Err(Error::Config("anchor stride must be positive".into()));
    }
    if lengths.is_empty() {
        return Err(Error::Config("no anchor lengths given".into()));
    }
    if let Some(l) = lengths
        .iter()
        .find(|l| !(MIN_ANCHOR_LENGTH..=MAX_ANCHOR_LENGTH).contains(*l))
    {
        return Err(Error::Config(format!(
            "anchor length {l} is outside [{MIN_ANCHOR_LENGTH}, {MAX_ANCHOR_LENGTH}]"
        )));
    }
    if lengths.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config("anchor lengths must be strictly ascending".into()));
    }
    let positions = num_frames.div_ceil(stride);
    let half = stride as f64 / 2.0;
    Ok((0..positions)
        .flat_map(|j| {
            let center = (stride * j) as f64 + half;
            lengths.iter().map(move |&length| Anchor { center, length })
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AnchorLabel {
    Positive { gt: usize, iou: f64 },
    Negative,
    Ignore,
}

/// Positive at max IoU >= 0.7, negative at <= 0.3, ignored in between.
pub fn label_anchors(anchors: &[Anchor], gt: &[Segment]) -> Vec<AnchorLabel> {
    anchors
        .iter()
        .map(|a| {
            let mut best: Option<(usize, f64)> = None;
            for (j, g) in gt.iter().enumerate() {
                let iou = a.iou(g);
                if best.is_none_or(|(_, b)| iou > b) {
                    best = Some((j, iou));
                }
            }
            match best {
                Some((j, iou)) if iou >= POSITIVE_IOU => AnchorLabel::Positive { gt: j, iou },
                Some((_, iou)) if iou > NEGATIVE_IOU => AnchorLabel::Ignore,
                _ => AnchorLabel::Negative,
            }
        })
        .collect()
}

/// Center shift normalized by anchor length, and log length ratio.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OffsetPair {
    pub dc: f64,
    pub dl: f64,
}

fn segment_center(s: &Segment) -> f64 {
    (s.start() + s.end() + 1) as f64 / 2.0
}

pub fn encode_offsets(gt: &Segment, anchor: &Anchor) -> OffsetPair {
    let la = anchor.length as f64;
    OffsetPair {
        dc: (segment_center(gt) - anchor.center) / la,
        dl: (gt.len() as f64 / la).ln(),
    }
}

/// Inverse of [`encode_offsets`], rounded to whole frames and clipped to
/// `[0, num_frames - 1]`.
pub fn decode_offsets(offsets: &OffsetPair, anchor: &Anchor, num_frames: usize) -> Result<Segment> {
    if num_frames == 0 {
        return Err(Error::Config("cannot decode into an empty clip".into()));
    }
    let la = anchor.length as f64;
    let center = anchor.center + offsets.dc * la;
    let length = la * offsets.dl.exp();
    let last = (num_frames - 1) as f64;
    let start = (center - length / 2.0).round().clamp(0.0, last);
    let end = ((center + length / 2.0).round() - 1.0).clamp(start, last);
    Ok(Segment::new(start as usize, end as usize))
}

/// Per-anchor training target for the detection loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AnchorTarget {
    Positive(OffsetPair),
    Negative,
    Ignore,
}

/// Regression targets for labelled anchors.
pub fn anchor_targets(anchors: &[Anchor], labels: &[AnchorLabel], gt: &[Segment]) -> Vec<AnchorTarget> {
    anchors
        .iter()
        .zip(labels)
        .map(|(a, l)| match l {
            AnchorLabel::Positive { gt: j, .. } => AnchorTarget::Positive(encode_offsets(&gt[*j], a)),
            AnchorLabel::Negative => AnchorTarget::Negative,
            AnchorLabel::Ignore => AnchorTarget::Ignore,
        })
        .collect()
}

pub fn smooth_l1(x: f64) -> f64 {
    let a = x.abs();
    if a < 1.0 {
        0.5 * x * x
    } else {
        a - 0.5
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectionLoss {
    pub classification: f64,
    pub regression: f64,
}

impl DetectionLoss {
    pub fn total(&self) -> f64 {
        self.classification + self.regression
    }
}

/// Mean binary cross-entropy over positive and negative anchors plus mean
/// smooth-L1 (summed over both offset components) over positive anchors.
/// Ignored anchors contribute nothing; empty sets give zero.
pub fn detection_loss(
    scores: &[f64],
    offsets: &[OffsetPair],
    targets: &[AnchorTarget],
) -> Result<DetectionLoss> {
    for (what, got) in [("anchor scores", scores.len()), ("anchor offsets", offsets.len())] {
        if got != targets.len() {
            return Err(Error::LengthMismatch {
                what,
                expected: targets.len(),
                got,
            });
        }
    }
    if let Some(p) = scores.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::Invalid(format!("anchor score {p} is outside [0, 1]")));
    }
    let (mut cls, mut n_cls, mut reg, mut n_pos) = (0.0, 0usize, 0.0, 0usize);
    for ((&p, off), target) in scores.iter().zip(offsets).zip(targets) {
        match target {
            AnchorTarget::Positive(t) => {
                cls -= p.ln();
                n_cls += 1;
                reg += smooth_l1(off.dc - t.dc) + smooth_l1(off.dl - t.dl);
                n_pos += 1;
            }
            AnchorTarget::Negative => {
                cls -= (1.0 - p).ln();
                n_cls += 1;
            }
            AnchorTarget::Ignore => {}
        }
    }
    let mean = |sum: f64, n: usize| if n == 0 { 0.0 } else { sum / n as f64 };
    Ok(DetectionLoss {
        classification: mean(cls, n_cls),
        regression: mean(reg, n_pos),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn ss(s: usize, e: usize, score: f64) -> ScoredSegment {
        ScoredSegment::new(Segment::new(s, e), score).unwrap()
    }

    fn spans(v: &[ScoredSegment]) -> Vec<(usize, usize)> {
        v.iter().map(|p| (p.segment.start(), p.segment.end())).collect()
    }

    #[test]
    fn runs_examples() {
        let runs = runs_from_posteriors(&[0.1, 0.9, 0.8, 0.2], 0.5);
        assert_eq!(spans(&runs), vec![(1, 2)]);
        assert_relative_eq!(runs[0].score(), 0.85, epsilon = 1e-12);
        assert!(runs_from_posteriors(&[0.1, 0.2], 0.5).is_empty());
        assert_eq!(spans(&runs_from_posteriors(&[0.5, 0.7, 0.9], 0.5)), vec![(0, 2)]);
    }

    #[test]
    fn pool_deduplicates_spans() {
        // Step posterior: every threshold yields the same run.
        let p = [0.0, 0.0, 0.95, 0.95, 0.95, 0.0];
        let pool = build_segment_pool(&p, &DEFAULT_POOL_THRESHOLDS).unwrap();
        assert_eq!(spans(&pool), vec![(2, 4)]);
        // Nested superlevel sets.
        let p = [0.15, 0.55, 0.95, 0.55, 0.15];
        let pool = build_segment_pool(&p, &DEFAULT_POOL_THRESHOLDS).unwrap();
        assert_eq!(spans(&pool), vec![(2, 2), (1, 3), (0, 4)]);
        let single = build_segment_pool(&p, &[0.9]).unwrap();
        assert_eq!(single, runs_from_posteriors(&p, 0.9));
    }

    #[test]
    fn pool_rejects_bad_thresholds() {
        assert!(build_segment_pool(&[0.5], &[0.3, 0.6]).is_err());
        assert!(build_segment_pool(&[0.5], &[1.0]).is_err());
        assert!(build_segment_pool(&[1.5], &[0.5]).is_err());
    }

    #[test]
    fn nms_examples() {
        let preds = [ss(0, 9, 0.9), ss(2, 11, 0.8), ss(20, 29, 0.7)];
        assert_eq!(spans(&nms(&preds, 0.5)), vec![(0, 9), (20, 29)]);
        let disjoint = [ss(0, 9, 0.2), ss(20, 29, 0.7)];
        assert_eq!(spans(&nms(&disjoint, 0.5)), vec![(20, 29), (0, 9)]);
        assert_eq!(nms(&preds, 1.0).len(), 3);
    }

    #[test]
    fn cull_examples() {
        let mut p = vec![0.0; 40];
        p[5..15].fill(1.0);
        p[25..30].fill(0.8);
        let pool = build_segment_pool(&p, &DEFAULT_POOL_THRESHOLDS).unwrap();
        assert_eq!(spans(&cull(&pool, 0.5, 0.7)), vec![(5, 14), (25, 29)]);
        assert!(cull(&pool, 1.0 + 1e-9, 0.7).is_empty());
        assert_eq!(cull(&pool, 0.0, 1.0).len(), pool.len());
    }

    #[test]
    fn anchor_generation() {
        let a = generate_anchors(16, &[8], 8).unwrap();
        assert_eq!(a.iter().map(|x| x.center).collect::<Vec<_>>(), vec![4.0, 12.0]);
        let a = generate_anchors(300, &DEFAULT_ANCHOR_LENGTHS, 8).unwrap();
        assert_eq!(a.len(), 456);
        assert!(generate_anchors(300, &[4, 16], 8).is_err());
        assert!(generate_anchors(300, &[16, 400], 8).is_err());
    }

    #[test]
    fn anchor_labels() {
        let anchors = [
            Anchor {
                center: 4.0,
                length: 8,
            },
            Anchor {
                center: 60.0,
                length: 8,
            },
            Anchor {
                center: 8.0,
                length: 8,
            },
        ];
        let gt = [Segment::new(0, 7)];
        let labels = label_anchors(&anchors, &gt);
        assert!(matches!(labels[0], AnchorLabel::Positive { gt: 0, iou } if iou == 1.0));
        assert_eq!(labels[1], AnchorLabel::Negative);
        // [4, 12) against [0, 8): IoU 4/12.
        assert_eq!(labels[2], AnchorLabel::Ignore);
        let half = Anchor {
            center: 8.0,
            length: 8,
        }
        .iou(&Segment::new(4, 7));
        assert_eq!(half, 0.5);
        assert_eq!(label_anchors(&anchors, &[]), vec![AnchorLabel::Negative; 3]);
    }

    #[test]
    fn offset_coding() {
        let a = Anchor {
            center: 4.0,
            length: 8,
        };
        let o = encode_offsets(&Segment::new(0, 7), &a);
        assert_eq!(o, OffsetPair { dc: 0.0, dl: 0.0 });
        let a = Anchor {
            center: 10.0,
            length: 8,
        };
        // center 14, length 16
        let o = encode_offsets(&Segment::new(6, 21), &a);
        assert_eq!(o.dc, 0.5);
        assert_relative_eq!(o.dl, 2f64.ln(), max_relative = 1e-15);
        assert_eq!(decode_offsets(&o, &a, 100).unwrap(), Segment::new(6, 21));
        // Clipped at decode time.
        assert_eq!(decode_offsets(&o, &a, 15).unwrap(), Segment::new(6, 14));
    }

    #[test]
    fn detection_loss_examples() {
        let t = [
            AnchorTarget::Positive(OffsetPair { dc: 0.2, dl: -0.1 }),
            AnchorTarget::Negative,
            AnchorTarget::Ignore,
        ];
        let exact = [
            OffsetPair { dc: 0.2, dl: -0.1 },
            OffsetPair { dc: 0.0, dl: 0.0 },
            OffsetPair { dc: 9.0, dl: 9.0 },
        ];
        let l = detection_loss(&[1.0, 0.0, 0.3], &exact, &t).unwrap();
        assert_eq!((l.classification, l.regression), (0.0, 0.0));

        let l = detection_loss(&[0.5, 0.5, 0.5], &exact, &t).unwrap();
        assert_relative_eq!(l.classification, 2f64.ln(), max_relative = 1e-15);

        let off = [OffsetPair { dc: 1.2, dl: -0.1 }, exact[1], exact[2]];
        let l = detection_loss(&[1.0, 0.0, 0.5], &off, &t).unwrap();
        assert_relative_eq!(l.regression, 0.5, max_relative = 1e-12);
        assert_eq!(l.total(), l.classification + l.regression);
    }

    #[test]
    fn smooth_l1_is_continuous_at_one() {
        assert_eq!(smooth_l1(1.0), 0.5);
        assert_eq!(smooth_l1(-1.0), 0.5);
        assert_eq!(smooth_l1(0.5), 0.125);
        assert_eq!(smooth_l1(3.0), 2.5);
    }
}
