//! Input and output documents of `fseval losses`.

use serde::{Deserialize, Serialize};

use fseval::extract::{
    anchor_targets, detection_loss, generate_anchors, label_anchors, OffsetPair, ANCHOR_STRIDE,
    DEFAULT_ANCHOR_LENGTHS,
};
use fseval::io::parse_posterior_columns;
use fseval::objectives::{
    combine_losses, keypoints_to_heatmaps, ler_loss, pose_loss, recognition_loss, Heatmap, Keypoint,
    LossTerms, LossWeights, Stage, DEFAULT_HEATMAP_SIGMA, DEFAULT_KEYPOINT_THRESHOLD, DEFAULT_TOP_PROPOSALS,
};
use fseval::{
    validate_clip, Clip, Error, FramePosteriors, LabeledSegment, LetterSequence, Result, ScoredSegment,
    Segment,
};

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossInput {
    #[serde(default)]
    pub stage: StageName,
    #[serde(default)]
    pub weights: Weights,
    pub detection: Option<DetectionInput>,
    pub recognition: Option<RecognitionInput>,
    pub ler: Option<LerInput>,
    pub pose: Option<PoseInput>,
}

#[derive(Debug, Clone, Copy, Default, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageName {
    #[default]
    First,
    Second,
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Weights {
    pub rec: f64,
    pub ler: f64,
    pub pose: f64,
}

impl Default for Weights {
    fn default() -> Self {
        Weights {
            rec: 1.0,
            ler: 1.0,
            pose: 1.0,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectionInput {
    pub num_frames: usize,
    /// `[start, end]` pairs.
    pub ground_truth: Vec<[usize; 2]>,
    #[serde(default = "default_anchor_lengths")]
    pub anchor_lengths: Vec<usize>,
    #[serde(default = "default_stride")]
    pub stride: usize,
    /// One probability per anchor, in generation order.
    pub scores: Vec<f64>,
    /// One `[dc, dl]` pair per anchor.
    pub offsets: Vec<[f64; 2]>,
}

fn default_anchor_lengths() -> Vec<usize> {
    DEFAULT_ANCHOR_LENGTHS.to_vec()
}

fn default_stride() -> usize {
    ANCHOR_STRIDE
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentInput {
    pub start: usize,
    pub end: usize,
    #[serde(default)]
    pub letters: Option<String>,
    #[serde(default)]
    pub score: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PosteriorInput {
    pub symbols: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecognitionInput {
    pub num_frames: usize,
    pub segments: Vec<SegmentInput>,
    /// Posteriors over the frames of each segment.
    pub posteriors: Vec<PosteriorInput>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LerInput {
    pub proposals: Vec<SegmentInput>,
    pub ground_truth: Vec<SegmentInput>,
    /// Recognizer output per proposal.
    pub recognized: Vec<String>,
    #[serde(default = "default_top_m")]
    pub top_m: usize,
}

fn default_top_m() -> usize {
    DEFAULT_TOP_PROPOSALS
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoseInput {
    /// `[rows, cols]` of every heatmap.
    pub heatmap_size: [usize; 2],
    #[serde(default = "default_threshold")]
    pub threshold: f64,
    #[serde(default = "default_sigma")]
    pub sigma: f64,
    /// Per frame, per keypoint `[row, col, confidence]` in heatmap pixels.
    pub keypoints: Vec<Vec<[f64; 3]>>,
    /// Per frame, per keypoint row-major heatmap values.
    pub predicted_global: Vec<Vec<Vec<f64>>>,
    #[serde(default)]
    pub predicted_local: Option<Vec<Vec<Vec<f64>>>>,
}

fn default_threshold() -> f64 {
    DEFAULT_KEYPOINT_THRESHOLD
}

fn default_sigma() -> f64 {
    DEFAULT_HEATMAP_SIGMA
}

#[derive(Debug, Serialize)]
pub struct DetectionOutput {
    pub classification: f64,
    pub regression: f64,
    pub total: f64,
}

#[derive(Debug, Serialize)]
pub struct LerOutput {
    pub value: f64,
    pub selected: Vec<usize>,
    pub probabilities: Vec<f64>,
    pub accuracies: Vec<f64>,
    pub coefficients: Vec<f64>,
}

#[derive(Debug, Serialize)]
pub struct LossOutput {
    pub detection: Option<DetectionOutput>,
    pub recognition: Option<f64>,
    pub ler: Option<LerOutput>,
    pub pose_global: Option<f64>,
    pub pose_local: Option<f64>,
    pub total: f64,
}

fn labeled(s: &SegmentInput) -> Result<LabeledSegment> {
    let letters = s
        .letters
        .as_deref()
        .ok_or_else(|| Error::Invalid(format!("segment ({}, {}) has no letters", s.start, s.end)))?;
    Ok(LabeledSegment::new(Segment::try_new(s.start, s.end)?, letters))
}

fn scored(s: &SegmentInput) -> Result<ScoredSegment> {
    let score = s
        .score
        .ok_or_else(|| Error::Invalid(format!("proposal ({}, {}) has no score", s.start, s.end)))?;
    ScoredSegment::new(Segment::try_new(s.start, s.end)?, score)
}

fn heatmaps(frames: &[Vec<Vec<f64>>], (rows, cols): (usize, usize)) -> Result<Vec<Vec<Heatmap>>> {
    frames
        .iter()
        .map(|f| {
            f.iter()
                .map(|h| Heatmap::from_vec(rows, cols, h.clone()))
                .collect()
        })
        .collect()
}

pub fn compute(input: &LossInput) -> Result<LossOutput> {
    let weights = LossWeights {
        rec: input.weights.rec,
        ler: input.weights.ler,
        pose: input.weights.pose,
    };
    weights.validate()?;
    let stage = match input.stage {
        StageName::First => Stage::First,
        StageName::Second => Stage::Second,
    };

    let detection = input
        .detection
        .as_ref()
        .map(|d| -> Result<DetectionOutput> {
            let anchors = generate_anchors(d.num_frames, &d.anchor_lengths, d.stride)?;
            let gt = d
                .ground_truth
                .iter()
                .map(|&[s, e]| Segment::try_new(s, e))
                .collect::<Result<Vec<_>>>()?;
            let labels = label_anchors(&anchors, &gt);
            let targets = anchor_targets(&anchors, &labels, &gt);
            let offsets: Vec<OffsetPair> = d.offsets.iter().map(|&[dc, dl]| OffsetPair { dc, dl }).collect();
            let loss = detection_loss(&d.scores, &offsets, &targets)?;
            Ok(DetectionOutput {
                classification: loss.classification,
                regression: loss.regression,
                total: loss.total(),
            })
        })
        .transpose()?;

    let recognition = input
        .recognition
        .as_ref()
        .map(|r| -> Result<f64> {
            let gt = r.segments.iter().map(labeled).collect::<Result<Vec<_>>>()?;
            let clip = validate_clip(Clip::new("losses", r.num_frames, gt))?;
            let posts = r
                .posteriors
                .iter()
                .map(|p| {
                    let cols = parse_posterior_columns(&p.symbols).map_err(Error::Invalid)?;
                    FramePosteriors::new("losses", cols, p.rows.clone())
                })
                .collect::<Result<Vec<_>>>()?;
            recognition_loss(&clip, &posts)
        })
        .transpose()?;

    let ler = input
        .ler
        .as_ref()
        .map(|l| -> Result<LerOutput> {
            let proposals = l.proposals.iter().map(scored).collect::<Result<Vec<_>>>()?;
            let gt = l.ground_truth.iter().map(labeled).collect::<Result<Vec<_>>>()?;
            let recognized: Vec<LetterSequence> = l
                .recognized
                .iter()
                .map(|s| LetterSequence::from(s.as_str()))
                .collect();
            let loss = ler_loss(&proposals, &gt, &recognized, l.top_m)?;
            Ok(LerOutput {
                value: loss.value,
                selected: loss.selected,
                probabilities: loss.probabilities,
                accuracies: loss.accuracies,
                coefficients: loss.coefficients,
            })
        })
        .transpose()?;

    let (pose_global, pose_local) = match &input.pose {
        None => (None, None),
        Some(p) => {
            let dims = (p.heatmap_size[0], p.heatmap_size[1]);
            let frames: Vec<Vec<Keypoint>> = p
                .keypoints
                .iter()
                .map(|f| {
                    f.iter()
                        .map(|&[row, col, confidence]| Keypoint { row, col, confidence })
                        .collect()
                })
                .collect();
            let (pseudo, mask) = keypoints_to_heatmaps(&frames, dims, p.threshold, p.sigma)?;
            let global = pose_loss(&heatmaps(&p.predicted_global, dims)?, &pseudo, &mask)?;
            let local = p
                .predicted_local
                .as_ref()
                .map(|l| pose_loss(&heatmaps(l, dims)?, &pseudo, &mask))
                .transpose()?;
            (Some(global), local)
        }
    };

    let terms = LossTerms {
        det: detection.as_ref().map_or(0.0, |d| d.total),
        rec: recognition.unwrap_or(0.0),
        ler: ler.as_ref().map_or(0.0, |l| l.value),
        pose_global: pose_global.unwrap_or(0.0),
        pose_local,
    };
    let total = combine_losses(&terms, &weights, stage)?;
    Ok(LossOutput {
        detection,
        recognition,
        ler,
        pose_global,
        pose_local,
        total,
    })
}
