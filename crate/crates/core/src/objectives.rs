//! Loss values for the multi-task detector and the geometry of the
//! attention-driven crop tube.
//!
//! Nothing here computes network gradients. The letter-error loss returns
//! the REINFORCE weights (the multipliers of each proposal's log-probability
//! gradient); everything else is a plain value.

use crate::align::{ctc_forward_nll, letter_accuracy};
use crate::error::{Error, Result};
use crate::extract::DetectionLoss;
use crate::metrics::temporal_iou;
use crate::model::{Clip, FramePosteriors, LabeledSegment, LetterSequence, ScoredSegment};

pub const DEFAULT_TOP_PROPOSALS: usize = 8;
pub const DEFAULT_KEYPOINT_THRESHOLD: f64 = 0.5;
pub const DEFAULT_HEATMAP_SIGMA: f64 = 2.0;
pub const DEFAULT_TUBE_HALF_WINDOW: usize = 5;
/// 15 body keypoints plus 21 per hand.
pub const DEFAULT_NUM_KEYPOINTS: usize = 15 + 2 * 21;

/// Sum of CTC losses over ground-truth segments. `segment_posteriors[i]`
/// holds the recognizer posteriors for exactly the frames of segment `i`.
pub fn recognition_loss(clip: &Clip, segment_posteriors: &[FramePosteriors]) -> Result<f64> {
    if segment_posteriors.len() != clip.ground_truth.len() {
        return Err(Error::LengthMismatch {
            what: "segment posteriors",
            expected: clip.ground_truth.len(),
            got: segment_posteriors.len(),
        });
    }
    let mut total = 0.0;
    for (g, post) in clip.ground_truth.iter().zip(segment_posteriors) {
        if post.num_frames() != g.segment.len() {
            return Err(Error::Shape(format!(
                "posteriors for segment {} have {} frames, expected {}",
                g.segment,
                post.num_frames(),
                g.segment.len()
            )));
        }
        total += ctc_forward_nll(post, &g.letters.to_symbols())?;
    }
    Ok(total)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LerLoss {
    /// `-sum_i p_i * Acc_i` over the selected proposals.
    pub value: f64,
    /// Indices of the top-M proposals, in score order.
    pub selected: Vec<usize>,
    /// Normalized scores `p_i = f_i / sum_j f_j` of the selected proposals.
    pub probabilities: Vec<f64>,
    pub accuracies: Vec<f64>,
    /// REINFORCE weights `-Acc_i * p_i`.
    pub coefficients: Vec<f64>,
}

/// Expected negative letter accuracy over the top-`top_m` proposals.
///
/// Each proposal is paired with the ground truth of highest IoU; a proposal
/// overlapping no ground truth gets accuracy 0.
pub fn ler_loss(
    proposals: &[ScoredSegment],
    gt: &[LabeledSegment],
    recognized: &[LetterSequence],
    top_m: usize,
) -> Result<LerLoss> {
    if top_m == 0 {
        return Err(Error::Config("number of proposals M must be at least 1".into()));
    }
    if proposals.is_empty() {
        return Err(Error::Invalid(
            "letter-error loss needs at least one proposal".into(),
        ));
    }
    if recognized.len() != proposals.len() {
        return Err(Error::LengthMismatch {
            what: "recognizer outputs",
            expected: proposals.len(),
            got: recognized.len(),
        });
    }
    let mut selected = crate::metrics::score_order(proposals);
    selected.truncate(top_m);

    let total: f64 = selected.iter().map(|&i| proposals[i].score()).sum();
    if total <= 0.0 {
        return Err(Error::ZeroScores);
    }

    let mut accuracies = Vec::with_capacity(selected.len());
    for &i in &selected {
        let seg = proposals[i].segment;
        let mut best: Option<(f64, &LabeledSegment)> = None;
        for g in gt {
            let iou = temporal_iou(&seg, &g.segment);
            let better = match best {
                None => iou > 0.0,
                Some((b, bg)) => iou > b || (iou == b && g.segment.start() < bg.segment.start()),
            };
            if better {
                best = Some((iou, g));
            }
        }
        accuracies.push(match best {
            Some((_, g)) => letter_accuracy(&g.letters, &recognized[i])?,
            None => 0.0,
        });
    }

    let weighted: f64 = selected
        .iter()
        .zip(&accuracies)
        .map(|(&i, acc)| proposals[i].score() * acc)
        .sum();
    let probabilities: Vec<f64> = selected.iter().map(|&i| proposals[i].score() / total).collect();
    let coefficients = probabilities
        .iter()
        .zip(&accuracies)
        .map(|(p, acc)| -acc * p)
        .collect();
    Ok(LerLoss {
        value: -(weighted / total),
        selected,
        probabilities,
        accuracies,
        coefficients,
    })
}

/// Estimated keypoint in heatmap coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Keypoint {
    pub row: f64,
    pub col: f64,
    pub confidence: f64,
}

/// Dense non-negative 2-D map, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Heatmap {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Heatmap {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} values for a {rows}x{cols} map",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid("heatmap values must be finite".into()));
        }
        Ok(Heatmap { rows, cols, data })
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn values(&self) -> &[f64] {
        &self.data
    }

    fn squared_distance(&self, other: &Heatmap) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    }
}

/// Per frame, per keypoint: whether the keypoint is used.
pub type KeypointMask = Vec<Vec<bool>>;

/// Pseudo-label heatmaps for every frame and keypoint, with the confidence
/// mask. Keypoints with confidence at or below `threshold` get an all-zero
/// map and mask `false`; kept ones get an isotropic Gaussian of peak 1 and
/// standard deviation `sigma` (a single unit pixel when `sigma` is 0).
pub fn keypoints_to_heatmaps(
    frames: &[Vec<Keypoint>],
    dims: (usize, usize),
    threshold: f64,
    sigma: f64,
) -> Result<(Vec<Vec<Heatmap>>, KeypointMask)> {
    let (rows, cols) = dims;
    if rows == 0 || cols == 0 {
        return Err(Error::Config("heatmap dimensions must be positive".into()));
    }
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::Config(format!(
            "heatmap sigma {sigma} must be finite and >= 0"
        )));
    }
    let mut maps = Vec::with_capacity(frames.len());
    let mut masks = Vec::with_capacity(frames.len());
    for (t, keypoints) in frames.iter().enumerate() {
        let mut frame_maps = Vec::with_capacity(keypoints.len());
        let mut frame_mask = Vec::with_capacity(keypoints.len());
        for (p, k) in keypoints.iter().enumerate() {
            let kept = k.confidence > threshold;
            let mut map = Heatmap::zeros(rows, cols);
            if kept {
                let in_bounds =
                    (0.0..=(rows - 1) as f64).contains(&k.row) && (0.0..=(cols - 1) as f64).contains(&k.col);
                if !in_bounds {
                    return Err(Error::Invalid(format!(
                        "frame {t} keypoint {p} at ({}, {}) is outside the {rows}x{cols} map",
                        k.row, k.col
                    )));
                }
                render_gaussian(&mut map, k.row, k.col, sigma);
            }
            frame_maps.push(map);
            frame_mask.push(kept);
        }
        maps.push(frame_maps);
        masks.push(frame_mask);
    }
    Ok((maps, masks))
}

fn render_gaussian(map: &mut Heatmap, row: f64, col: f64, sigma: f64) {
    if sigma == 0.0 {
        map.set(row.round() as usize, col.round() as usize, 1.0);
        return;
    }
    let denom = 2.0 * sigma * sigma;
    for r in 0..map.rows {
        let dr = r as f64 - row;
        for c in 0..map.cols {
            let dc = c as f64 - col;
            map.set(r, c, (-(dr * dr + dc * dc) / denom).exp());
        }
    }
}

/// Masked sum of squared per-pixel differences over frames and keypoints.
pub fn pose_loss(pred: &[Vec<Heatmap>], pseudo: &[Vec<Heatmap>], mask: &[Vec<bool>]) -> Result<f64> {
    if pred.len() != pseudo.len() || pred.len() != mask.len() {
        return Err(Error::Shape(format!(
            "frame counts differ: {} predicted, {} pseudo-label, {} mask",
            pred.len(),
            pseudo.len(),
            mask.len()
        )));
    }
    let mut total = 0.0;
    for (t, ((pf, qf), mf)) in pred.iter().zip(pseudo).zip(mask).enumerate() {
        if pf.len() != qf.len() || pf.len() != mf.len() {
            return Err(Error::Shape(format!("frame {t}: keypoint counts differ")));
        }
        for (p, ((a, b), &m)) in pf.iter().zip(qf).zip(mf).enumerate() {
            if a.dims() != b.dims() {
                return Err(Error::Shape(format!(
                    "frame {t} keypoint {p}: {:?} vs {:?} maps",
                    a.dims(),
                    b.dims()
                )));
            }
            if m {
                total += a.squared_distance(b);
            }
        }
    }
    Ok(total)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub rec: f64,
    pub ler: f64,
    pub pose: f64,
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [("rec", self.rec), ("ler", self.ler), ("pose", self.pose)] {
            if !(w.is_finite() && w >= 0.0) {
                return Err(Error::Config(format!(
                    "loss weight {name} = {w} must be finite and >= 0"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossTerms {
    pub det: f64,
    pub rec: f64,
    pub ler: f64,
    /// Pose loss on the global (full-frame) input.
    pub pose_global: f64,
    /// Pose loss on the cropped local input; second stage only.
    pub pose_local: Option<f64>,
}

impl LossTerms {
    pub fn with_detection(det: DetectionLoss) -> Self {
        LossTerms {
            det: det.total(),
            rec: 0.0,
            ler: 0.0,
            pose_global: 0.0,
            pose_local: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    First,
    /// Adds the local-crop pose term.
    Second,
}

/// Weighted total loss. The second stage adds the local pose loss inside
/// the pose term.
pub fn combine_losses(terms: &LossTerms, weights: &LossWeights, stage: Stage) -> Result<f64> {
    weights.validate()?;
    let pose = match (stage, terms.pose_local) {
        (Stage::First, _) => terms.pose_global,
        (Stage::Second, Some(local)) => terms.pose_global + local,
        (Stage::Second, None) => return Err(Error::Config("second stage needs the local pose loss".into())),
    };
    let all = [terms.det, terms.rec, terms.ler, pose];
    if all.iter().any(|v| !v.is_finite()) {
        return Err(Error::Invalid("loss terms must be finite".into()));
    }
    Ok(terms.det + weights.rec * terms.rec + weights.ler * terms.ler + weights.pose * pose)
}

/// Non-negative attention weights over a 2-D grid, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl AttentionMap {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} values for a {rows}x{cols} map",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Invalid("attention values must be finite and >= 0".into()));
        }
        Ok(AttentionMap { rows, cols, data })
    }

    /// First cell (row-major) holding the maximum, if that maximum is positive.
    pub fn peak(&self) -> Option<(usize, usize)> {
        let mut best: Option<(usize, f64)> = None;
        for (i, &v) in self.data.iter().enumerate() {
            if v > 0.0 && best.is_none_or(|(_, b)| v > b) {
                best = Some((i, v));
            }
        }
        best.map(|(i, _)| (i / self.cols, i % self.cols))
    }
}

/// Axis-aligned box in original-frame pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub center_row: f64,
    pub center_col: f64,
    pub height: f64,
    pub width: f64,
}

impl BBox {
    pub fn top(&self) -> f64 {
        self.center_row - self.height / 2.0
    }

    pub fn left(&self) -> f64 {
        self.center_col - self.width / 2.0
    }

    pub fn bottom(&self) -> f64 {
        self.center_row + self.height / 2.0
    }

    pub fn right(&self) -> f64 {
        self.center_col + self.width / 2.0
    }

    /// Intersection with `[0, height] x [0, width]`.
    pub fn clip_to(&self, frame_height: f64, frame_width: f64) -> BBox {
        let top = self.top().clamp(0.0, frame_height);
        let bottom = self.bottom().clamp(0.0, frame_height);
        let left = self.left().clamp(0.0, frame_width);
        let right = self.right().clamp(0.0, frame_width);
        BBox {
            center_row: (top + bottom) / 2.0,
            center_col: (left + right) / 2.0,
            height: bottom - top,
            width: right - left,
        }
    }
}

/// Moving average of boxes over `2a + 1` frames; near the ends the window is
/// truncated to the frames that exist.
pub fn smooth_boxes(boxes: &[BBox], half_window: usize) -> Vec<BBox> {
    (0..boxes.len())
        .map(|n| {
            let lo = n.saturating_sub(half_window);
            let hi = (n + half_window).min(boxes.len() - 1);
            let window = &boxes[lo..=hi];
            let k = window.len() as f64;
            let mean = |f: fn(&BBox) -> f64| window.iter().map(f).sum::<f64>() / k;
            BBox {
                center_row: mean(|b| b.center_row),
                center_col: mean(|b| b.center_col),
                height: mean(|b| b.height),
                width: mean(|b| b.width),
            }
        })
        .collect()
}

/// Crop boxes of size `zoom` times the frame, centered on each attention
/// peak (cell centers scaled to frame pixels), smoothed over time and
/// clipped to the frame.
pub fn attention_crop_tube(
    maps: &[AttentionMap],
    frame_dims: (f64, f64),
    zoom: f64,
    half_window: usize,
) -> Result<Vec<BBox>> {
    let (fh, fw) = frame_dims;
    if !(zoom > 0.0 && zoom <= 1.0) {
        return Err(Error::Config(format!("zoom factor {zoom} is outside (0, 1]")));
    }
    if !(fh > 0.0 && fw > 0.0) {
        return Err(Error::Config("frame dimensions must be positive".into()));
    }
    let raw = maps
        .iter()
        .enumerate()
        .map(|(n, m)| {
            let (r, c) = m.peak().ok_or(Error::PeakUndefined(n))?;
            Ok(BBox {
                center_row: (r as f64 + 0.5) * fh / m.rows as f64,
                center_col: (c as f64 + 0.5) * fw / m.cols as f64,
                height: zoom * fh,
                width: zoom * fw,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(smooth_boxes(&raw, half_window)
        .iter()
        .map(|b| b.clip_to(fh, fw))
        .collect())
}
