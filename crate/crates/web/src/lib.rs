//! JSON-in, JSON-out entry points for the browser demo in `www/`.
//!
//! Each exported function has a plain Rust twin (`*_json`) so the logic can
//! be tested natively.

use serde::{Deserialize, Serialize};
use wasm_bindgen::prelude::*;

use fseval::extract::{extract_segments, ExtractConfig};
use fseval::metrics::{average_precision, match_by_iou, pr_curve, ApConfig};
use fseval::msa::{build_label_sequence, msa, reference_sequence, select_detections, MsaConfig};
use fseval::recognizer::{oracle_recognize, OracleRecognizer};
use fseval::{validate_clip, Clip, LabeledSegment, ScoredSegment, Segment};

#[derive(Debug, Deserialize)]
struct ExtractRequest {
    probs: Vec<f64>,
    #[serde(default)]
    pool_thresholds: Option<Vec<f64>>,
    #[serde(default)]
    min_score: Option<f64>,
    #[serde(default)]
    nms_threshold: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ScoredJson {
    start: usize,
    end: usize,
    score: f64,
}

#[derive(Debug, Serialize)]
struct ExtractResponse {
    segments: Vec<ScoredJson>,
}

#[derive(Debug, Deserialize)]
struct GtJson {
    start: usize,
    end: usize,
    #[serde(default)]
    letters: String,
}

#[derive(Debug, Deserialize)]
struct ApRequest {
    num_frames: usize,
    ground_truth: Vec<GtJson>,
    predictions: Vec<ScoredJson>,
    iou_threshold: f64,
}

#[derive(Debug, Serialize)]
struct CurvePoint {
    recall: f64,
    precision: f64,
}

#[derive(Debug, Serialize)]
struct ApResponse {
    ap: Option<f64>,
    curve: Vec<CurvePoint>,
    /// Per input prediction.
    matched: Vec<bool>,
}

#[derive(Debug, Deserialize)]
struct SequenceRequest {
    num_frames: usize,
    ground_truth: Vec<GtJson>,
    predictions: Vec<ScoredJson>,
    threshold: f64,
}

#[derive(Debug, Serialize)]
struct SequenceResponse {
    reference: String,
    hypothesis: String,
    accuracy: f64,
    best_threshold: Option<f64>,
    best_accuracy: f64,
}

fn parse<'a, T: Deserialize<'a>>(json: &'a str) -> Result<T, String> {
    serde_json::from_str(json).map_err(|e| format!("bad request: {e}"))
}

fn render<T: Serialize>(value: &T) -> Result<String, String> {
    serde_json::to_string(value).map_err(|e| e.to_string())
}

/// `placeholder` stands in for missing letters where only timing matters.
fn clip_from(num_frames: usize, gt: &[GtJson], placeholder: Option<&str>) -> Result<Clip, String> {
    let ground_truth = gt
        .iter()
        .map(|g| {
            let letters = match placeholder {
                Some(p) if g.letters.is_empty() => p,
                _ => g.letters.as_str(),
            };
            Ok(LabeledSegment::new(Segment::try_new(g.start, g.end)?, letters))
        })
        .collect::<fseval::Result<Vec<_>>>()
        .map_err(|e| e.to_string())?;
    validate_clip(Clip::new("demo", num_frames, ground_truth)).map_err(|e| e.to_string())
}

fn scored_from(preds: &[ScoredJson]) -> Result<Vec<ScoredSegment>, String> {
    preds
        .iter()
        .map(|p| ScoredSegment::new(Segment::try_new(p.start, p.end)?, p.score))
        .collect::<fseval::Result<Vec<_>>>()
        .map_err(|e| e.to_string())
}

pub fn extract_json(request: &str) -> Result<String, String> {
    let req: ExtractRequest = parse(request)?;
    let mut config = ExtractConfig::default();
    if let Some(t) = req.pool_thresholds {
        config.pool_thresholds = t;
    }
    if let Some(m) = req.min_score {
        config.min_score = m;
    }
    if let Some(n) = req.nms_threshold {
        config.nms_threshold = n;
    }
    let segments = extract_segments(&req.probs, &config)
        .map_err(|e| e.to_string())?
        .into_iter()
        .map(|s| ScoredJson {
            start: s.segment.start(),
            end: s.segment.end(),
            score: s.score(),
        })
        .collect();
    render(&ExtractResponse { segments })
}

pub fn average_precision_json(request: &str) -> Result<String, String> {
    let req: ApRequest = parse(request)?;
    if !(0.0..1.0).contains(&req.iou_threshold) {
        return Err(format!("IoU threshold {} is outside [0, 1)", req.iou_threshold));
    }
    let clip = clip_from(req.num_frames, &req.ground_truth, Some("A"))?;
    let preds = scored_from(&req.predictions)?;
    let m = match_by_iou(&preds, &clip.gt_segments(), req.iou_threshold);
    let matched = (0..preds.len()).map(|i| m.is_matched(i)).collect();
    let (ap, curve) = match pr_curve(&m.flags_in_order(), clip.ground_truth.len()) {
        Ok(c) => (
            Some(average_precision(&c, &ApConfig::default())),
            c.recall_precision()
                .into_iter()
                .map(|(recall, precision)| CurvePoint { recall, precision })
                .collect(),
        ),
        Err(_) => (None, Vec::new()),
    };
    render(&ApResponse { ap, curve, matched })
}

pub fn sequence_accuracy_json(request: &str) -> Result<String, String> {
    let req: SequenceRequest = parse(request)?;
    let clip = clip_from(req.num_frames, &req.ground_truth, None)?;
    let preds = scored_from(&req.predictions)?;
    let err = |e: fseval::Error| e.to_string();

    let reference = reference_sequence(&clip).map_err(err)?;
    let selected = select_detections(&preds, req.threshold);
    let letters: Vec<_> = selected.iter().map(|&s| oracle_recognize(&clip, s)).collect();
    let hypothesis = build_label_sequence(
        &clip.clip_id,
        clip.num_frames,
        selected.iter().copied().zip(&letters),
    )
    .map_err(err)?;
    let accuracy = fseval::align::accuracy(reference.symbols(), hypothesis.symbols()).map_err(err)?;
    let best = msa(&[clip], &[preds], &OracleRecognizer, &MsaConfig::default()).map_err(err)?;
    render(&SequenceResponse {
        reference: reference.to_string(),
        hypothesis: hypothesis.to_string(),
        accuracy,
        best_threshold: best.pooled.threshold.is_finite().then_some(best.pooled.threshold),
        best_accuracy: best.pooled.value,
    })
}

/// Segments from per-frame fingerspelling probabilities.
#[wasm_bindgen]
pub fn extract(request: &str) -> Result<String, JsValue> {
    extract_json(request).map_err(|e| JsValue::from_str(&e))
}

/// AP at one IoU threshold, with the precision-recall curve.
#[wasm_bindgen(js_name = averagePrecision)]
pub fn average_precision_js(request: &str) -> Result<String, JsValue> {
    average_precision_json(request).map_err(|e| JsValue::from_str(&e))
}

/// Full-video letter sequences at one threshold, plus the best threshold.
#[wasm_bindgen(js_name = sequenceAccuracy)]
pub fn sequence_accuracy(request: &str) -> Result<String, JsValue> {
    sequence_accuracy_json(request).map_err(|e| JsValue::from_str(&e))
}
