//! Corpus evaluation and its on-disk report.
//!
//! [`evaluate`] runs every metric on one corpus; [`write_report`] stores the
//! result as `report.json` plus one CSV per curve. The output has no
//! timestamps or paths, so equal inputs give byte-identical files.

use std::fs;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{
    average_precision, corpus_score_order, frame_level_curve, frame_probs_from_proposals,
    match_corpus_by_accuracy, match_corpus_by_iou, pr_curve, ApConfig, MatchResult, PrCurve,
};
use crate::model::{Clip, LetterSequence, ScoredSegment};
use crate::msa::{msa, MsaConfig, MsaPoint};
use crate::recognizer::Recognizer;

pub const SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_IOU_THRESHOLDS: [f64; 3] = [0.1, 0.3, 0.5];
pub const DEFAULT_ACC_THRESHOLDS: [f64; 3] = [0.0, 0.2, 0.4];
/// Bin edges in frames: short `< 20`, medium `20..80`, long `>= 80`.
pub const DEFAULT_DURATION_EDGES: [usize; 2] = [20, 80];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub iou_thresholds: Vec<f64>,
    pub acc_thresholds: Vec<f64>,
    /// IoU threshold used together with every accuracy threshold.
    pub acc_iou_threshold: f64,
    pub ap: ApConfig,
    pub msa: MsaConfig,
    /// Strictly increasing segment lengths separating the duration bins.
    pub duration_edges: Vec<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            iou_thresholds: DEFAULT_IOU_THRESHOLDS.to_vec(),
            acc_thresholds: DEFAULT_ACC_THRESHOLDS.to_vec(),
            acc_iou_threshold: 0.0,
            ap: ApConfig::default(),
            msa: MsaConfig::default(),
            duration_edges: DEFAULT_DURATION_EDGES.to_vec(),
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        self.ap.validate()?;
        if self.duration_edges.contains(&0) || !self.duration_edges.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::Config(
                "duration edges must be positive and strictly increasing".into(),
            ));
        }
        Ok(())
    }

    pub fn duration_bins(&self) -> Vec<DurationBin> {
        let names: &[&str] = if self.duration_edges.len() == 2 {
            &["short", "medium", "long"]
        } else {
            &[]
        };
        let mut lows = vec![0];
        lows.extend(&self.duration_edges);
        lows.iter()
            .enumerate()
            .map(|(i, &min)| DurationBin {
                name: names
                    .get(i)
                    .map_or_else(|| format!("bin{i}"), |s| (*s).to_owned()),
                min_frames: min,
                max_frames: self.duration_edges.get(i).map(|e| e - 1),
            })
            .collect()
    }
}

/// Segments whose length lies in `min_frames..=max_frames`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DurationBin {
    pub name: String,
    pub min_frames: usize,
    /// `None` for an open upper end.
    pub max_frames: Option<usize>,
}

impl DurationBin {
    pub fn contains(&self, len: usize) -> bool {
        len >= self.min_frames && self.max_frames.is_none_or(|m| len <= m)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSummary {
    pub clips: usize,
    pub ground_truth_segments: usize,
    pub predictions: usize,
}

/// One AP value; `ap` is `None` when there is no ground truth to recall.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApEntry {
    pub iou_threshold: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub acc_threshold: Option<f64>,
    pub ap: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdValue {
    /// `None` when the best value needs a threshold above every score.
    pub threshold: Option<f64>,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MsaSummary {
    pub pooled: ThresholdValue,
    pub mean_per_clip: ThresholdValue,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinReport {
    #[serde(flatten)]
    pub bin: DurationBin,
    pub ground_truth_segments: usize,
    pub ap_at_iou: Vec<ApEntry>,
    pub ap_at_acc: Vec<ApEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub schema_version: u32,
    /// Everything that produced the numbers, as given by the caller.
    pub config: serde_json::Value,
    pub corpus: CorpusSummary,
    pub ap_at_iou: Vec<ApEntry>,
    pub ap_at_acc: Vec<ApEntry>,
    /// `None` for an empty corpus.
    pub msa: Option<MsaSummary>,
    /// `None` when no frame is a fingerspelling frame.
    pub frame_ap: Option<f64>,
    pub duration_bins: Vec<BinReport>,
}

/// A curve destined for its own CSV file.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedCurve {
    pub file_name: String,
    pub curve: PrCurve,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub report: Report,
    pub pr_curves: Vec<NamedCurve>,
    pub msa_curve: Vec<MsaPoint>,
}

fn finite(threshold: f64) -> Option<f64> {
    threshold.is_finite().then_some(threshold)
}

fn curve_or_none(flags: &[bool], num_gt: usize) -> Option<PrCurve> {
    pr_curve(flags, num_gt).ok()
}

/// Evaluate `preds[c]` against `clips[c]`.
///
/// `frame_probs` overrides the frame-level probabilities; by default each
/// frame takes the best score of the predictions containing it. `config_json`
/// is copied into the report verbatim.
pub fn evaluate<R: Recognizer>(
    clips: &[Clip],
    preds: &[Vec<ScoredSegment>],
    recognizer: &R,
    frame_probs: Option<&[Vec<f64>]>,
    config: &EvalConfig,
    config_json: serde_json::Value,
) -> Result<Evaluation> {
    config.validate()?;
    if clips.len() != preds.len() {
        return Err(Error::LengthMismatch {
            what: "prediction lists",
            expected: clips.len(),
            got: preds.len(),
        });
    }
    let num_gt: usize = clips.iter().map(|c| c.ground_truth.len()).sum();
    let corpus = CorpusSummary {
        clips: clips.len(),
        ground_truth_segments: num_gt,
        predictions: preds.iter().map(Vec::len).sum(),
    };
    let order = corpus_score_order(preds);
    let bins = config.duration_bins();
    let mut bin_reports: Vec<BinReport> = bins
        .iter()
        .map(|b| BinReport {
            bin: b.clone(),
            ground_truth_segments: clips
                .iter()
                .flat_map(|c| &c.ground_truth)
                .filter(|g| b.contains(g.segment.len()))
                .count(),
            ap_at_iou: Vec::new(),
            ap_at_acc: Vec::new(),
        })
        .collect();
    let mut pr_curves = Vec::new();

    let mut record = |matches: &[MatchResult],
                      iou_threshold: f64,
                      acc_threshold: Option<f64>,
                      file_name: String,
                      bin_reports: &mut [BinReport]| {
        let flags: Vec<bool> = order.iter().map(|&(c, i)| matches[c].is_matched(i)).collect();
        let curve = curve_or_none(&flags, num_gt);
        let entry = |ap| ApEntry {
            iou_threshold,
            acc_threshold,
            ap,
        };
        for (b, rep) in bins.iter().zip(bin_reports.iter_mut()) {
            let bin_flags: Vec<bool> = order
                .iter()
                .filter(|&&(c, i)| {
                    let len = match matches[c].assignments[i] {
                        Some(m) => clips[c].ground_truth[m.gt].segment.len(),
                        None => preds[c][i].segment.len(),
                    };
                    b.contains(len)
                })
                .map(|&(c, i)| matches[c].is_matched(i))
                .collect();
            let ap = curve_or_none(&bin_flags, rep.ground_truth_segments)
                .map(|cv| average_precision(&cv, &config.ap));
            if acc_threshold.is_some() {
                rep.ap_at_acc.push(entry(ap));
            } else {
                rep.ap_at_iou.push(entry(ap));
            }
        }
        let ap = curve.as_ref().map(|cv| average_precision(cv, &config.ap));
        if let Some(curve) = curve {
            pr_curves.push(NamedCurve { file_name, curve });
        }
        entry(ap)
    };

    let mut ap_at_iou = Vec::new();
    for &t in &config.iou_thresholds {
        let matches = match_corpus_by_iou(clips, preds, t)?;
        ap_at_iou.push(record(
            &matches,
            t,
            None,
            format!("pr_iou_{t}.csv"),
            &mut bin_reports,
        ));
    }

    let mut ap_at_acc = Vec::new();
    if !config.acc_thresholds.is_empty() {
        let recognized: Vec<Vec<LetterSequence>> = clips
            .par_iter()
            .zip(preds.par_iter())
            .map(|(clip, p)| {
                p.iter()
                    .map(|x| recognizer.recognize(clip, x.segment))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<_>>()?;
        for &t in &config.acc_thresholds {
            let matches = match_corpus_by_accuracy(clips, preds, &recognized, config.acc_iou_threshold, t)?;
            ap_at_acc.push(record(
                &matches,
                config.acc_iou_threshold,
                Some(t),
                format!("pr_acc_{t}.csv"),
                &mut bin_reports,
            ));
        }
    }

    let (msa_summary, msa_curve) = if clips.is_empty() {
        (None, Vec::new())
    } else {
        let result = msa(clips, preds, recognizer, &config.msa)?;
        let summary = MsaSummary {
            pooled: ThresholdValue {
                threshold: finite(result.pooled.threshold),
                value: result.pooled.value,
            },
            mean_per_clip: ThresholdValue {
                threshold: finite(result.mean_per_clip.threshold),
                value: result.mean_per_clip.value,
            },
        };
        (Some(summary), result.curve)
    };

    let derived;
    let frame_probs = match frame_probs {
        Some(p) => p,
        None => {
            derived = clips
                .iter()
                .zip(preds)
                .map(|(c, p)| frame_probs_from_proposals(c.num_frames, p))
                .collect::<Vec<_>>();
            &derived
        }
    };
    let frame_ap = match frame_level_curve(clips, frame_probs) {
        Ok(curve) => {
            let ap = average_precision(&curve, &config.ap);
            pr_curves.push(NamedCurve {
                file_name: "pr_frame.csv".into(),
                curve,
            });
            Some(ap)
        }
        Err(Error::ZeroGroundTruth) => None,
        Err(e) => return Err(e),
    };

    Ok(Evaluation {
        report: Report {
            schema_version: SCHEMA_VERSION,
            config: config_json,
            corpus,
            ap_at_iou,
            ap_at_acc,
            msa: msa_summary,
            frame_ap,
            duration_bins: bin_reports,
        },
        pr_curves,
        msa_curve,
    })
}

pub fn pr_curve_csv(curve: &PrCurve) -> String {
    let mut out = String::from("rank,true_positives,recall,precision\n");
    for p in &curve.points {
        out.push_str(&format!(
            "{},{},{},{}\n",
            p.rank,
            p.true_positives,
            curve.recall(p),
            curve.precision(p)
        ));
    }
    out
}

pub fn msa_curve_csv(curve: &[MsaPoint]) -> String {
    let mut out = String::from("threshold,pooled,mean_per_clip\n");
    for p in curve {
        let t = if p.threshold.is_finite() {
            p.threshold.to_string()
        } else {
            "inf".to_owned()
        };
        out.push_str(&format!("{t},{},{}\n", p.pooled, p.mean_per_clip));
    }
    out
}

/// Write `report.json`, one `pr_*.csv` per curve and `msa_sweep.csv` into
/// `dir`, creating it if needed.
pub fn write_report(evaluation: &Evaluation, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    let io_err = |path: &Path| {
        let path = path.to_owned();
        move |source| Error::Io { path, source }
    };
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let write = |name: &str, body: &[u8]| -> Result<()> {
        let path = dir.join(name);
        let mut f = fs::File::create(&path).map_err(io_err(&path))?;
        f.write_all(body).map_err(io_err(&path))
    };
    let mut json = serde_json::to_vec_pretty(&evaluation.report)
        .map_err(|e| Error::Invalid(format!("report serialization: {e}")))?;
    json.push(b'\n');
    write("report.json", &json)?;
    for c in &evaluation.pr_curves {
        write(&c.file_name, pr_curve_csv(&c.curve).as_bytes())?;
    }
    write("msa_sweep.csv", msa_curve_csv(&evaluation.msa_curve).as_bytes())
}
