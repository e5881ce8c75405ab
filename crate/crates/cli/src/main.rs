use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use fseval::extract::{
    cull, extract_segments, ExtractConfig, DEFAULT_NMS_THRESHOLD, DEFAULT_POOL_THRESHOLDS,
};
use fseval::io::{
    align_detections, chunk_clip, external_recognizer, parse_detections, parse_ground_truth,
    parse_posteriors, write_detections, write_ground_truth, ClipDetections, Detection, DEFAULT_CHUNK_LEN,
    DEFAULT_CHUNK_OVERLAP,
};
use fseval::metrics::{ApConfig, RecallGrid};
use fseval::msa::{MsaConfig, SelectionConfig, ThresholdGrid};
use fseval::recognizer::{NoisyRecognizer, OracleRecognizer, Recognizer};
use fseval::report::{evaluate, msa_curve_csv, pr_curve_csv, write_report, EvalConfig, Evaluation};
use fseval::{Clip, Error, Result, ScoredSegment};

mod losses;

const EXIT_CONFIG: u8 = 2;
const EXIT_DATA: u8 = 3;

/// Evaluate fingerspelling detectors and compute detection pipeline values.
#[derive(Debug, Parser)]
#[command(name = "fseval", version)]
struct Cli {
    /// Worker threads; 0 uses every available core.
    #[arg(long, global = true, env = "FSEVAL_WORKERS", default_value_t = 0)]
    workers: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// AP@IoU, AP@Acc, MSA, frame-level AP and a per-duration breakdown.
    Eval(EvalArgs),
    /// Turn per-frame posteriors into scored segments.
    ExtractSegments(ExtractArgs),
    /// Score filtering plus non-maximum suppression of a detections file.
    Nms(NmsArgs),
    /// Split a corpus into overlapping fixed-length chunks.
    Chunk(ChunkArgs),
    /// Only the precision-recall and MSA sweep curves of `eval`.
    PrCurve(EvalArgs),
    /// Training loss values from a JSON document of inputs.
    Losses(LossesArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
enum RecognizerKind {
    /// Ground-truth letters with a uniform letter alignment.
    Oracle,
    /// Oracle output with random edits.
    Noisy,
    /// The `letters` field of each detection.
    External,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum RecallGridArg {
    Printed,
    WithZero,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Ground-truth corpus (JSONL).
    #[arg(short = 'g', long)]
    ground_truth: PathBuf,
    /// Detections (JSONL).
    #[arg(short = 'd', long)]
    detections: PathBuf,
    /// Optional frame posteriors used for frame-level AP instead of the
    /// detections.
    #[arg(long)]
    posteriors: Option<PathBuf>,
    /// Output directory.
    #[arg(short = 'o', long)]
    out: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "0.1,0.3,0.5")]
    iou_thresholds: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "0,0.2,0.4")]
    acc_thresholds: Vec<f64>,
    /// IoU threshold paired with every accuracy threshold.
    #[arg(long, default_value_t = 0.0)]
    acc_iou_threshold: f64,
    /// Number of recall levels averaged by AP.
    #[arg(long, default_value_t = 100)]
    recall_levels: usize,
    #[arg(long, value_enum, default_value_t = RecallGridArg::Printed)]
    recall_grid: RecallGridArg,
    /// MSA thresholds: `distinct`, `uniform:N` or a comma list such as `0.2,0.5`.
    #[arg(long, default_value = "distinct", value_parser = parse_grid)]
    msa_grid: ThresholdGrid,
    /// Overlapping detections with IoU at most this value are trimmed instead
    /// of dropped when building MSA sequences.
    #[arg(long, default_value_t = 0.0)]
    overlap_tolerance: f64,
    /// Segment lengths separating the duration bins.
    #[arg(long, value_delimiter = ',', default_value = "20,80")]
    duration_edges: Vec<usize>,
    #[arg(long, value_enum, default_value_t = RecognizerKind::Oracle)]
    recognizer: RecognizerKind,
    /// Per-letter edit rate of the noisy recognizer.
    #[arg(long, default_value_t = 0.1)]
    noise_rate: f64,
    /// Seed of the noisy recognizer.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct ExtractArgs {
    /// Frame posteriors (JSONL).
    #[arg(short = 'p', long)]
    posteriors: PathBuf,
    /// Output detections (JSONL).
    #[arg(short = 'o', long)]
    out: PathBuf,
    /// Strictly decreasing thresholds used to build the segment pool.
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_POOL_THRESHOLDS.to_vec())]
    pool_thresholds: Vec<f64>,
    #[arg(long, default_value_t = 0.0)]
    min_score: f64,
    #[arg(long, default_value_t = DEFAULT_NMS_THRESHOLD)]
    nms_threshold: f64,
}

#[derive(Debug, Args)]
struct NmsArgs {
    #[arg(short = 'd', long)]
    detections: PathBuf,
    #[arg(short = 'o', long)]
    out: PathBuf,
    /// Maximum IoU between kept segments.
    #[arg(long, default_value_t = DEFAULT_NMS_THRESHOLD)]
    threshold: f64,
    #[arg(long, default_value_t = 0.0)]
    min_score: f64,
}

#[derive(Debug, Args)]
struct ChunkArgs {
    #[arg(short = 'g', long)]
    ground_truth: PathBuf,
    /// Output corpus of chunks; chunk ids are `<clip_id>@<first frame>`.
    #[arg(short = 'o', long)]
    out: PathBuf,
    /// Ground truth contained in no chunk, as a corpus file of the source clips.
    #[arg(long)]
    spill: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_CHUNK_LEN)]
    chunk_len: usize,
    #[arg(long, default_value_t = DEFAULT_CHUNK_OVERLAP)]
    overlap: usize,
}

#[derive(Debug, Args)]
struct LossesArgs {
    /// JSON document with the loss inputs.
    #[arg(short = 'i', long)]
    input: PathBuf,
    /// Output file; standard output when omitted.
    #[arg(short = 'o', long)]
    out: Option<PathBuf>,
}

fn parse_grid(s: &str) -> std::result::Result<ThresholdGrid, String> {
    if s == "distinct" {
        return Ok(ThresholdGrid::DistinctScores);
    }
    if let Some(n) = s.strip_prefix("uniform:") {
        return n
            .parse()
            .map(ThresholdGrid::Uniform)
            .map_err(|e| format!("bad point count {n:?}: {e}"));
    }
    s.split(',')
        .map(|t| {
            t.trim()
                .parse::<f64>()
                .map_err(|e| format!("bad threshold {t:?}: {e}"))
        })
        .collect::<std::result::Result<Vec<_>, _>>()
        .map(ThresholdGrid::Explicit)
}

#[derive(Debug, Serialize)]
struct RecognizerConfig {
    kind: RecognizerKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    error_rate: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
}

/// Everything that determines an `eval` report. The worker count is left
/// out since it cannot change the numbers.
#[derive(Debug, Serialize)]
struct RunConfig<'a> {
    ground_truth: &'a Path,
    detections: &'a Path,
    posteriors: Option<&'a Path>,
    recognizer: RecognizerConfig,
    eval: &'a EvalConfig,
}

impl EvalArgs {
    fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            iou_thresholds: self.iou_thresholds.clone(),
            acc_thresholds: self.acc_thresholds.clone(),
            acc_iou_threshold: self.acc_iou_threshold,
            ap: ApConfig {
                num_recall_levels: self.recall_levels,
                recall_grid: match self.recall_grid {
                    RecallGridArg::Printed => RecallGrid::Printed,
                    RecallGridArg::WithZero => RecallGrid::WithZero,
                },
            },
            msa: MsaConfig {
                grid: self.msa_grid.clone(),
                selection: SelectionConfig {
                    overlap_tolerance: self.overlap_tolerance,
                },
            },
            duration_edges: self.duration_edges.clone(),
        }
    }

    fn recognizer_config(&self) -> RecognizerConfig {
        let noisy = self.recognizer == RecognizerKind::Noisy;
        RecognizerConfig {
            kind: self.recognizer,
            error_rate: noisy.then_some(self.noise_rate),
            seed: noisy.then_some(self.seed),
        }
    }
}

fn frame_probabilities(clips: &[Clip], path: &Path) -> Result<Vec<Vec<f64>>> {
    let posts = parse_posteriors(path)?;
    let mut by_id: HashMap<&str, Vec<f64>> = HashMap::new();
    for p in &posts {
        by_id.insert(p.clip_id.as_str(), p.fs_probabilities()?);
    }
    clips
        .iter()
        .map(|c| {
            let probs = by_id
                .remove(c.clip_id.as_str())
                .ok_or_else(|| Error::Invalid(format!("no posteriors for clip {}", c.clip_id)))?;
            if probs.len() != c.num_frames {
                return Err(Error::LengthMismatch {
                    what: "posterior frames",
                    expected: c.num_frames,
                    got: probs.len(),
                });
            }
            Ok(probs)
        })
        .collect()
}

fn run_evaluation(args: &EvalArgs) -> Result<Evaluation> {
    let config = args.eval_config();
    config.validate()?;
    if args.recognizer == RecognizerKind::Noisy && !(0.0..=1.0).contains(&args.noise_rate) {
        return Err(Error::Config(format!(
            "noise rate {} is outside [0, 1]",
            args.noise_rate
        )));
    }
    let clips = parse_ground_truth(&args.ground_truth)?;
    let detections = parse_detections(&args.detections)?;
    let preds: Vec<Vec<ScoredSegment>> = align_detections(&clips, &detections)?
        .iter()
        .map(|d| d.iter().map(|x| x.scored).collect())
        .collect();
    let frame_probs = args
        .posteriors
        .as_deref()
        .map(|p| frame_probabilities(&clips, p))
        .transpose()?;

    let run_config = RunConfig {
        ground_truth: &args.ground_truth,
        detections: &args.detections,
        posteriors: args.posteriors.as_deref(),
        recognizer: args.recognizer_config(),
        eval: &config,
    };
    let config_json = serde_json::to_value(&run_config)
        .map_err(|e| Error::Config(format!("cannot serialize run config: {e}")))?;

    let eval = |r: &dyn Recognizer| {
        evaluate(
            &clips,
            &preds,
            &r,
            frame_probs.as_deref(),
            &config,
            config_json.clone(),
        )
    };
    match args.recognizer {
        RecognizerKind::Oracle => eval(&OracleRecognizer),
        RecognizerKind::Noisy => eval(&NoisyRecognizer::new(args.noise_rate, args.seed)?),
        RecognizerKind::External => eval(&external_recognizer(&detections)?),
    }
}

fn write_file(path: &Path, body: &[u8]) -> Result<()> {
    fs::write(path, body).map_err(|source| Error::Io {
        path: path.to_owned(),
        source,
    })
}

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let e = run_evaluation(args)?;
    write_report(&e, &args.out)?;
    let r = &e.report;
    let fmt = |v: Option<f64>| v.map_or_else(|| "n/a".to_owned(), |x| format!("{x:.3}"));
    for a in &r.ap_at_iou {
        eprintln!("AP@IoU {:<4} {}", a.iou_threshold, fmt(a.ap));
    }
    for a in &r.ap_at_acc {
        eprintln!("AP@Acc {:<4} {}", a.acc_threshold.unwrap_or_default(), fmt(a.ap));
    }
    if let Some(m) = &r.msa {
        eprintln!("MSA         {:.3}", m.pooled.value);
    }
    eprintln!("frame AP    {}", fmt(r.frame_ap));
    Ok(())
}

fn cmd_pr_curve(args: &EvalArgs) -> Result<()> {
    let e = run_evaluation(args)?;
    fs::create_dir_all(&args.out).map_err(|source| Error::Io {
        path: args.out.clone(),
        source,
    })?;
    for c in &e.pr_curves {
        write_file(&args.out.join(&c.file_name), pr_curve_csv(&c.curve).as_bytes())?;
    }
    write_file(
        &args.out.join("msa_sweep.csv"),
        msa_curve_csv(&e.msa_curve).as_bytes(),
    )
}

fn cmd_extract(args: &ExtractArgs) -> Result<()> {
    use rayon::prelude::*;
    let config = ExtractConfig {
        pool_thresholds: args.pool_thresholds.clone(),
        min_score: args.min_score,
        nms_threshold: args.nms_threshold,
    };
    let posts = parse_posteriors(&args.posteriors)?;
    let out: Vec<ClipDetections> = posts
        .par_iter()
        .map(|p| {
            let segs = extract_segments(&p.fs_probabilities()?, &config)?;
            Ok(ClipDetections {
                clip_id: p.clip_id.clone(),
                detections: segs
                    .into_iter()
                    .map(|scored| Detection {
                        scored,
                        letters: None,
                    })
                    .collect(),
            })
        })
        .collect::<Result<_>>()?;
    write_detections(&args.out, &out)
}

fn cmd_nms(args: &NmsArgs) -> Result<()> {
    if !(0.0..=1.0).contains(&args.threshold) {
        return Err(Error::Config(format!(
            "NMS threshold {} is outside [0, 1]",
            args.threshold
        )));
    }
    let clips = parse_detections(&args.detections)?;
    let out: Vec<ClipDetections> = clips
        .iter()
        .map(|c| {
            let kept = cull(&c.scored(), args.min_score, args.threshold);
            // Carry letters over by looking each survivor up in the input.
            let mut pending: HashMap<(fseval::Segment, u64), Vec<usize>> = HashMap::new();
            for (i, d) in c.detections.iter().enumerate().rev() {
                pending
                    .entry((d.scored.segment, d.scored.score().to_bits()))
                    .or_default()
                    .push(i);
            }
            let detections = kept
                .iter()
                .map(|k| {
                    let i = pending
                        .get_mut(&(k.segment, k.score().to_bits()))
                        .and_then(Vec::pop)
                        .expect("kept segment comes from the input");
                    c.detections[i].clone()
                })
                .collect();
            ClipDetections {
                clip_id: c.clip_id.clone(),
                detections,
            }
        })
        .collect();
    write_detections(&args.out, &out)
}

fn cmd_chunk(args: &ChunkArgs) -> Result<()> {
    let clips = parse_ground_truth(&args.ground_truth)?;
    let mut chunks = Vec::new();
    let mut spilled = Vec::new();
    for clip in &clips {
        let c = chunk_clip(clip, args.chunk_len, args.overlap)?;
        chunks.extend(c.chunks.into_iter().map(|k| k.clip));
        if !c.spill.is_empty() {
            spilled.push(Clip::new(clip.clip_id.clone(), clip.num_frames, c.spill));
        }
    }
    write_ground_truth(&args.out, &chunks)?;
    if let Some(spill) = &args.spill {
        write_ground_truth(spill, &spilled)?;
    }
    let n_spilled: usize = spilled.iter().map(|c| c.ground_truth.len()).sum();
    eprintln!(
        "{} clips -> {} chunks, {} segments in no chunk",
        clips.len(),
        chunks.len(),
        n_spilled
    );
    Ok(())
}

fn cmd_losses(args: &LossesArgs) -> Result<()> {
    let text = fs::read_to_string(&args.input).map_err(|source| Error::Io {
        path: args.input.clone(),
        source,
    })?;
    let input: losses::LossInput = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: args.input.clone(),
        line: e.line(),
        message: e.to_string(),
    })?;
    let output = losses::compute(&input)?;
    let mut json = serde_json::to_string_pretty(&output)
        .map_err(|e| Error::Invalid(format!("cannot serialize losses: {e}")))?;
    json.push('\n');
    match &args.out {
        Some(path) => write_file(path, json.as_bytes()),
        None => std::io::stdout()
            .write_all(json.as_bytes())
            .map_err(|source| Error::Io {
                path: PathBuf::from("<stdout>"),
                source,
            }),
    }
}

fn run(command: &Command) -> Result<()> {
    match command {
        Command::Eval(a) => cmd_eval(a),
        Command::ExtractSegments(a) => cmd_extract(a),
        Command::Nms(a) => cmd_nms(a),
        Command::Chunk(a) => cmd_chunk(a),
        Command::PrCurve(a) => cmd_pr_curve(a),
        Command::Losses(a) => cmd_losses(a),
    }
}

fn report_error(e: &Error) -> ExitCode {
    eprintln!("error: {e}");
    let mut source = std::error::Error::source(e);
    while let Some(s) = source {
        eprintln!("  caused by: {s}");
        source = s.source();
    }
    ExitCode::from(if e.is_data_error() { EXIT_DATA } else { EXIT_CONFIG })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(cli.workers).build() {
        Ok(p) => p,
        Err(e) => return report_error(&Error::Config(format!("worker pool: {e}"))),
    };
    match pool.install(|| run(&cli.command)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => report_error(&e),
    }
}
