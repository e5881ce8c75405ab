//! Line-delimited JSON file formats and clip chunking.
//!
//! Every format holds one JSON object per line; blank lines are skipped.
//! Readers report the line of the first bad record.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    validate_clip_with, Alphabet, Clip, FramePosteriors, LabeledSegment, LetterSequence, PosteriorColumns,
    ScoredSegment, Segment, Symbol,
};
use crate::objectives::Keypoint;
use crate::recognizer::ExternalRecognizer;

pub const FS_TOKEN: &str = "<fs>";
pub const BACKGROUND_TOKEN: &str = "<bg>";
pub const NO_LETTER_TOKEN: &str = "<nl>";
pub const BLANK_TOKEN: &str = "<blank>";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SegmentRecord {
    start: usize,
    end: usize,
    letters: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ClipRecord {
    clip_id: String,
    num_frames: usize,
    segments: Vec<SegmentRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DetectionRecord {
    start: usize,
    end: usize,
    score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    letters: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ClipDetectionsRecord {
    clip_id: String,
    segments: Vec<DetectionRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PosteriorRecord {
    clip_id: String,
    symbols: Vec<String>,
    rows: Vec<Vec<f64>>,
}

/// One detected segment, optionally with the letters a recognizer produced.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub scored: ScoredSegment,
    pub letters: Option<LetterSequence>,
}

/// Detections of one clip, in file order.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipDetections {
    pub clip_id: String,
    pub detections: Vec<Detection>,
}

impl ClipDetections {
    pub fn scored(&self) -> Vec<ScoredSegment> {
        self.detections.iter().map(|d| d.scored).collect()
    }
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path).map(BufReader::new).map_err(|source| Error::Io {
        path: path.to_owned(),
        source,
    })
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|source| Error::Io {
            path: path.to_owned(),
            source,
        })
}

/// Calls `f(line_number, text)` for every non-blank line.
fn for_each_record(
    path: &Path,
    reader: impl BufRead,
    mut f: impl FnMut(usize, &str) -> Result<()>,
) -> Result<()> {
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|source| Error::Io {
            path: path.to_owned(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        f(i + 1, &line)?;
    }
    Ok(())
}

fn parse_error(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_owned(),
        line,
        message: message.into(),
    }
}

fn validation_error(path: &Path, line: usize, source: Error) -> Error {
    Error::Validation {
        path: path.to_owned(),
        line,
        source: Box::new(source),
    }
}

fn io_error(path: &Path) -> impl Fn(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_owned(),
        source,
    }
}

fn segment_at(path: &Path, line: usize, start: usize, end: usize) -> Result<Segment> {
    Segment::try_new(start, end).map_err(|e| parse_error(path, line, e.to_string()))
}

/// Ground-truth corpus with the default Latin alphabet.
pub fn parse_ground_truth(path: impl AsRef<Path>) -> Result<Vec<Clip>> {
    parse_ground_truth_with(path, &Alphabet::latin())
}

pub fn parse_ground_truth_with(path: impl AsRef<Path>, alphabet: &Alphabet) -> Result<Vec<Clip>> {
    let path = path.as_ref();
    read_ground_truth(path, open(path)?, alphabet)
}

pub fn read_ground_truth(path: &Path, reader: impl BufRead, alphabet: &Alphabet) -> Result<Vec<Clip>> {
    let mut clips = Vec::new();
    let mut ids = HashSet::new();
    for_each_record(path, reader, |line, text| {
        let rec: ClipRecord =
            serde_json::from_str(text).map_err(|e| parse_error(path, line, e.to_string()))?;
        let ground_truth = rec
            .segments
            .iter()
            .map(|s| {
                Ok(LabeledSegment::new(
                    segment_at(path, line, s.start, s.end)?,
                    s.letters.as_str(),
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        let clip = Clip::new(rec.clip_id, rec.num_frames, ground_truth);
        let clip = validate_clip_with(clip, alphabet).map_err(|e| validation_error(path, line, e))?;
        if !ids.insert(clip.clip_id.clone()) {
            return Err(validation_error(
                path,
                line,
                Error::Invalid(format!("duplicate clip_id {}", clip.clip_id)),
            ));
        }
        clips.push(clip);
        Ok(())
    })?;
    Ok(clips)
}

pub fn write_ground_truth(path: impl AsRef<Path>, clips: &[Clip]) -> Result<()> {
    let path = path.as_ref();
    let mut w = create(path)?;
    write_ground_truth_to(&mut w, clips).map_err(io_error(path))?;
    w.flush().map_err(io_error(path))
}

pub fn write_ground_truth_to(w: &mut impl Write, clips: &[Clip]) -> std::io::Result<()> {
    for clip in clips {
        let rec = ClipRecord {
            clip_id: clip.clip_id.clone(),
            num_frames: clip.num_frames,
            segments: clip
                .ground_truth
                .iter()
                .map(|g| SegmentRecord {
                    start: g.segment.start(),
                    end: g.segment.end(),
                    letters: g.letters.to_string(),
                })
                .collect(),
        };
        serde_json::to_writer(&mut *w, &rec)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn parse_detections(path: impl AsRef<Path>) -> Result<Vec<ClipDetections>> {
    let path = path.as_ref();
    read_detections(path, open(path)?)
}

pub fn read_detections(path: &Path, reader: impl BufRead) -> Result<Vec<ClipDetections>> {
    let mut out = Vec::new();
    let mut ids = HashSet::new();
    for_each_record(path, reader, |line, text| {
        let rec: ClipDetectionsRecord =
            serde_json::from_str(text).map_err(|e| parse_error(path, line, e.to_string()))?;
        let detections = rec
            .segments
            .iter()
            .map(|d| {
                let segment = segment_at(path, line, d.start, d.end)?;
                let scored = ScoredSegment::new(segment, d.score)
                    .map_err(|e| parse_error(path, line, e.to_string()))?;
                Ok(Detection {
                    scored,
                    letters: d.letters.as_deref().map(LetterSequence::from),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        if !ids.insert(rec.clip_id.clone()) {
            return Err(validation_error(
                path,
                line,
                Error::Invalid(format!("duplicate clip_id {}", rec.clip_id)),
            ));
        }
        out.push(ClipDetections {
            clip_id: rec.clip_id,
            detections,
        });
        Ok(())
    })?;
    Ok(out)
}

pub fn write_detections(path: impl AsRef<Path>, detections: &[ClipDetections]) -> Result<()> {
    let path = path.as_ref();
    let mut w = create(path)?;
    write_detections_to(&mut w, detections).map_err(io_error(path))?;
    w.flush().map_err(io_error(path))
}

pub fn write_detections_to(w: &mut impl Write, detections: &[ClipDetections]) -> std::io::Result<()> {
    for clip in detections {
        let rec = ClipDetectionsRecord {
            clip_id: clip.clip_id.clone(),
            segments: clip
                .detections
                .iter()
                .map(|d| DetectionRecord {
                    start: d.scored.segment.start(),
                    end: d.scored.segment.end(),
                    score: d.scored.score(),
                    letters: d.letters.as_ref().map(|l| l.to_string()),
                })
                .collect(),
        };
        serde_json::to_writer(&mut *w, &rec)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Detections for each clip of `clips`, in corpus order. Clips without a
/// record get no detections; records for unknown clips or segments outside
/// a clip are errors.
pub fn align_detections(clips: &[Clip], detections: &[ClipDetections]) -> Result<Vec<Vec<Detection>>> {
    let index: HashMap<&str, usize> = clips
        .iter()
        .enumerate()
        .map(|(i, c)| (c.clip_id.as_str(), i))
        .collect();
    let mut out = vec![Vec::new(); clips.len()];
    for d in detections {
        let &i = index
            .get(d.clip_id.as_str())
            .ok_or_else(|| Error::Invalid(format!("detections for unknown clip {}", d.clip_id)))?;
        let clip = &clips[i];
        if let Some(bad) = d
            .detections
            .iter()
            .find(|x| x.scored.segment.end() >= clip.num_frames)
        {
            return Err(Error::Range {
                clip_id: clip.clip_id.clone(),
                segment: bad.scored.segment,
                num_frames: clip.num_frames,
            });
        }
        out[i] = d.detections.clone();
    }
    Ok(out)
}

/// Recognizer that replays the `letters` field of every detection.
pub fn external_recognizer(detections: &[ClipDetections]) -> Result<ExternalRecognizer> {
    let mut r = ExternalRecognizer::new();
    for clip in detections {
        for d in &clip.detections {
            let letters = d.letters.clone().ok_or_else(|| {
                Error::Invalid(format!(
                    "clip {} detection {} has no letters field",
                    clip.clip_id, d.scored.segment
                ))
            })?;
            r.insert(clip.clip_id.clone(), d.scored.segment, letters);
        }
    }
    Ok(r)
}

fn column_token(s: &Symbol) -> String {
    match s {
        Symbol::Letter(c) => c.to_string(),
        Symbol::NoLetter => NO_LETTER_TOKEN.to_owned(),
        Symbol::Blank => BLANK_TOKEN.to_owned(),
    }
}

/// Column layout from header tokens: `["<fs>", "<bg>"]` for binary posteriors,
/// otherwise single letters plus `<nl>` and `<blank>`.
pub fn parse_posterior_columns(tokens: &[String]) -> std::result::Result<PosteriorColumns, String> {
    if tokens == [FS_TOKEN, BACKGROUND_TOKEN] {
        return Ok(PosteriorColumns::Binary);
    }
    let mut seen = HashSet::new();
    let symbols = tokens
        .iter()
        .map(|t| {
            let sym = match t.as_str() {
                NO_LETTER_TOKEN => Symbol::NoLetter,
                BLANK_TOKEN => Symbol::Blank,
                other => {
                    let mut chars = other.chars();
                    match (chars.next(), chars.next()) {
                        (Some(c), None) => Symbol::Letter(c),
                        _ => return Err(format!("unknown posterior column {other:?}")),
                    }
                }
            };
            if !seen.insert(sym) {
                return Err(format!("duplicate posterior column {t:?}"));
            }
            Ok(sym)
        })
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Ok(PosteriorColumns::Symbols(symbols))
}

pub fn parse_posteriors(path: impl AsRef<Path>) -> Result<Vec<FramePosteriors>> {
    let path = path.as_ref();
    read_posteriors(path, open(path)?)
}

pub fn read_posteriors(path: &Path, reader: impl BufRead) -> Result<Vec<FramePosteriors>> {
    let mut out = Vec::new();
    let mut ids = HashSet::new();
    for_each_record(path, reader, |line, text| {
        let rec: PosteriorRecord =
            serde_json::from_str(text).map_err(|e| parse_error(path, line, e.to_string()))?;
        let columns = parse_posterior_columns(&rec.symbols).map_err(|m| parse_error(path, line, m))?;
        let post = FramePosteriors::new(rec.clip_id, columns, rec.rows)
            .map_err(|e| validation_error(path, line, e))?;
        if !ids.insert(post.clip_id.clone()) {
            return Err(validation_error(
                path,
                line,
                Error::Invalid(format!("duplicate clip_id {}", post.clip_id)),
            ));
        }
        out.push(post);
        Ok(())
    })?;
    Ok(out)
}

pub fn write_posteriors(path: impl AsRef<Path>, posteriors: &[FramePosteriors]) -> Result<()> {
    let path = path.as_ref();
    let mut w = create(path)?;
    write_posteriors_to(&mut w, posteriors).map_err(io_error(path))?;
    w.flush().map_err(io_error(path))
}

pub fn write_posteriors_to(w: &mut impl Write, posteriors: &[FramePosteriors]) -> std::io::Result<()> {
    for p in posteriors {
        let symbols = match p.columns() {
            PosteriorColumns::Binary => vec![FS_TOKEN.to_owned(), BACKGROUND_TOKEN.to_owned()],
            PosteriorColumns::Symbols(s) => s.iter().map(column_token).collect(),
        };
        let rec = PosteriorRecord {
            clip_id: p.clip_id.clone(),
            symbols,
            rows: p.rows().map(<[f64]>::to_vec).collect(),
        };
        serde_json::to_writer(&mut *w, &rec)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub const DEFAULT_CHUNK_LEN: usize = 300;
pub const DEFAULT_CHUNK_OVERLAP: usize = 75;

#[derive(Debug, Clone, PartialEq)]
pub struct Chunk {
    /// First frame of the chunk in the source clip.
    pub offset: usize,
    /// The chunk as a clip of its own, id `"{source}@{offset}"`, with
    /// ground truth re-based to the chunk start.
    pub clip: Clip,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChunkedClip {
    pub chunks: Vec<Chunk>,
    /// Ground-truth segments that no chunk fully contains.
    pub spill: Vec<LabeledSegment>,
}

/// Split a clip into windows of `chunk_len` frames starting every
/// `chunk_len - overlap` frames; the last window is cut at the clip end.
/// A ground-truth segment is copied into every chunk that fully contains it.
pub fn chunk_clip(clip: &Clip, chunk_len: usize, overlap: usize) -> Result<ChunkedClip> {
    if chunk_len == 0 || overlap >= chunk_len {
        return Err(Error::Config(format!(
            "chunk length {chunk_len} must exceed overlap {overlap}"
        )));
    }
    if clip.num_frames == 0 {
        return Err(Error::Invalid(format!("clip {} has zero frames", clip.clip_id)));
    }
    let stride = chunk_len - overlap;
    let last = clip.num_frames - 1;
    let mut windows = Vec::new();
    let mut start = 0;
    loop {
        let end = (start + chunk_len - 1).min(last);
        windows.push(Segment::new(start, end));
        if end == last {
            break;
        }
        start += stride;
    }

    let chunks = windows
        .iter()
        .map(|w| Chunk {
            offset: w.start(),
            clip: Clip::new(
                format!("{}@{}", clip.clip_id, w.start()),
                w.len(),
                clip.ground_truth
                    .iter()
                    .filter(|g| w.contains(&g.segment))
                    .map(|g| LabeledSegment::new(g.segment.rebase(w.start()), g.letters.clone()))
                    .collect(),
            ),
        })
        .collect();
    let spill = clip
        .ground_truth
        .iter()
        .filter(|g| !windows.iter().any(|w| w.contains(&g.segment)))
        .cloned()
        .collect();
    Ok(ChunkedClip { chunks, spill })
}

#[derive(Debug, Deserialize)]
struct OpenPosePerson {
    #[serde(default)]
    pose_keypoints_2d: Vec<f64>,
    #[serde(default)]
    hand_left_keypoints_2d: Vec<f64>,
    #[serde(default)]
    hand_right_keypoints_2d: Vec<f64>,
}

#[derive(Debug, Deserialize)]
struct OpenPoseFrame {
    #[serde(default)]
    people: Vec<OpenPosePerson>,
}

pub const BODY_KEYPOINTS: usize = 15;
pub const HAND_KEYPOINTS: usize = 21;

/// OpenPose-style keypoints: a JSON array with one object per frame, each
/// holding `people[*].{pose,hand_left,hand_right}_keypoints_2d` flat
/// `(x, y, confidence)` triples. The first person is used; the first 15 body
/// points and 21 points per hand are kept, giving 57 keypoints per frame.
/// Missing points have confidence 0. `scale` maps image `(y, x)` to heatmap
/// `(row, col)`.
pub fn parse_openpose_keypoints(
    text: &str,
    scale: (f64, f64),
) -> std::result::Result<Vec<Vec<Keypoint>>, String> {
    let frames: Vec<OpenPoseFrame> = serde_json::from_str(text).map_err(|e| e.to_string())?;
    let take = |flat: &[f64], n: usize, out: &mut Vec<Keypoint>| {
        for k in 0..n {
            let triple = flat.get(3 * k..3 * k + 3);
            out.push(match triple {
                Some(&[x, y, c]) => Keypoint {
                    row: y * scale.0,
                    col: x * scale.1,
                    confidence: c,
                },
                _ => Keypoint {
                    row: 0.0,
                    col: 0.0,
                    confidence: 0.0,
                },
            });
        }
    };
    Ok(frames
        .iter()
        .map(|f| {
            let mut out = Vec::with_capacity(BODY_KEYPOINTS + 2 * HAND_KEYPOINTS);
            let empty = Vec::new();
            let (body, left, right) = match f.people.first() {
                Some(p) => (
                    &p.pose_keypoints_2d,
                    &p.hand_left_keypoints_2d,
                    &p.hand_right_keypoints_2d,
                ),
                None => (&empty, &empty, &empty),
            };
            take(body, BODY_KEYPOINTS, &mut out);
            take(left, HAND_KEYPOINTS, &mut out);
            take(right, HAND_KEYPOINTS, &mut out);
            out
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;

    fn p() -> &'static Path {
        Path::new("mem.jsonl")
    }

    #[test]
    fn ground_truth_parses_and_validates() {
        let text = r#"{"clip_id":"a","num_frames":30,"segments":[{"start":0,"end":9,"letters":"AB"}]}

{"clip_id":"b","num_frames":30,"segments":[]}
"#;
        let clips = read_ground_truth(p(), Cursor::new(text), &Alphabet::latin()).unwrap();
        assert_eq!(clips.len(), 2);
        assert_eq!(clips[0].ground_truth[0].letters, "AB".into());

        let overlap = r#"{"clip_id":"a","num_frames":30,"segments":[{"start":0,"end":9,"letters":"AB"},{"start":5,"end":12,"letters":"C"}]}"#;
        let err = read_ground_truth(p(), Cursor::new(overlap), &Alphabet::latin()).unwrap_err();
        assert!(matches!(err, Error::Validation { line: 1, .. }));
    }

    #[test]
    fn duplicate_clip_id_is_a_validation_error() {
        let text = "{\"clip_id\":\"a\",\"num_frames\":3,\"segments\":[]}\n{\"clip_id\":\"a\",\"num_frames\":3,\"segments\":[]}\n";
        let err = read_ground_truth(p(), Cursor::new(text), &Alphabet::latin()).unwrap_err();
        assert!(matches!(err, Error::Validation { line: 2, .. }), "{err}");
    }

    #[test]
    fn bad_score_is_a_parse_error_on_its_line() {
        let text = "{\"clip_id\":\"a\",\"segments\":[{\"start\":0,\"end\":3,\"score\":0.5}]}\n{\"clip_id\":\"b\",\"segments\":[{\"start\":0,\"end\":3,\"score\":1.2}]}\n";
        let err = read_detections(p(), Cursor::new(text)).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
        let junk = "{\"clip_id\":\"a\",\"segments\":[{\"start\":0,\"end\":3,\"score\":\"x\"}]}\n";
        assert!(matches!(
            read_detections(p(), Cursor::new(junk)),
            Err(Error::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn posteriors_columns() {
        let text = r#"{"clip_id":"a","symbols":["<fs>","<bg>"],"rows":[[0.25,0.75]]}
{"clip_id":"b","symbols":["A","<nl>","<blank>"],"rows":[[0.2,0.3,0.5]]}
"#;
        let posts = read_posteriors(p(), Cursor::new(text)).unwrap();
        assert_eq!(posts[0].columns(), &PosteriorColumns::Binary);
        assert_eq!(posts[1].fs_probabilities().unwrap(), vec![0.7]);
        let bad = r#"{"clip_id":"a","symbols":["<fs>","<bg>"],"rows":[[0.5,0.6]]}"#;
        assert!(matches!(
            read_posteriors(p(), Cursor::new(bad)),
            Err(Error::Validation { .. })
        ));
        let unknown = r#"{"clip_id":"a","symbols":["AB"],"rows":[[1.0]]}"#;
        assert!(matches!(
            read_posteriors(p(), Cursor::new(unknown)),
            Err(Error::Parse { .. })
        ));
    }

    #[test]
    fn alignment_of_detections() {
        let clips = vec![Clip::new("a", 10, vec![]), Clip::new("b", 10, vec![])];
        let det = |id: &str, e: usize| ClipDetections {
            clip_id: id.into(),
            detections: vec![Detection {
                scored: ScoredSegment::new(Segment::new(0, e), 0.5).unwrap(),
                letters: None,
            }],
        };
        let aligned = align_detections(&clips, &[det("b", 3)]).unwrap();
        assert!(aligned[0].is_empty());
        assert_eq!(aligned[1].len(), 1);
        assert!(align_detections(&clips, &[det("zz", 3)]).is_err());
        assert!(matches!(
            align_detections(&clips, &[det("a", 10)]),
            Err(Error::Range { .. })
        ));
        assert!(external_recognizer(&[det("a", 3)]).is_err());
    }

    fn lab(s: usize, e: usize) -> LabeledSegment {
        LabeledSegment::new(Segment::new(s, e), "A")
    }

    #[test]
    fn chunking_examples() {
        let clip = Clip::new("v", 400, vec![lab(10, 50), lab(200, 310), lab(320, 330)]);
        let c = chunk_clip(&clip, 300, 75).unwrap();
        let offsets: Vec<_> = c.chunks.iter().map(|k| (k.offset, k.clip.num_frames)).collect();
        assert_eq!(offsets, vec![(0, 300), (225, 175)]);
        assert_eq!(c.chunks[0].clip.ground_truth, vec![lab(10, 50)]);
        assert_eq!(c.chunks[1].clip.ground_truth, vec![lab(95, 105)]);
        assert_eq!(c.chunks[1].clip.clip_id, "v@225");
        assert_eq!(c.spill, vec![lab(200, 310)]);
        assert!(chunk_clip(&clip, 75, 75).is_err());
    }

    #[test]
    fn short_clip_is_one_chunk() {
        let c = chunk_clip(&Clip::new("v", 300, vec![]), 300, 75).unwrap();
        assert_eq!(c.chunks.len(), 1);
    }

    #[test]
    fn openpose_frames() {
        let text = r#"[{"people":[{"pose_keypoints_2d":[10,20,0.9],"hand_left_keypoints_2d":[],"hand_right_keypoints_2d":[1,2,0.3]}]},{"people":[]}]"#;
        let frames = parse_openpose_keypoints(text, (0.5, 0.25)).unwrap();
        assert_eq!(frames.len(), 2);
        assert_eq!(frames[0].len(), 57);
        assert_eq!(
            frames[0][0],
            Keypoint {
                row: 10.0,
                col: 2.5,
                confidence: 0.9
            }
        );
        assert_eq!(frames[0][36].confidence, 0.3);
        assert!(frames[1].iter().all(|k| k.confidence == 0.0));
    }
}
