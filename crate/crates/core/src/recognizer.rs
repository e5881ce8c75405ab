//! Recognizer contract and deterministic mocks.
//!
//! AP@Acc, MSA and the letter-error loss all need letters for an arbitrary
//! `(clip, segment)`. Real systems plug in through [`ExternalRecognizer`],
//! which replays transcripts stored in a detections file; the mocks make
//! the metrics testable without a trained model.

use std::collections::{BTreeSet, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::metrics::temporal_iou;
use crate::model::{Alphabet, Clip, LetterSequence, Segment};

/// Maps a segment of a clip to a letter sequence.
///
/// Implementations must be deterministic and safe to call concurrently.
pub trait Recognizer: Sync {
    fn recognize(&self, clip: &Clip, segment: Segment) -> Result<LetterSequence>;
}

impl<R: Recognizer + ?Sized> Recognizer for &R {
    fn recognize(&self, clip: &Clip, segment: Segment) -> Result<LetterSequence> {
        (**self).recognize(clip, segment)
    }
}

/// Ground-truth lookup with a uniform letter-to-frame alignment.
#[derive(Debug, Clone, Copy, Default)]
pub struct OracleRecognizer;

impl Recognizer for OracleRecognizer {
    fn recognize(&self, clip: &Clip, segment: Segment) -> Result<LetterSequence> {
        Ok(oracle_recognize(clip, segment))
    }
}

/// Letters of the best-overlapping ground truth whose uniform sub-spans have
/// their midpoint inside `segment`.
///
/// Frame `f` is treated as the unit interval `[f, f + 1)`, so a ground truth
/// `(s, t)` with `L` letters places letter `k` at `s + (k + 0.5)(t - s + 1)/L`.
pub fn oracle_recognize(clip: &Clip, segment: Segment) -> LetterSequence {
    let mut best: Option<(f64, usize)> = None;
    for (j, g) in clip.ground_truth.iter().enumerate() {
        let iou = temporal_iou(&segment, &g.segment);
        if iou > 0.0 && best.is_none_or(|(b, _)| iou > b) {
            best = Some((iou, j));
        }
    }
    let Some((_, j)) = best else {
        return LetterSequence::empty();
    };
    let gt = &clip.ground_truth[j];
    let letters = gt.letters.letters();
    let n = letters.len() as f64;
    let (gs, glen) = (gt.segment.start() as f64, gt.segment.len() as f64);
    let (lo, hi) = (segment.start() as f64, (segment.end() + 1) as f64);
    let kept = letters
        .iter()
        .enumerate()
        .filter(|(k, _)| {
            let mid = gs + (*k as f64 + 0.5) * glen / n;
            lo <= mid && mid < hi
        })
        .map(|(_, &c)| c)
        .collect();
    LetterSequence::new(kept)
}

/// Oracle output corrupted at a controlled per-letter rate.
///
/// Each letter is edited with probability `error_rate`: half of the edits are
/// substitutions and the rest are either all deletions or all insertions
/// (chosen once per call). Replacement letters are drawn from alphabet letters
/// absent from the input, so the edit distance to the oracle output equals the
/// number of edits whenever such letters exist.
#[derive(Debug, Clone)]
pub struct NoisyRecognizer {
    pub error_rate: f64,
    pub seed: u64,
    pub alphabet: Alphabet,
}

impl NoisyRecognizer {
    pub fn new(error_rate: f64, seed: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&error_rate) {
            return Err(Error::Config(format!(
                "error rate {error_rate} is outside [0, 1]"
            )));
        }
        Ok(NoisyRecognizer {
            error_rate,
            seed,
            alphabet: Alphabet::latin(),
        })
    }
}

impl Recognizer for NoisyRecognizer {
    fn recognize(&self, clip: &Clip, segment: Segment) -> Result<LetterSequence> {
        Ok(noisy_recognize(
            clip,
            segment,
            self.error_rate,
            self.seed,
            &self.alphabet,
        ))
    }
}

pub fn noisy_recognize(
    clip: &Clip,
    segment: Segment,
    error_rate: f64,
    seed: u64,
    alphabet: &Alphabet,
) -> LetterSequence {
    let clean = oracle_recognize(clip, segment);
    if error_rate <= 0.0 || clean.is_empty() {
        return clean;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(call_seed(seed, &clip.clip_id, segment));
    corrupt(&clean, error_rate, alphabet, &mut rng)
}

fn corrupt(clean: &LetterSequence, rate: f64, alphabet: &Alphabet, rng: &mut impl Rng) -> LetterSequence {
    let present: BTreeSet<char> = clean.letters().iter().copied().collect();
    let mut foreign: Vec<char> = alphabet.letters().filter(|c| !present.contains(c)).collect();
    if foreign.is_empty() {
        foreign = alphabet.letters().collect();
    }
    let inserting = rng.gen_bool(0.5);
    let mut out = Vec::with_capacity(clean.len() + 1);
    for &c in clean.letters() {
        if !rng.gen_bool(rate) {
            out.push(c);
            continue;
        }
        let pick = foreign[rng.gen_range(0..foreign.len())];
        if rng.gen_bool(0.5) {
            out.push(pick);
        } else if inserting {
            out.push(c);
            out.push(pick);
        }
        // else: deletion
    }
    LetterSequence::new(out)
}

/// FNV-1a over the seed, clip id and span, so outputs do not depend on
/// call order.
fn call_seed(seed: u64, clip_id: &str, segment: Segment) -> u64 {
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let bytes = seed
        .to_le_bytes()
        .into_iter()
        .chain(clip_id.bytes())
        .chain((segment.start() as u64).to_le_bytes())
        .chain((segment.end() as u64).to_le_bytes());
    for b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(PRIME);
    }
    h
}

/// Replays transcripts supplied alongside detections.
#[derive(Debug, Clone, Default)]
pub struct ExternalRecognizer {
    outputs: HashMap<(String, Segment), LetterSequence>,
}

impl ExternalRecognizer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, clip_id: impl Into<String>, segment: Segment, letters: LetterSequence) {
        self.outputs.insert((clip_id.into(), segment), letters);
    }

    pub fn len(&self) -> usize {
        self.outputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.outputs.is_empty()
    }
}

impl Recognizer for ExternalRecognizer {
    fn recognize(&self, clip: &Clip, segment: Segment) -> Result<LetterSequence> {
        self.outputs
            .get(&(clip.clip_id.clone(), segment))
            .cloned()
            .ok_or_else(|| {
                Error::Recognizer(format!(
                    "no transcript for clip {} segment {segment}",
                    clip.clip_id
                ))
            })
    }
}
