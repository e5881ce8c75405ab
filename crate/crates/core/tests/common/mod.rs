#![allow(dead_code)]

use rand::Rng;

use fseval::{Clip, LabeledSegment, ScoredSegment, Segment};

pub fn letters(rng: &mut impl Rng, alphabet: &[char], len: usize) -> String {
    (0..len)
        .map(|_| alphabet[rng.gen_range(0..alphabet.len())])
        .collect()
}

/// Disjoint, sorted ground truth with at least `gap` free frames between
/// segments. Gives up early when the clip is full.
pub fn random_ground_truth(
    rng: &mut impl Rng,
    num_frames: usize,
    count: usize,
    max_len: usize,
    gap: usize,
    alphabet: &[char],
) -> Vec<LabeledSegment> {
    let mut out = Vec::new();
    let mut cursor = 0usize;
    for _ in 0..count {
        if cursor >= num_frames {
            break;
        }
        let start = cursor + rng.gen_range(0..=(num_frames - cursor).min(max_len));
        if start >= num_frames {
            break;
        }
        let len = rng.gen_range(1..=max_len.min(num_frames - start));
        let n_letters = rng.gen_range(1..=6);
        out.push(LabeledSegment::new(
            Segment::new(start, start + len - 1),
            letters(rng, alphabet, n_letters).as_str(),
        ));
        cursor = start + len + gap;
    }
    out
}

pub fn random_segment(rng: &mut impl Rng, num_frames: usize, max_len: usize) -> Segment {
    let start = rng.gen_range(0..num_frames);
    let len = rng.gen_range(1..=max_len.min(num_frames - start));
    Segment::new(start, start + len - 1)
}

/// Score `k / steps` with `k` in `1..=max_k`; coarse grids make ties common.
pub fn grid_score(rng: &mut impl Rng, steps: u32, max_k: u32) -> f64 {
    f64::from(rng.gen_range(1..=max_k)) / f64::from(steps)
}

pub fn random_predictions(
    rng: &mut impl Rng,
    clip: &Clip,
    count: usize,
    max_len: usize,
    (steps, max_k): (u32, u32),
) -> Vec<ScoredSegment> {
    (0..count)
        .map(|_| {
            let seg = if !clip.ground_truth.is_empty() && rng.gen_bool(0.5) {
                let g = clip.ground_truth[rng.gen_range(0..clip.ground_truth.len())].segment;
                jitter(rng, g, 3, clip.num_frames)
            } else {
                random_segment(rng, clip.num_frames, max_len)
            };
            ScoredSegment::new(seg, grid_score(rng, steps, max_k)).unwrap()
        })
        .collect()
}

pub fn jitter(rng: &mut impl Rng, s: Segment, amount: usize, num_frames: usize) -> Segment {
    let a = amount as i64;
    let start = (s.start() as i64 + rng.gen_range(-a..=a)).clamp(0, num_frames as i64 - 1);
    let end = (s.end() as i64 + rng.gen_range(-a..=a)).clamp(start, num_frames as i64 - 1);
    Segment::new(start as usize, end as usize)
}

/// Synthetic corpus with ground-truth letters from A-Z.
pub fn synthetic_corpus(rng: &mut impl Rng, clips: usize) -> Vec<Clip> {
    let latin: Vec<char> = ('A'..='Z').collect();
    (0..clips)
        .map(|c| {
            let n = rng.gen_range(200..=1000);
            let k = rng.gen_range(0..=3);
            let gt = random_ground_truth(rng, n, k, 150, 10, &latin);
            Clip::new(format!("clip{c:05}"), n, gt)
        })
        .collect()
}

pub fn ground_truth_as_predictions(clips: &[Clip]) -> Vec<Vec<ScoredSegment>> {
    clips
        .iter()
        .map(|c| {
            c.ground_truth
                .iter()
                .map(|g| ScoredSegment::new(g.segment, 1.0).unwrap())
                .collect()
        })
        .collect()
}
