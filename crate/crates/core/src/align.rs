//! Letter-sequence scoring: edit distance, letter accuracy, CTC label
//! collapsing and the CTC forward negative log-likelihood.

use crate::error::{Error, Result};
use crate::model::{Clip, FramePosteriors, LetterSequence, PosteriorColumns, Segment, Symbol};

/// Unit-cost Levenshtein distance.
pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    // Keep the shorter sequence in the row.
    let (long, short) = if a.len() >= b.len() { (a, b) } else { (b, a) };
    if short.is_empty() {
        return long.len();
    }
    let mut row: Vec<usize> = (0..=short.len()).collect();
    for (i, x) in long.iter().enumerate() {
        let mut diag = row[0];
        row[0] = i + 1;
        for (j, y) in short.iter().enumerate() {
            let above = row[j + 1];
            let sub = diag + usize::from(x != y);
            row[j + 1] = sub.min(above + 1).min(row[j] + 1);
            diag = above;
        }
    }
    row[short.len()]
}

/// `Acc = 1 - D(truth, hyp) / |truth|`. Not clamped; can be negative.
pub fn accuracy<T: PartialEq>(truth: &[T], hyp: &[T]) -> Result<f64> {
    if truth.is_empty() {
        return Err(Error::EmptyTruth);
    }
    Ok(accuracy_from_distance(edit_distance(truth, hyp), truth.len()))
}

pub fn letter_accuracy(truth: &LetterSequence, hyp: &LetterSequence) -> Result<f64> {
    accuracy(truth.letters(), hyp.letters())
}

#[inline]
pub(crate) fn accuracy_from_distance(distance: usize, truth_len: usize) -> f64 {
    1.0 - distance as f64 / truth_len as f64
}

/// Merge adjacent duplicates, then drop blanks.
pub fn collapse_labels(frame_labels: &[Symbol]) -> Vec<Symbol> {
    let mut out = Vec::new();
    let mut prev = None;
    for &s in frame_labels {
        if prev != Some(s) && s != Symbol::Blank {
            out.push(s);
        }
        prev = Some(s);
    }
    out
}

fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// CTC negative log-likelihood of `target` over all frames of `posteriors`.
///
/// Returns `f64::INFINITY` when no frame labelling collapses to the target.
pub fn ctc_forward_nll(posteriors: &FramePosteriors, target: &[Symbol]) -> Result<f64> {
    let span = match posteriors.num_frames() {
        0 => None,
        n => Some(Segment::new(0, n - 1)),
    };
    ctc_nll_over(posteriors, span, target)
}

/// CTC negative log-likelihood restricted to the frames of `span`.
pub fn ctc_forward_nll_span(posteriors: &FramePosteriors, span: Segment, target: &[Symbol]) -> Result<f64> {
    if span.end() >= posteriors.num_frames() {
        return Err(Error::Shape(format!(
            "span {span} exceeds {} posterior frames",
            posteriors.num_frames()
        )));
    }
    ctc_nll_over(posteriors, Some(span), target)
}

fn ctc_nll_over(posteriors: &FramePosteriors, span: Option<Segment>, target: &[Symbol]) -> Result<f64> {
    let columns = match posteriors.columns() {
        PosteriorColumns::Symbols(_) => posteriors.columns(),
        PosteriorColumns::Binary => {
            return Err(Error::Shape("CTC needs symbol posteriors, got binary".into()))
        }
    };
    if target.contains(&Symbol::Blank) {
        return Err(Error::Shape("CTC target contains the blank symbol".into()));
    }
    let blank = columns
        .index_of(Symbol::Blank)
        .ok_or_else(|| Error::Shape("posteriors have no blank column".into()))?;
    let labels = target
        .iter()
        .map(|&s| {
            columns
                .index_of(s)
                .ok_or_else(|| Error::Shape(format!("target symbol {s} has no posterior column")))
        })
        .collect::<Result<Vec<_>>>()?;

    let Some(span) = span else {
        // Zero frames only produce the empty sequence.
        return Ok(if labels.is_empty() { 0.0 } else { f64::INFINITY });
    };

    // Extended label sequence: blank, l1, blank, l2, ..., blank.
    let ext: Vec<usize> = std::iter::once(blank)
        .chain(labels.iter().flat_map(|&l| [l, blank]))
        .collect();
    let s_len = ext.len();
    let mut alpha = vec![f64::NEG_INFINITY; s_len];
    let mut next = vec![f64::NEG_INFINITY; s_len];

    let mut frames = span.start()..=span.end();
    let first = posteriors.row(frames.next().unwrap_or(span.start()));
    alpha[0] = first[ext[0]].ln();
    if s_len > 1 {
        alpha[1] = first[ext[1]].ln();
    }
    for t in frames {
        let row = posteriors.row(t);
        for s in 0..s_len {
            let mut acc = alpha[s];
            if s >= 1 {
                acc = log_add(acc, alpha[s - 1]);
            }
            if s >= 2 && ext[s] != blank && ext[s] != ext[s - 2] {
                acc = log_add(acc, alpha[s - 2]);
            }
            next[s] = if acc == f64::NEG_INFINITY {
                acc
            } else {
                acc + row[ext[s]].ln()
            };
        }
        std::mem::swap(&mut alpha, &mut next);
    }
    let total = if s_len > 1 {
        log_add(alpha[s_len - 1], alpha[s_len - 2])
    } else {
        alpha[0]
    };
    Ok(-total)
}

/// CTC over each ground-truth span plus a frame-level `-log p(no-letter)`
/// term on every frame outside the ground truth.
pub fn partial_alignment_loss(clip: &Clip, posteriors: &FramePosteriors) -> Result<f64> {
    if posteriors.num_frames() != clip.num_frames {
        return Err(Error::LengthMismatch {
            what: "posterior frames",
            expected: clip.num_frames,
            got: posteriors.num_frames(),
        });
    }
    let no_letter = posteriors
        .columns()
        .index_of(Symbol::NoLetter)
        .ok_or_else(|| Error::Shape("posteriors have no no-letter column".into()))?;

    let mut loss = 0.0;
    for g in &clip.ground_truth {
        loss += ctc_forward_nll_span(posteriors, g.segment, &g.letters.to_symbols())?;
    }
    let mut covered = vec![false; clip.num_frames];
    for g in &clip.ground_truth {
        covered[g.segment.start()..=g.segment.end()].fill(true);
    }
    for (t, _) in covered.iter().enumerate().filter(|(_, c)| !**c) {
        loss -= posteriors.row(t)[no_letter].ln();
    }
    Ok(loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::LabeledSegment;
    use approx::assert_relative_eq;

    fn chars(s: &str) -> Vec<char> {
        s.chars().collect()
    }

    fn a_blank(rows: Vec<Vec<f64>>) -> FramePosteriors {
        FramePosteriors::new(
            "c",
            PosteriorColumns::Symbols(vec![Symbol::Letter('A'), Symbol::Letter('B'), Symbol::Blank]),
            rows,
        )
        .unwrap()
    }

    #[test]
    fn edit_distance_examples() {
        assert_eq!(edit_distance(&chars("PIRATES"), &chars("PIRATES")), 0);
        assert_eq!(edit_distance(&chars("PATRICK"), &chars("PATRIK")), 1);
        assert_eq!(edit_distance(&chars("ABC"), &chars("")), 3);
        assert_eq!(edit_distance(&chars(""), &chars("ABC")), 3);
        assert_eq!(edit_distance(&chars("KITTEN"), &chars("SITTING")), 3);
    }

    #[test]
    fn accuracy_examples() {
        let acc = |t: &str, h: &str| letter_accuracy(&t.into(), &h.into()).unwrap();
        assert_eq!(acc("PIRATES", "PIRATES"), 1.0);
        assert_eq!(acc("A", "BCD"), -2.0);
        assert_eq!(acc("AB", "A"), 0.5);
        assert!(matches!(
            letter_accuracy(&"".into(), &"A".into()),
            Err(Error::EmptyTruth)
        ));
    }

    #[test]
    fn collapse_examples() {
        use Symbol::*;
        let a = Letter('A');
        assert_eq!(collapse_labels(&[a, a, Blank]), vec![a]);
        assert_eq!(collapse_labels(&[a, Blank, a]), vec![a, a]);
        assert_eq!(collapse_labels(&[Blank, Blank]), vec![]);
    }

    #[test]
    fn ctc_single_frame() {
        let p = a_blank(vec![vec![0.6, 0.1, 0.3]]);
        let nll = ctc_forward_nll(&p, &[Symbol::Letter('A')]).unwrap();
        assert_relative_eq!(nll, -(0.6f64).ln(), max_relative = 1e-12);
        assert_relative_eq!(nll, 0.5108, epsilon = 1e-4);
    }

    #[test]
    fn ctc_two_frames_three_paths() {
        let p = a_blank(vec![vec![0.5, 0.0, 0.5], vec![0.5, 0.0, 0.5]]);
        let nll = ctc_forward_nll(&p, &[Symbol::Letter('A')]).unwrap();
        assert_relative_eq!(nll, -(0.75f64).ln(), max_relative = 1e-12);
    }

    #[test]
    fn ctc_target_longer_than_frames_is_infinite() {
        let p = a_blank(vec![vec![0.4, 0.4, 0.2]]);
        let nll = ctc_forward_nll(&p, &[Symbol::Letter('A'), Symbol::Letter('B')]).unwrap();
        assert_eq!(nll, f64::INFINITY);
        // A repeat needs a blank in between: AA cannot fit in two frames.
        let p = a_blank(vec![vec![0.4, 0.4, 0.2], vec![0.4, 0.4, 0.2]]);
        let nll = ctc_forward_nll(&p, &[Symbol::Letter('A'), Symbol::Letter('A')]).unwrap();
        assert_eq!(nll, f64::INFINITY);
    }

    #[test]
    fn ctc_rejects_unknown_symbols_and_binary_rows() {
        let p = a_blank(vec![vec![0.4, 0.4, 0.2]]);
        assert!(matches!(
            ctc_forward_nll(&p, &[Symbol::Letter('Z')]),
            Err(Error::Shape(_))
        ));
        let b = FramePosteriors::from_fs_probabilities("c", &[0.5]).unwrap();
        assert!(matches!(ctc_forward_nll(&b, &[]), Err(Error::Shape(_))));
    }

    fn letters_nl_blank(rows: Vec<Vec<f64>>) -> FramePosteriors {
        FramePosteriors::new(
            "c",
            PosteriorColumns::Symbols(vec![Symbol::Letter('A'), Symbol::NoLetter, Symbol::Blank]),
            rows,
        )
        .unwrap()
    }

    #[test]
    fn partial_alignment_examples() {
        let clip = Clip::new("c", 3, vec![]);
        let p = letters_nl_blank(vec![vec![0.0, 1.0, 0.0]; 3]);
        assert_eq!(partial_alignment_loss(&clip, &p).unwrap(), 0.0);

        let clip = Clip::new("c", 1, vec![]);
        let p = letters_nl_blank(vec![vec![0.5, 0.5, 0.0]]);
        assert_relative_eq!(partial_alignment_loss(&clip, &p).unwrap(), 2f64.ln());

        let clip = Clip::new("c", 3, vec![LabeledSegment::new(Segment::new(0, 1), "A")]);
        let p = letters_nl_blank(vec![
            vec![0.5, 0.0, 0.5],
            vec![0.5, 0.0, 0.5],
            vec![0.5, 0.5, 0.0],
        ]);
        assert_relative_eq!(
            partial_alignment_loss(&clip, &p).unwrap(),
            -(0.75f64).ln() + 2f64.ln(),
            max_relative = 1e-12
        );
    }

    #[test]
    fn partial_alignment_checks_frame_count() {
        let clip = Clip::new("c", 2, vec![]);
        let p = letters_nl_blank(vec![vec![0.0, 1.0, 0.0]]);
        assert!(matches!(
            partial_alignment_loss(&clip, &p),
            Err(Error::LengthMismatch { .. })
        ));
    }
}
