mod common;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use fseval::align::edit_distance;
use fseval::io::{
    read_detections, read_ground_truth, write_detections_to, write_ground_truth_to, ClipDetections, Detection,
};
use fseval::metrics::{ap_at_iou, ApConfig};
use fseval::recognizer::{oracle_recognize, NoisyRecognizer, Recognizer};
use fseval::report::{evaluate, EvalConfig};
use fseval::{validate_clip, Alphabet, Clip, ScoredSegment};

use common::*;

fn corpus(seed: u64, clips: usize) -> (Vec<Clip>, Vec<Vec<ScoredSegment>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let latin: Vec<char> = ('A'..='Z').collect();
    let clips: Vec<Clip> = (0..clips)
        .map(|c| {
            let n = rand::Rng::gen_range(&mut rng, 30..=120);
            let k = rand::Rng::gen_range(&mut rng, 0..=4);
            Clip::new(
                format!("p{c}"),
                n,
                random_ground_truth(&mut rng, n, k, 25, 0, &latin),
            )
        })
        .collect();
    let preds = clips
        .iter()
        .map(|c| random_predictions(&mut rng, c, 6, 30, (20, 20)))
        .collect();
    (clips, preds)
}

fn has_gt(clips: &[Clip]) -> bool {
    clips.iter().any(|c| !c.ground_truth.is_empty())
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 200, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn validation_is_idempotent(seed in any::<u64>()) {
        let (clips, _) = corpus(seed, 3);
        for clip in clips {
            let once = validate_clip(clip.clone()).unwrap();
            prop_assert_eq!(&once, &clip);
            prop_assert_eq!(validate_clip(once.clone()).unwrap(), once);
        }
    }

    #[test]
    fn ap_ignores_monotone_score_transforms(seed in any::<u64>(), delta in 0.0f64..0.9) {
        let (clips, preds) = corpus(seed, 4);
        prop_assume!(has_gt(&clips));
        let squashed: Vec<Vec<ScoredSegment>> = preds
            .iter()
            .map(|p| p.iter().map(|s| ScoredSegment::new(s.segment, s.score().powi(3) * 0.5).unwrap()).collect())
            .collect();
        let cfg = ApConfig::default();
        prop_assert_eq!(
            ap_at_iou(&clips, &preds, delta, &cfg).unwrap(),
            ap_at_iou(&clips, &squashed, delta, &cfg).unwrap()
        );
    }

    #[test]
    fn ap_does_not_grow_with_the_iou_threshold(seed in any::<u64>(), a in 0.0f64..0.95, b in 0.0f64..0.95) {
        let (clips, preds) = corpus(seed, 4);
        prop_assume!(has_gt(&clips));
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let cfg = ApConfig::default();
        prop_assert!(ap_at_iou(&clips, &preds, lo, &cfg).unwrap() >= ap_at_iou(&clips, &preds, hi, &cfg).unwrap());
    }

    #[test]
    fn files_round_trip(seed in any::<u64>()) {
        let (clips, preds) = corpus(seed, 5);
        let mut buf = Vec::new();
        write_ground_truth_to(&mut buf, &clips).unwrap();
        let back = read_ground_truth("mem".as_ref(), buf.as_slice(), &Alphabet::latin()).unwrap();
        prop_assert_eq!(&back, &clips);

        let dets: Vec<ClipDetections> = clips
            .iter()
            .zip(&preds)
            .map(|(c, p)| ClipDetections {
                clip_id: c.clip_id.clone(),
                detections: p
                    .iter()
                    .map(|s| Detection { scored: *s, letters: Some(oracle_recognize(c, s.segment)) })
                    .collect(),
            })
            .collect();
        let mut buf = Vec::new();
        write_detections_to(&mut buf, &dets).unwrap();
        let back = read_detections("mem".as_ref(), buf.as_slice()).unwrap();
        prop_assert_eq!(back, dets);
    }

    #[test]
    fn duration_bins_partition_the_ground_truth(seed in any::<u64>(), e1 in 1usize..40, gap in 1usize..40) {
        let (clips, preds) = corpus(seed, 6);
        let cfg = EvalConfig { duration_edges: vec![e1, e1 + gap], ..EvalConfig::default() };
        let bins = cfg.duration_bins();
        for len in 1..200 {
            prop_assert_eq!(bins.iter().filter(|b| b.contains(len)).count(), 1, "length {}", len);
        }
        let e = evaluate(&clips, &preds, &fseval::recognizer::OracleRecognizer, None, &cfg, serde_json::Value::Null).unwrap();
        let total: usize = e.report.duration_bins.iter().map(|b| b.ground_truth_segments).sum();
        prop_assert_eq!(total, e.report.corpus.ground_truth_segments);
    }
}

#[test]
fn noisy_recognizer_hits_its_error_rate() {
    let (clips, _) = corpus(99, 300);
    for rate in [0.05, 0.1, 0.3, 0.5] {
        let rec = NoisyRecognizer::new(rate, 7).unwrap();
        let (mut errors, mut letters) = (0usize, 0usize);
        for c in &clips {
            for g in &c.ground_truth {
                let clean = oracle_recognize(c, g.segment);
                let noisy = rec.recognize(c, g.segment).unwrap();
                errors += edit_distance(clean.letters(), noisy.letters());
                letters += clean.len();
            }
        }
        let acc = 1.0 - errors as f64 / letters as f64;
        assert!(
            (acc - (1.0 - rate)).abs() <= 0.05,
            "rate {rate}: accuracy {acc} over {letters} letters"
        );
    }
}
