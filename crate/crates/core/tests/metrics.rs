mod common;

use std::path::Path;

use common::*;
use obi_core::detect::{BBox, Detection};
use obi_core::eval::{
    aggregate, average_precision, evaluate_dataset, f1, match_detections, parse_annotations,
    precision, recall, DetectionSource, EvalConfig, GroundTruthBox, ImageEvaluation, LabeledBox,
};
use obi_core::labels::Labels;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Replays each image's own annotation file as its detections.
struct Replay {
    shift: f32,
}

impl DetectionSource for Replay {
    fn detections(&self, image: &image::RgbImage, path: &Path) -> Result<Vec<Detection>, String> {
        let text = std::fs::read_to_string(path.with_extension("txt")).map_err(|e| e.to_string())?;
        Ok(parse_annotations(&text)
            .map_err(|e| e.to_string())?
            .iter()
            .map(|g| {
                let b = g.to_pixels(image.width(), image.height()).bbox;
                Detection {
                    bbox: BBox::new(b.x + self.shift * b.w, b.y, b.w, b.h),
                    class_index: g.class_index,
                    class_name: String::new(),
                    confidence: 0.9,
                    origin: None,
                }
            })
            .collect())
    }
}

fn write_dataset(dir: &Path, images: usize, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..images {
        let (w, h) = (rng.gen_range(200..500), rng.gen_range(200..500));
        synthetic_image(w, h, i as u32).save(dir.join(format!("img{i:02}.png"))).unwrap();
        let lines: Vec<String> = (0..rng.gen_range(1..6))
            .map(|_| {
                GroundTruthBox {
                    class_index: rng.gen_range(0..3),
                    cx: rng.gen_range(0.2..0.8),
                    cy: rng.gen_range(0.2..0.8),
                    w: rng.gen_range(0.05..0.3),
                    h: rng.gen_range(0.05..0.3),
                }
                .to_line()
            })
            .collect();
        std::fs::write(dir.join(format!("img{i:02}.txt")), lines.join("\n")).unwrap();
    }
}

#[test]
fn oracle_replay_scores_exactly_one() {
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), 6, 1);
    let report = evaluate_dataset(
        &Replay { shift: 0.0 },
        dir.path(),
        &Labels::generated(3),
        EvalConfig::default(),
        None,
    )
    .unwrap();
    assert!(report.skipped.is_empty());
    assert_eq!(report.images_evaluated, 6);
    assert_eq!((report.precision, report.recall, report.f1, report.map), (1.0, 1.0, 1.0, 1.0));
    assert_eq!(report.fp + report.fn_, 0);
}

#[test]
fn shifted_boxes_below_threshold_give_zero_recall() {
    // a horizontal shift of 3w/7 leaves IoU = (w - d) / (w + d) = 0.4
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), 4, 2);
    let report = evaluate_dataset(
        &Replay { shift: 3.0 / 7.0 },
        dir.path(),
        &Labels::generated(3),
        EvalConfig::default(),
        None,
    )
    .unwrap();
    assert_eq!(report.recall, 0.0);
    assert_eq!(report.tp, 0);
}

#[test]
fn missing_annotation_is_skipped_not_fatal() {
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), 3, 3);
    std::fs::remove_file(dir.path().join("img01.txt")).unwrap();
    let report = evaluate_dataset(&Replay { shift: 0.0 }, dir.path(), &Labels::generated(3), EvalConfig::default(), None).unwrap();
    assert_eq!(report.images_evaluated, 2);
    assert_eq!(report.skipped.len(), 1);
    assert!(report.skipped[0].path.ends_with("img01.png"));
    assert!(report.to_table().contains("img01.png"));
}

fn labeled(x: f32, class_index: usize) -> LabeledBox {
    LabeledBox { class_index, bbox: BBox::new(x, 50.0, 20.0, 20.0) }
}

#[test]
fn hand_traced_counts() {
    // nine ground truths, eight exact hits and two strays
    let gts: Vec<LabeledBox> = (0..9).map(|i| labeled(30.0 * i as f32 + 15.0, 0)).collect();
    let mut preds: Vec<Detection> = (0..8).map(|i| detection(30.0 * i as f32 + 15.0, 50.0, 20.0, 20.0, 0, 0.9)).collect();
    preds.push(detection(15.0, 400.0, 20.0, 20.0, 0, 0.5));
    preds.push(detection(100.0, 300.0, 20.0, 20.0, 1, 0.5));
    let m = match_detections(&preds, &gts, 0.5);
    assert_eq!((m.tp, m.fp, m.fn_), (8, 2, 1));
    let (p, r) = (precision(m.tp, m.fp), recall(m.tp, m.fn_));
    assert_eq!(p, 0.8);
    assert_eq!(r, 8.0 / 9.0);
    assert_eq!(f1(p, r), 2.0 * 0.8 * (8.0 / 9.0) / (0.8 + 8.0 / 9.0));
    let report = aggregate(
        &[ImageEvaluation { name: "a".into(), predictions: preds, ground_truth: gts }],
        &Labels::generated(2),
        EvalConfig::default(),
        None,
        Vec::new(),
    );
    assert_eq!((report.precision, report.recall), (0.8, 8.0 / 9.0));
    assert_eq!(report.tp + report.fn_, 9);
}

#[test]
fn greedy_match_two_over_one() {
    let gt = [labeled(50.0, 0)];
    // both predictions overlap the ground truth at IoU 0.7
    let shift = 20.0 * 0.3 / 1.7;
    let preds = [
        detection(50.0 + shift, 50.0, 20.0, 20.0, 0, 0.9),
        detection(50.0 - shift, 50.0, 20.0, 20.0, 0, 0.8),
    ];
    let m = match_detections(&preds, &gt, 0.5);
    assert_eq!((m.tp, m.fp, m.fn_), (1, 1, 0));
    assert!(m.is_tp[0] && !m.is_tp[1]);
    assert_eq!(match_detections(&preds[..1], &[], 0.5).fp, 1);
}

#[test]
fn hand_traced_average_precision() {
    assert_eq!(average_precision(&[(0.9, true), (0.8, false)], 1), 1.0);
    assert_eq!(average_precision(&[(0.9, false), (0.8, true)], 1), 0.5);
    assert_eq!(average_precision(&[(0.9, true)], 1), 1.0);
    assert_eq!(average_precision(&[], 3), 0.0);
    assert_eq!(precision(0, 0), 0.0);
}

proptest! {
    #[test]
    fn ap_matches_oracle(
        hits in prop::collection::vec((1u32..50, any::<bool>()), 0..40),
        extra in 0usize..4,
    ) {
        // distinct confidences so the oracle's tie order is irrelevant
        let scored: Vec<(f32, bool)> = hits.iter().enumerate()
            .map(|(i, &(c, t))| (c as f32 + i as f32 * 1e-3, t)).collect();
        let n_gt = scored.iter().filter(|s| s.1).count() + extra;
        let got = average_precision(&scored, n_gt);
        prop_assert!((got - ap_oracle(&scored, n_gt)).abs() < 1e-12);
    }

    #[test]
    fn tp_plus_fn_is_ground_truth_count(
        gts in prop::collection::vec((0.0f32..200.0, 0usize..3), 0..12),
        preds in prop::collection::vec((0.0f32..200.0, 0usize..3, 0.0f32..1.0), 0..12),
        thr in 0.1f32..0.9,
    ) {
        let g: Vec<LabeledBox> = gts.iter().map(|&(x, c)| labeled(x, c)).collect();
        let p: Vec<Detection> = preds.iter().map(|&(x, c, s)| detection(x, 50.0, 20.0, 20.0, c, s)).collect();
        let m = match_detections(&p, &g, thr);
        prop_assert_eq!(m.tp + m.fn_, g.len());
        prop_assert_eq!(m.tp + m.fp, p.len());
    }
}
