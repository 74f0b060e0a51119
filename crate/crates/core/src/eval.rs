//! Dataset evaluation: greedy matching, precision / recall / F1, all-point
//! interpolated AP and mAP, plus model size and cost reporting.
//!
//! A dataset is a directory of images, each with a sibling `.txt`
//! annotation holding lines `class_index cx cy w h` in coordinates
//! normalised to the image extent.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use image::RgbImage;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::detect::{iou, BBox, Detection, Detector};
use crate::labels::Labels;
use crate::network::LoadedNetwork;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("annotation line {line}: {message}")]
    Annotation { line: usize, message: String },
    #[error("cannot read dataset directory {path}: {message}")]
    Dataset { path: PathBuf, message: String },
}

/// One annotated box, normalised to `[0, 1]` relative to the image extent.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroundTruthBox {
    pub class_index: usize,
    pub cx: f32,
    pub cy: f32,
    pub w: f32,
    pub h: f32,
}

impl GroundTruthBox {
    pub fn to_pixels(&self, width: u32, height: u32) -> LabeledBox {
        let (wf, hf) = (width as f32, height as f32);
        LabeledBox {
            class_index: self.class_index,
            bbox: BBox::new(self.cx * wf, self.cy * hf, self.w * wf, self.h * hf),
        }
    }

    /// Inverse of [`GroundTruthBox::to_pixels`].
    pub fn from_pixels(class_index: usize, b: &BBox, width: u32, height: u32) -> Self {
        let (wf, hf) = (width as f32, height as f32);
        Self {
            class_index,
            cx: b.x / wf,
            cy: b.y / hf,
            w: b.w / wf,
            h: b.h / hf,
        }
    }

    /// The annotation line for this box.
    pub fn to_line(&self) -> String {
        format!(
            "{} {} {} {} {}",
            self.class_index, self.cx, self.cy, self.w, self.h
        )
    }
}

pub fn parse_annotations(text: &str) -> Result<Vec<GroundTruthBox>, EvalError> {
    let mut boxes = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let err = |message: String| EvalError::Annotation {
            line: n + 1,
            message,
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 5 {
            return Err(err(format!("expected 5 fields, got {}", fields.len())));
        }
        let class_index = fields[0]
            .parse()
            .map_err(|_| err(format!("bad class index `{}`", fields[0])))?;
        let mut v = [0f32; 4];
        for (slot, f) in v.iter_mut().zip(&fields[1..]) {
            *slot = f.parse().map_err(|_| err(format!("bad coordinate `{f}`")))?;
        }
        if v.iter().any(|c| !(0.0..=1.0).contains(c)) || v[2] <= 0.0 || v[3] <= 0.0 {
            return Err(err(
                "coordinates must lie in [0, 1] with positive width and height".into(),
            ));
        }
        boxes.push(GroundTruthBox {
            class_index,
            cx: v[0],
            cy: v[1],
            w: v[2],
            h: v[3],
        });
    }
    Ok(boxes)
}

/// A ground-truth box in image pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabeledBox {
    pub class_index: usize,
    pub bbox: BBox,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MatchResult {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    /// `(prediction index, ground-truth index, iou)` for each true positive.
    pub pairs: Vec<(usize, usize, f32)>,
    /// Per prediction, in input order: whether it matched.
    pub is_tp: Vec<bool>,
}

/// Greedy matching in confidence order. Each prediction takes the
/// highest-IoU unmatched same-class ground truth with IoU ≥ `iou_threshold`
/// (ties to the lower ground-truth index).
pub fn match_detections(
    preds: &[Detection],
    gts: &[LabeledBox],
    iou_threshold: f32,
) -> MatchResult {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| {
        preds[b]
            .confidence
            .partial_cmp(&preds[a].confidence)
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let mut taken = vec![false; gts.len()];
    let mut result = MatchResult {
        is_tp: vec![false; preds.len()],
        ..Default::default()
    };
    for p in order {
        let pred = &preds[p];
        let mut best: Option<(usize, f32)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if taken[g] || gt.class_index != pred.class_index {
                continue;
            }
            let o = iou(&pred.bbox, &gt.bbox);
            if o >= iou_threshold && best.is_none_or(|(_, b)| o > b) {
                best = Some((g, o));
            }
        }
        match best {
            Some((g, o)) => {
                taken[g] = true;
                result.tp += 1;
                result.is_tp[p] = true;
                result.pairs.push((p, g, o));
            }
            None => result.fp += 1,
        }
    }
    result.fn_ = gts.len() - result.tp;
    result
}

/// `TP / (TP + FP)`, zero when there are no predictions.
pub fn precision(tp: usize, fp: usize) -> f64 {
    ratio(tp, tp + fp)
}

/// `TP / (TP + FN)`, zero when there is no ground truth.
pub fn recall(tp: usize, fn_: usize) -> f64 {
    ratio(tp, tp + fn_)
}

pub fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Area under the precision–recall curve with all-point interpolation.
///
/// `scored` holds `(confidence, is_true_positive)` for every prediction of
/// one class across the dataset. Equal confidences keep their input order.
pub fn average_precision(scored: &[(f32, bool)], num_ground_truth: usize) -> f64 {
    if num_ground_truth == 0 || scored.is_empty() {
        return 0.0;
    }
    let mut sorted = scored.to_vec();
    sorted.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(std::cmp::Ordering::Equal));
    let mut recalls = Vec::with_capacity(sorted.len());
    let mut precisions = Vec::with_capacity(sorted.len());
    let (mut tp, mut fp) = (0usize, 0usize);
    for &(_, hit) in &sorted {
        if hit {
            tp += 1;
        } else {
            fp += 1;
        }
        recalls.push(tp as f64 / num_ground_truth as f64);
        precisions.push(tp as f64 / (tp + fp) as f64);
    }
    for i in (0..precisions.len().saturating_sub(1)).rev() {
        precisions[i] = precisions[i].max(precisions[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (r, p) in recalls.iter().zip(&precisions) {
        ap += (r - prev_recall) * p;
        prev_recall = *r;
    }
    ap
}

/// Unweighted mean of `ap` over classes that have at least one ground truth.
pub fn map_at_iou(per_class: &[ClassMetrics]) -> f64 {
    let present: Vec<f64> = per_class
        .iter()
        .filter(|c| c.ground_truths > 0)
        .map(|c| c.ap)
        .collect();
    if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassMetrics {
    pub class_index: usize,
    pub class_name: String,
    pub ground_truths: usize,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub ap: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ModelStats {
    pub params: u64,
    pub flops: u64,
    pub model_volume_bytes: u64,
}

impl ModelStats {
    /// Counts from the graph; volume is the Darknet weight-file length.
    pub fn of(net: &LoadedNetwork, model_volume_bytes: u64) -> Self {
        Self {
            params: net.param_count(),
            flops: net.flop_count(),
            model_volume_bytes,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SkippedImage {
    pub path: PathBuf,
    pub reason: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EvalConfig {
    pub conf_threshold: f32,
    pub nms_threshold: f32,
    pub iou_threshold: f32,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            conf_threshold: crate::detect::DEFAULT_CONFIDENCE,
            nms_threshold: crate::detect::DEFAULT_NMS,
            iou_threshold: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub config: EvalConfig,
    pub images_evaluated: usize,
    pub skipped: Vec<SkippedImage>,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub map: f64,
    /// Mean score of true-positive detections.
    pub mean_tp_confidence: f64,
    pub per_class: Vec<ClassMetrics>,
    pub model: Option<ModelStats>,
}

/// Predictions and ground truth for one image, both in image pixels.
#[derive(Debug, Clone)]
pub struct ImageEvaluation {
    pub name: String,
    pub predictions: Vec<Detection>,
    pub ground_truth: Vec<LabeledBox>,
}

/// Folds per-image results into a report. Order of `images` fixes tie-breaking.
pub fn aggregate(
    images: &[ImageEvaluation],
    labels: &Labels,
    config: EvalConfig,
    model: Option<ModelStats>,
    skipped: Vec<SkippedImage>,
) -> MetricsReport {
    let num_classes = images
        .iter()
        .flat_map(|im| {
            im.predictions
                .iter()
                .map(|d| d.class_index)
                .chain(im.ground_truth.iter().map(|g| g.class_index))
        })
        .map(|c| c + 1)
        .max()
        .unwrap_or(0)
        .max(labels.len());
    let mut per_class: Vec<ClassMetrics> = (0..num_classes)
        .map(|c| ClassMetrics {
            class_index: c,
            class_name: labels.name(c),
            ground_truths: 0,
            tp: 0,
            fp: 0,
            fn_: 0,
            ap: 0.0,
        })
        .collect();
    let mut scored: Vec<Vec<(f32, bool)>> = vec![Vec::new(); num_classes];
    let (mut tp_conf_sum, mut tp_total) = (0.0f64, 0usize);
    for im in images {
        let m = match_detections(&im.predictions, &im.ground_truth, config.iou_threshold);
        for (d, &hit) in im.predictions.iter().zip(&m.is_tp) {
            let c = &mut per_class[d.class_index];
            if hit {
                c.tp += 1;
                tp_conf_sum += f64::from(d.confidence);
                tp_total += 1;
            } else {
                c.fp += 1;
            }
            scored[d.class_index].push((d.confidence, hit));
        }
        for g in &im.ground_truth {
            per_class[g.class_index].ground_truths += 1;
        }
    }
    for (c, s) in per_class.iter_mut().zip(&scored) {
        c.fn_ = c.ground_truths - c.tp;
        c.ap = average_precision(s, c.ground_truths);
    }
    let tp: usize = per_class.iter().map(|c| c.tp).sum();
    let fp: usize = per_class.iter().map(|c| c.fp).sum();
    let fn_: usize = per_class.iter().map(|c| c.fn_).sum();
    let p = precision(tp, fp);
    let r = recall(tp, fn_);
    MetricsReport {
        config,
        images_evaluated: images.len(),
        skipped,
        tp,
        fp,
        fn_,
        precision: p,
        recall: r,
        f1: f1(p, r),
        map: map_at_iou(&per_class),
        mean_tp_confidence: if tp_total == 0 {
            0.0
        } else {
            tp_conf_sum / tp_total as f64
        },
        per_class,
        model,
    }
}

/// Anything that turns an image into detections in image pixels.
pub trait DetectionSource: Sync {
    fn detections(&self, image: &RgbImage, path: &Path) -> Result<Vec<Detection>, String>;
}

/// A detector run at fixed thresholds.
pub struct ThresholdedDetector<'a> {
    pub detector: &'a Detector,
    pub conf_threshold: f32,
    pub nms_threshold: f32,
}

impl DetectionSource for ThresholdedDetector<'_> {
    fn detections(&self, image: &RgbImage, _path: &Path) -> Result<Vec<Detection>, String> {
        self.detector
            .detect(image, self.conf_threshold, self.nms_threshold)
            .map_err(|e| e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetEntry {
    pub image: PathBuf,
    pub annotation: PathBuf,
}

/// Images (`.png`, `.jpg`, `.jpeg`) under `dir`, sorted by file name, each
/// paired with its sibling `.txt` path (which may not exist).
pub fn scan_dataset(dir: &Path) -> Result<Vec<DatasetEntry>, EvalError> {
    let read = std::fs::read_dir(dir).map_err(|e| EvalError::Dataset {
        path: dir.to_path_buf(),
        message: e.to_string(),
    })?;
    let mut entries: Vec<DatasetEntry> = read
        .filter_map(Result::ok)
        .map(|e| e.path())
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
        })
        .map(|image| DatasetEntry {
            annotation: image.with_extension("txt"),
            image,
        })
        .collect();
    entries.sort_by(|a, b| a.image.cmp(&b.image));
    Ok(entries)
}

fn evaluate_entry(
    source: &dyn DetectionSource,
    entry: &DatasetEntry,
) -> Result<ImageEvaluation, String> {
    let text = std::fs::read_to_string(&entry.annotation)
        .map_err(|_| format!("missing annotation {}", entry.annotation.display()))?;
    let gts = parse_annotations(&text).map_err(|e| e.to_string())?;
    let image = image::open(&entry.image)
        .map_err(|e| format!("cannot decode image: {e}"))?
        .to_rgb8();
    let predictions = source.detections(&image, &entry.image)?;
    Ok(ImageEvaluation {
        name: entry.image.display().to_string(),
        ground_truth: gts
            .iter()
            .map(|g| g.to_pixels(image.width(), image.height()))
            .collect(),
        predictions,
    })
}

/// Evaluates every image in `dir`. Images that cannot be evaluated (missing
/// or malformed annotation, undecodable image) are listed in
/// [`MetricsReport::skipped`] and do not stop the run.
pub fn evaluate_dataset(
    source: &dyn DetectionSource,
    dir: &Path,
    labels: &Labels,
    config: EvalConfig,
    model: Option<ModelStats>,
) -> Result<MetricsReport, EvalError> {
    let entries = scan_dataset(dir)?;
    let results: Vec<Result<ImageEvaluation, SkippedImage>> = entries
        .par_iter()
        .map(|e| {
            evaluate_entry(source, e).map_err(|reason| SkippedImage {
                path: e.image.clone(),
                reason,
            })
        })
        .collect();
    let mut images = Vec::new();
    let mut skipped = Vec::new();
    for r in results {
        match r {
            Ok(im) => images.push(im),
            Err(s) => skipped.push(s),
        }
    }
    Ok(aggregate(&images, labels, config, model, skipped))
}

impl MetricsReport {
    /// Fixed-width table: headline rows first (Confidence, Precision,
    /// Recall), then F1, mAP, counts, model cost, and per-class AP.
    pub fn to_table(&self) -> String {
        let pct = |v: f64| format!("{:.2}%", v * 100.0);
        let mut rows: Vec<(String, String)> = vec![
            ("Confidence".into(), pct(self.mean_tp_confidence)),
            ("Precision".into(), pct(self.precision)),
            ("Recall".into(), pct(self.recall)),
            ("F1".into(), pct(self.f1)),
            (
                format!("mAP@{:.2}", self.config.iou_threshold),
                pct(self.map),
            ),
            ("TP".into(), self.tp.to_string()),
            ("FP".into(), self.fp.to_string()),
            ("FN".into(), self.fn_.to_string()),
            ("Images".into(), self.images_evaluated.to_string()),
            ("Skipped".into(), self.skipped.len().to_string()),
        ];
        if let Some(m) = &self.model {
            rows.push(("Parameters".into(), m.params.to_string()));
            rows.push(("FLOPs".into(), m.flops.to_string()));
            rows.push(("Model volume (bytes)".into(), m.model_volume_bytes.to_string()));
        }
        let width = rows.iter().map(|(k, _)| k.chars().count()).max().unwrap_or(0);
        let mut out = String::new();
        for (k, v) in &rows {
            let _ = writeln!(out, "{k:<width$}  {v:>12}");
        }
        let with_gt: Vec<&ClassMetrics> =
            self.per_class.iter().filter(|c| c.ground_truths > 0 || c.fp > 0).collect();
        if !with_gt.is_empty() {
            let _ = writeln!(out, "\n{:<6} {:<16} {:>5} {:>5} {:>5} {:>5} {:>8}", "class", "name", "gt", "tp", "fp", "fn", "AP");
            for c in with_gt {
                let _ = writeln!(
                    out,
                    "{:<6} {:<16} {:>5} {:>5} {:>5} {:>5} {:>8.4}",
                    c.class_index, c.class_name, c.ground_truths, c.tp, c.fp, c.fn_, c.ap
                );
            }
        }
        for s in &self.skipped {
            let _ = writeln!(out, "skipped {}: {}", s.path.display(), s.reason);
        }
        out
    }

    /// One `name=value` line per metric.
    pub fn to_key_values(&self) -> String {
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k}={v}");
        };
        kv("conf_threshold", self.config.conf_threshold.to_string());
        kv("nms_threshold", self.config.nms_threshold.to_string());
        kv("iou_threshold", self.config.iou_threshold.to_string());
        kv("images", self.images_evaluated.to_string());
        kv("skipped", self.skipped.len().to_string());
        kv("tp", self.tp.to_string());
        kv("fp", self.fp.to_string());
        kv("fn", self.fn_.to_string());
        kv("precision", self.precision.to_string());
        kv("recall", self.recall.to_string());
        kv("f1", self.f1.to_string());
        kv("map", self.map.to_string());
        kv("mean_tp_confidence", self.mean_tp_confidence.to_string());
        if let Some(m) = &self.model {
            kv("params", m.params.to_string());
            kv("flops", m.flops.to_string());
            kv("model_volume_bytes", m.model_volume_bytes.to_string());
        }
        for c in self.per_class.iter().filter(|c| c.ground_truths > 0) {
            kv(&format!("ap.{}", c.class_index), c.ap.to_string());
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pred(x: f32, class_index: usize, confidence: f32) -> Detection {
        Detection {
            bbox: BBox::new(x, 50.0, 20.0, 20.0),
            class_index,
            class_name: String::new(),
            confidence,
            origin: None,
        }
    }

    fn gt(x: f32, class_index: usize) -> LabeledBox {
        LabeledBox {
            class_index,
            bbox: BBox::new(x, 50.0, 20.0, 20.0),
        }
    }

    #[test]
    fn exact_predictions_all_match() {
        let gts = vec![gt(10.0, 0), gt(60.0, 1), gt(110.0, 0)];
        let preds: Vec<Detection> = gts.iter().map(|g| pred(g.bbox.x, g.class_index, 0.9)).collect();
        let m = match_detections(&preds, &gts, 0.5);
        assert_eq!((m.tp, m.fp, m.fn_), (3, 0, 0));
    }

    #[test]
    fn lone_prediction_is_false_positive() {
        let m = match_detections(&[pred(0.0, 0, 0.9)], &[], 0.5);
        assert_eq!((m.tp, m.fp, m.fn_), (0, 1, 0));
    }

    #[test]
    fn duplicate_over_one_truth() {
        // shift 20 * (1 - 0.7) / 1.7 ≈ 3.53 px gives IoU 0.7 for 20-px squares
        let shift = 20.0 * 0.3 / 1.7;
        let gts = vec![gt(0.0, 0)];
        let preds = vec![pred(shift, 0, 0.8), pred(-shift, 0, 0.9)];
        let m = match_detections(&preds, &gts, 0.5);
        assert_eq!((m.tp, m.fp, m.fn_), (1, 1, 0));
        assert_eq!(m.is_tp, vec![false, true]);
        assert!((m.pairs[0].2 - 0.7).abs() < 1e-4);
    }

    #[test]
    fn class_must_agree() {
        let m = match_detections(&[pred(0.0, 1, 0.9)], &[gt(0.0, 0)], 0.5);
        assert_eq!((m.tp, m.fp, m.fn_), (0, 1, 1));
    }

    #[test]
    fn ratios() {
        assert_eq!(precision(8, 2), 0.8);
        assert_eq!(recall(8, 1), 8.0 / 9.0);
        let expected = 2.0 * 0.8 * (8.0 / 9.0) / (0.8 + 8.0 / 9.0);
        assert_eq!(f1(0.8, 8.0 / 9.0), expected);
        assert_eq!(precision(0, 0), 0.0);
        assert_eq!(recall(0, 0), 0.0);
        assert_eq!(f1(0.0, 0.0), 0.0);
        assert_eq!(f1(1.0, 1.0), 1.0);
    }

    #[test]
    fn ap_cases() {
        assert_eq!(average_precision(&[(0.9, true)], 1), 1.0);
        assert_eq!(average_precision(&[(0.9, true), (0.8, false)], 1), 1.0);
        assert_eq!(average_precision(&[], 1), 0.0);
        // miss then hit: precision 1/2 at recall 1
        assert_eq!(average_precision(&[(0.9, false), (0.8, true)], 1), 0.5);
        // envelope lifts the dip: hits at ranks 1 and 3 of 2 gts
        let ap = average_precision(&[(0.9, true), (0.8, false), (0.7, true)], 2);
        assert!((ap - (0.5 * 1.0 + 0.5 * 2.0 / 3.0)).abs() < 1e-12);
    }

    #[test]
    fn annotation_parsing() {
        let boxes = parse_annotations("0 0.5 0.5 0.2 0.1\n\n3 0.1 0.9 0.05 0.05\n").unwrap();
        assert_eq!(boxes.len(), 2);
        assert_eq!(boxes[1].class_index, 3);
        assert!(parse_annotations("0 0.5 0.5 0.2").is_err());
        assert!(parse_annotations("0 1.5 0.5 0.2 0.2").is_err());
        assert!(parse_annotations("x 0.5 0.5 0.2 0.2").is_err());
        let px = boxes[0].to_pixels(200, 100);
        assert_eq!(px.bbox, BBox::new(100.0, 50.0, 40.0, 10.0));
        let back = GroundTruthBox::from_pixels(0, &px.bbox, 200, 100);
        assert_eq!(back, boxes[0]);
    }
}
