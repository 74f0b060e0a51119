//! YOLO output decoding, IoU, non-maximum suppression and the
//! letterbox → forward → decode → NMS → unletterbox pipeline.

mod bbox;
mod letterbox;

use std::cmp::Ordering;

use image::RgbImage;
use serde::Serialize;
use thiserror::Error;

use crate::labels::Labels;
use crate::network::{Architecture, LoadedNetwork, NetworkError};
use crate::tensor::Tensor;

pub use bbox::{iou, BBox};
pub use letterbox::{letterbox, unletterbox, LetterboxTransform, LETTERBOX_FILL};

/// Default score threshold for recognition.
pub const DEFAULT_CONFIDENCE: f32 = 0.1;
/// Default IoU threshold for suppression.
pub const DEFAULT_NMS: f32 = 0.5;

#[derive(Debug, Error)]
pub enum DetectError {
    #[error("image has zero width or height")]
    EmptyImage,
    #[error("feature map has {actual} channels, expected {expected}")]
    ChannelMismatch { expected: usize, actual: usize },
    #[error("feature map grid must be square, got {height}x{width}")]
    NonSquareGrid { height: usize, width: usize },
    #[error("{name} threshold must be in [0, 1], got {value}")]
    InvalidThreshold { name: &'static str, value: f32 },
    #[error("network `{0}` is not a detector")]
    NotADetector(Architecture),
    #[error(transparent)]
    Network(#[from] NetworkError),
}

/// Which head, cell and anchor produced a detection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct GridOrigin {
    pub scale: usize,
    pub row: usize,
    pub col: usize,
    pub anchor: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub bbox: BBox,
    pub class_index: usize,
    pub class_name: String,
    /// Objectness times class probability, in `[0, 1]`.
    pub confidence: f32,
    pub origin: Option<GridOrigin>,
}

/// Wire form of a detection: top-left-origin pixel rectangle.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DetectionRecord {
    pub x: f32,
    pub y: f32,
    pub w: f32,
    pub h: f32,
    pub class_index: usize,
    pub class_name: String,
    pub confidence: f32,
}

impl From<&Detection> for DetectionRecord {
    fn from(d: &Detection) -> Self {
        let (x0, y0, _, _) = d.bbox.corners();
        Self {
            x: x0,
            y: y0,
            w: d.bbox.w,
            h: d.bbox.h,
            class_index: d.class_index,
            class_name: d.class_name.clone(),
            confidence: d.confidence,
        }
    }
}

/// One detection scale: its anchors (already masked) and class count.
#[derive(Debug, Clone, PartialEq)]
pub struct YoloHead {
    pub anchors: Vec<(f32, f32)>,
    pub num_classes: usize,
    pub scale: usize,
}

impl YoloHead {
    pub fn channels(&self) -> usize {
        self.anchors.len() * (self.num_classes + 5)
    }
}

#[inline]
fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

fn check_threshold(name: &'static str, value: f32) -> Result<(), DetectError> {
    if (0.0..=1.0).contains(&value) {
        Ok(())
    } else {
        Err(DetectError::InvalidThreshold { name, value })
    }
}

/// Decodes one raw YOLO feature map into network-input-space detections.
///
/// Channel block `b · (classes + 5)` holds `tx, ty, tw, th, objectness`
/// followed by class logits for anchor `b`. Each (cell, anchor) yields at
/// most one detection, for its best class, scored `σ(obj) · σ(class)`.
pub fn decode_yolo(
    map: &Tensor,
    head: &YoloHead,
    input_extent: usize,
    conf_threshold: f32,
    labels: &Labels,
) -> Result<Vec<Detection>, DetectError> {
    check_threshold("confidence", conf_threshold)?;
    if map.channels() != head.channels() {
        return Err(DetectError::ChannelMismatch {
            expected: head.channels(),
            actual: map.channels(),
        });
    }
    if map.height() != map.width() {
        return Err(DetectError::NonSquareGrid {
            height: map.height(),
            width: map.width(),
        });
    }
    let grid = map.height();
    let stride = input_extent as f32 / grid as f32;
    let per_anchor = head.num_classes + 5;
    let mut out = Vec::new();
    for (b, &(aw, ah)) in head.anchors.iter().enumerate() {
        let base = b * per_anchor;
        for row in 0..grid {
            for col in 0..grid {
                let at = |k: usize| map.get(base + k, row, col);
                let objectness = sigmoid(at(4));
                let mut best = 0;
                let mut best_logit = at(5);
                for c in 1..head.num_classes {
                    let v = at(5 + c);
                    if v > best_logit {
                        best = c;
                        best_logit = v;
                    }
                }
                let score = (objectness * sigmoid(best_logit)).clamp(0.0, 1.0);
                if score < conf_threshold {
                    continue;
                }
                out.push(Detection {
                    bbox: BBox {
                        x: (sigmoid(at(0)) + col as f32) * stride,
                        y: (sigmoid(at(1)) + row as f32) * stride,
                        w: aw * at(2).exp(),
                        h: ah * at(3).exp(),
                    },
                    class_index: best,
                    class_name: labels.name(best),
                    confidence: score,
                    origin: Some(GridOrigin {
                        scale: head.scale,
                        row,
                        col,
                        anchor: b,
                    }),
                });
            }
        }
    }
    Ok(out)
}

/// Orders by confidence descending, then class index ascending. Stable, so
/// input order breaks remaining ties.
fn priority(a: &Detection, b: &Detection) -> Ordering {
    b.confidence
        .partial_cmp(&a.confidence)
        .unwrap_or(Ordering::Equal)
        .then(a.class_index.cmp(&b.class_index))
}

/// Greedy per-class non-maximum suppression.
///
/// Output is in priority order. A box is dropped when it overlaps an already
/// kept box of the same class with IoU strictly above `iou_threshold`.
pub fn nms(detections: Vec<Detection>, iou_threshold: f32) -> Vec<Detection> {
    let mut sorted = detections;
    sorted.sort_by(priority);
    let mut kept: Vec<Detection> = Vec::with_capacity(sorted.len());
    let mut kept_by_class: std::collections::HashMap<usize, Vec<BBox>> = Default::default();
    for d in sorted {
        let same = kept_by_class.entry(d.class_index).or_default();
        if same.iter().all(|k| iou(k, &d.bbox) <= iou_threshold) {
            same.push(d.bbox);
            kept.push(d);
        }
    }
    kept
}

/// Cached network output for one image: raw head maps plus the letterbox
/// geometry needed to map boxes back.
#[derive(Debug, Clone)]
pub struct FeatureMaps {
    pub maps: Vec<Tensor>,
    pub transform: LetterboxTransform,
}

/// A detection network with its decode heads.
#[derive(Debug, Clone)]
pub struct Detector {
    net: LoadedNetwork,
    heads: Vec<YoloHead>,
}

impl Detector {
    pub fn new(net: LoadedNetwork) -> Result<Self, DetectError> {
        let heads: Vec<YoloHead> = net
            .spec()
            .yolo_layers()
            .into_iter()
            .enumerate()
            .map(|(scale, y)| YoloHead {
                anchors: y.masked_anchors(),
                num_classes: y.classes,
                scale,
            })
            .collect();
        if heads.is_empty() {
            return Err(DetectError::NotADetector(net.spec().arch));
        }
        Ok(Self { net, heads })
    }

    pub fn network(&self) -> &LoadedNetwork {
        &self.net
    }

    pub fn heads(&self) -> &[YoloHead] {
        &self.heads
    }

    pub fn labels(&self) -> &Labels {
        self.net.labels()
    }

    pub fn input_extent(&self) -> usize {
        self.net.spec().input.width
    }

    /// Letterboxes `image` and runs the network once.
    pub fn feature_maps(&self, image: &RgbImage) -> Result<FeatureMaps, DetectError> {
        let (tensor, transform) = letterbox(image, self.input_extent() as u32)?;
        let maps = self.net.forward(&tensor)?;
        Ok(FeatureMaps { maps, transform })
    }

    /// Every decoded box at or above `conf_threshold`, before suppression,
    /// in network-input coordinates.
    pub fn candidates(
        &self,
        features: &FeatureMaps,
        conf_threshold: f32,
    ) -> Result<Vec<Detection>, DetectError> {
        let mut all = Vec::new();
        for (map, head) in features.maps.iter().zip(&self.heads) {
            all.extend(decode_yolo(
                map,
                head,
                self.input_extent(),
                conf_threshold,
                self.labels(),
            )?);
        }
        Ok(all)
    }

    /// Decode, suppress and map back to image pixels. Sorted by confidence descending.
    pub fn decode(
        &self,
        features: &FeatureMaps,
        conf_threshold: f32,
        iou_threshold: f32,
    ) -> Result<Vec<Detection>, DetectError> {
        check_threshold("nms", iou_threshold)?;
        let candidates = self.candidates(features, conf_threshold)?;
        Ok(nms(candidates, iou_threshold)
            .iter()
            .filter_map(|d| unletterbox(d, &features.transform))
            .collect())
    }

    pub fn detect(
        &self,
        image: &RgbImage,
        conf_threshold: f32,
        iou_threshold: f32,
    ) -> Result<Vec<Detection>, DetectError> {
        check_threshold("confidence", conf_threshold)?;
        check_threshold("nms", iou_threshold)?;
        let features = self.feature_maps(image)?;
        self.decode(&features, conf_threshold, iou_threshold)
    }
}

pub fn detect(
    image: &RgbImage,
    detector: &Detector,
    conf_threshold: f32,
    iou_threshold: f32,
) -> Result<Vec<Detection>, DetectError> {
    detector.detect(image, conf_threshold, iou_threshold)
}
