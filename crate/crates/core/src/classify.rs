//! Second-stage recognition of user-cropped regions with MobileNet.

use image::imageops::{self, FilterType};
use image::RgbImage;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detect::letterbox;
use crate::labels::Labels;
use crate::network::{Architecture, LoadedNetwork, NetworkError};
use crate::tensor::{Shape, Tensor};

/// Smallest accepted crop side, in pixels.
pub const MIN_CROP: u32 = 4;
pub const DEFAULT_TOP_K: usize = 5;

#[derive(Debug, Error)]
pub enum ClassifyError {
    #[error("crop rectangle must be at least {MIN_CROP}x{MIN_CROP} pixels, got {w}x{h}")]
    TooSmall { w: i64, h: i64 },
    #[error("crop rectangle ({x}, {y}, {w}, {h}) does not intersect the {width}x{height} image")]
    OutsideImage {
        x: i64,
        y: i64,
        w: i64,
        h: i64,
        width: u32,
        height: u32,
    },
    #[error("top_k must be at least 1")]
    InvalidTopK,
    #[error("network `{0}` is not a classifier")]
    NotAClassifier(Architecture),
    #[error(transparent)]
    Network(#[from] NetworkError),
}

/// Pixel rectangle in original-image space; `x, y` is the top-left corner.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropRect {
    pub x: i64,
    pub y: i64,
    pub w: i64,
    pub h: i64,
}

impl CropRect {
    pub fn new(x: i64, y: i64, w: i64, h: i64) -> Self {
        Self { x, y, w, h }
    }

    pub fn full(image: &RgbImage) -> Self {
        Self::new(0, 0, image.width() as i64, image.height() as i64)
    }

    /// The part of the rectangle inside a `width × height` image as
    /// `(x, y, w, h)`, after checking the size floor.
    pub fn clip(&self, width: u32, height: u32) -> Result<(u32, u32, u32, u32), ClassifyError> {
        if self.w < MIN_CROP as i64 || self.h < MIN_CROP as i64 {
            return Err(ClassifyError::TooSmall {
                w: self.w,
                h: self.h,
            });
        }
        let x0 = self.x.max(0);
        let y0 = self.y.max(0);
        let x1 = self.x.saturating_add(self.w).min(width as i64);
        let y1 = self.y.saturating_add(self.h).min(height as i64);
        if x1 <= x0 || y1 <= y0 {
            return Err(ClassifyError::OutsideImage {
                x: self.x,
                y: self.y,
                w: self.w,
                h: self.h,
                width,
                height,
            });
        }
        Ok((x0 as u32, y0 as u32, (x1 - x0) as u32, (y1 - y0) as u32))
    }
}

/// How a crop is fitted to the square classifier input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CropResize {
    /// Bilinear resize to the full input, aspect ratio not preserved.
    #[default]
    Stretch,
    /// Aspect-preserving resize with gray padding.
    Letterbox,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassPrediction {
    pub class_index: usize,
    pub class_name: String,
    pub probability: f32,
}

/// Crops `rect`, resizes to `size × size`, and maps pixels to `[-1, 1]`.
pub fn preprocess_crop(
    image: &RgbImage,
    rect: CropRect,
    size: u32,
    mode: CropResize,
) -> Result<Tensor, ClassifyError> {
    let (x, y, w, h) = rect.clip(image.width(), image.height())?;
    let crop = imageops::crop_imm(image, x, y, w, h).to_image();
    let unit = match mode {
        CropResize::Stretch => {
            let resized = if (w, h) == (size, size) {
                crop
            } else {
                imageops::resize(&crop, size, size, FilterType::Triangle)
            };
            let s = size as usize;
            Tensor::from_fn(Shape::new(3, s, s), |c, y, x| {
                f32::from(resized.get_pixel(x as u32, y as u32).0[c]) / 255.0
            })
        }
        CropResize::Letterbox => {
            letterbox(&crop, size)
                .expect("clipped crop is non-empty")
                .0
        }
    };
    let data = unit.into_data().into_iter().map(|v| v * 2.0 - 1.0).collect();
    Ok(Tensor::new(Shape::new(3, size as usize, size as usize), data)
        .expect("shape preserved"))
}

/// A MobileNet classifier bound to its labels.
#[derive(Debug, Clone)]
pub struct Classifier {
    net: LoadedNetwork,
    resize: CropResize,
}

impl Classifier {
    pub fn new(net: LoadedNetwork) -> Result<Self, ClassifyError> {
        if net.spec().arch != Architecture::MobileNetV1 {
            return Err(ClassifyError::NotAClassifier(net.spec().arch));
        }
        Ok(Self {
            net,
            resize: CropResize::default(),
        })
    }

    pub fn with_resize(mut self, resize: CropResize) -> Self {
        self.resize = resize;
        self
    }

    pub fn network(&self) -> &LoadedNetwork {
        &self.net
    }

    pub fn labels(&self) -> &Labels {
        self.net.labels()
    }

    pub fn num_classes(&self) -> usize {
        self.net.spec().num_classes
    }

    pub fn input_extent(&self) -> u32 {
        self.net.spec().input.width as u32
    }

    /// Full probability vector for one crop.
    pub fn probabilities(&self, image: &RgbImage, rect: CropRect) -> Result<Vec<f32>, ClassifyError> {
        let input = preprocess_crop(image, rect, self.input_extent(), self.resize)?;
        let out = self.net.forward(&input)?;
        Ok(out.into_iter().next().expect("classifier has one output").into_data())
    }

    /// The `top_k` most probable classes, descending, ties by class index.
    /// `top_k` is clamped to the class count.
    pub fn predict(
        &self,
        image: &RgbImage,
        rect: CropRect,
        top_k: usize,
    ) -> Result<Vec<ClassPrediction>, ClassifyError> {
        if top_k == 0 {
            return Err(ClassifyError::InvalidTopK);
        }
        let probs = self.probabilities(image, rect)?;
        Ok(rank(&probs, top_k, self.labels()))
    }
}

/// Ranks a probability vector.
pub fn rank(probs: &[f32], top_k: usize, labels: &Labels) -> Vec<ClassPrediction> {
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| {
        probs[b]
            .partial_cmp(&probs[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    order
        .into_iter()
        .take(top_k)
        .map(|i| ClassPrediction {
            class_index: i,
            class_name: labels.name(i),
            probability: probs[i],
        })
        .collect()
}

pub fn predict_crop(
    classifier: &Classifier,
    image: &RgbImage,
    rect: CropRect,
    top_k: usize,
) -> Result<Vec<ClassPrediction>, ClassifyError> {
    classifier.predict(image, rect, top_k)
}
