use image::imageops::{self, FilterType};
use image::RgbImage;

use super::{BBox, DetectError, Detection};
use crate::tensor::{Shape, Tensor};

/// Gray level written into the padding bands.
pub const LETTERBOX_FILL: f32 = 0.5;

/// Mapping between original-image pixels and the square network input.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LetterboxTransform {
    pub scale: f32,
    pub pad_x: f32,
    pub pad_y: f32,
    pub orig_width: u32,
    pub orig_height: u32,
}

impl LetterboxTransform {
    pub fn identity(width: u32, height: u32) -> Self {
        Self {
            scale: 1.0,
            pad_x: 0.0,
            pad_y: 0.0,
            orig_width: width,
            orig_height: height,
        }
    }

    /// Geometry for fitting a `width × height` image into `target × target`.
    /// Resized extents are rounded to whole pixels and padding is split evenly,
    /// with any odd pixel going to the right/bottom.
    pub fn fit(width: u32, height: u32, target: u32) -> Result<Self, DetectError> {
        if width == 0 || height == 0 {
            return Err(DetectError::EmptyImage);
        }
        let (new_w, new_h) = Self::resized_extent(width, height, target);
        let scale = (target as f32 / width as f32).min(target as f32 / height as f32);
        Ok(Self {
            scale,
            pad_x: ((target - new_w) / 2) as f32,
            pad_y: ((target - new_h) / 2) as f32,
            orig_width: width,
            orig_height: height,
        })
    }

    fn resized_extent(width: u32, height: u32, target: u32) -> (u32, u32) {
        let scale = (target as f64 / width as f64).min(target as f64 / height as f64);
        let w = ((width as f64 * scale).round() as u32).clamp(1, target);
        let h = ((height as f64 * scale).round() as u32).clamp(1, target);
        (w, h)
    }

    /// Original-image box to network-input coordinates.
    pub fn to_network(&self, b: &BBox) -> BBox {
        BBox {
            x: b.x * self.scale + self.pad_x,
            y: b.y * self.scale + self.pad_y,
            w: b.w * self.scale,
            h: b.h * self.scale,
        }
    }

    /// Network-input box to original-image coordinates, without clamping.
    pub fn to_image(&self, b: &BBox) -> BBox {
        BBox {
            x: (b.x - self.pad_x) / self.scale,
            y: (b.y - self.pad_y) / self.scale,
            w: b.w / self.scale,
            h: b.h / self.scale,
        }
    }
}

/// Aspect-preserving resize into a `target × target` tensor with values in
/// `[0, 1]`, centered, padded with 0.5 on every channel.
pub fn letterbox(image: &RgbImage, target: u32) -> Result<(Tensor, LetterboxTransform), DetectError> {
    let (w, h) = image.dimensions();
    let t = LetterboxTransform::fit(w, h, target)?;
    let (new_w, new_h) = LetterboxTransform::resized_extent(w, h, target);
    let resized;
    let src = if (new_w, new_h) == (w, h) {
        image
    } else {
        resized = imageops::resize(image, new_w, new_h, FilterType::Triangle);
        &resized
    };
    let (px, py) = (t.pad_x as u32, t.pad_y as u32);
    let size = target as usize;
    let tensor = Tensor::from_fn(Shape::new(3, size, size), |c, y, x| {
        let (x, y) = (x as u32, y as u32);
        if x < px || y < py || x >= px + new_w || y >= py + new_h {
            LETTERBOX_FILL
        } else {
            f32::from(src.get_pixel(x - px, y - py).0[c]) / 255.0
        }
    });
    Ok((tensor, t))
}

/// Maps a network-space detection back onto the original image and clamps
/// it to the image bounds. Returns `None` if nothing of the box remains
/// inside the image.
pub fn unletterbox(d: &Detection, t: &LetterboxTransform) -> Option<Detection> {
    let (x0, y0, x1, y1) = t.to_image(&d.bbox).corners();
    let (w, h) = (t.orig_width as f32, t.orig_height as f32);
    let clamped = BBox::from_corners(x0.clamp(0.0, w), y0.clamp(0.0, h), x1.clamp(0.0, w), y1.clamp(0.0, h));
    if !clamped.is_valid() {
        return None;
    }
    Some(Detection {
        bbox: clamped,
        ..d.clone()
    })
}
