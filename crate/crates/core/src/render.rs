//! Draws detections onto a copy of the input image.
//!
//! Labels are written as `class_index:confidence` in a built-in 3×5 pixel
//! font so rendering does not need a font file.

use image::{Rgb, RgbImage};

use crate::detect::Detection;

const GLYPH_W: u32 = 3;
const GLYPH_H: u32 = 5;

fn glyph(c: char) -> [u8; 5] {
    // rows top to bottom, 3 bits each, MSB = left
    match c {
        '0' => [0b111, 0b101, 0b101, 0b101, 0b111],
        '1' => [0b010, 0b110, 0b010, 0b010, 0b111],
        '2' => [0b111, 0b001, 0b111, 0b100, 0b111],
        '3' => [0b111, 0b001, 0b111, 0b001, 0b111],
        '4' => [0b101, 0b101, 0b111, 0b001, 0b001],
        '5' => [0b111, 0b100, 0b111, 0b001, 0b111],
        '6' => [0b111, 0b100, 0b111, 0b101, 0b111],
        '7' => [0b111, 0b001, 0b010, 0b010, 0b010],
        '8' => [0b111, 0b101, 0b111, 0b101, 0b111],
        '9' => [0b111, 0b101, 0b111, 0b001, 0b111],
        '.' => [0b000, 0b000, 0b000, 0b000, 0b010],
        ':' => [0b000, 0b010, 0b000, 0b010, 0b000],
        _ => [0; 5],
    }
}

/// Distinct, stable colour per class.
pub fn class_color(class_index: usize) -> Rgb<u8> {
    const PALETTE: [[u8; 3]; 8] = [
        [230, 25, 75],
        [60, 180, 75],
        [0, 130, 200],
        [245, 130, 48],
        [145, 30, 180],
        [70, 240, 240],
        [240, 50, 230],
        [210, 245, 60],
    ];
    Rgb(PALETTE[class_index % PALETTE.len()])
}

fn put(img: &mut RgbImage, x: i64, y: i64, color: Rgb<u8>) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, color);
    }
}

fn draw_rect(img: &mut RgbImage, x0: i64, y0: i64, x1: i64, y1: i64, thickness: i64, color: Rgb<u8>) {
    for t in 0..thickness {
        for x in x0..=x1 {
            put(img, x, y0 + t, color);
            put(img, x, y1 - t, color);
        }
        for y in y0..=y1 {
            put(img, x0 + t, y, color);
            put(img, x1 - t, y, color);
        }
    }
}

fn draw_text(img: &mut RgbImage, x: i64, y: i64, text: &str, scale: i64, fg: Rgb<u8>, bg: Rgb<u8>) {
    let advance = (GLYPH_W as i64 + 1) * scale;
    let w = advance * text.chars().count() as i64 + scale;
    let h = (GLYPH_H as i64 + 2) * scale;
    for yy in y..y + h {
        for xx in x..x + w {
            put(img, xx, yy, bg);
        }
    }
    for (i, c) in text.chars().enumerate() {
        let rows = glyph(c);
        let gx = x + scale + i as i64 * advance;
        for (ry, bits) in rows.iter().enumerate() {
            for rx in 0..GLYPH_W as i64 {
                if bits & (1 << (GLYPH_W as i64 - 1 - rx)) != 0 {
                    for sy in 0..scale {
                        for sx in 0..scale {
                            put(img, gx + rx * scale + sx, y + scale + ry as i64 * scale + sy, fg);
                        }
                    }
                }
            }
        }
    }
}

/// Copy of `image` with a labelled rectangle per detection.
pub fn render_detections(image: &RgbImage, detections: &[Detection]) -> RgbImage {
    let mut out = image.clone();
    let scale = (image.width().min(image.height()) / 200).clamp(1, 4) as i64;
    for d in detections {
        let (x0, y0, x1, y1) = d.bbox.corners();
        let color = class_color(d.class_index);
        let (x0, y0) = (x0.round() as i64, y0.round() as i64);
        let (x1, y1) = (x1.round() as i64 - 1, y1.round() as i64 - 1);
        draw_rect(&mut out, x0, y0, x1, y1, scale, color);
        let label = format!("{}:{:.2}", d.class_index, d.confidence);
        let label_h = (GLYPH_H as i64 + 2) * scale;
        let ly = if y0 >= label_h { y0 - label_h } else { y0 };
        draw_text(&mut out, x0, ly, &label, scale, Rgb([255, 255, 255]), color);
    }
    out
}
