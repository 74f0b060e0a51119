//! Dataset evaluation. A detector that replays the annotations scores a
//! perfect report, and one that is off by a few pixels shows how matching
//! at IoU 0.5 reacts.
//!
//! ```text
//! cargo run --example evaluate_oracle
//! ```

use std::path::Path;

use image::{Rgb, RgbImage};
use obi_core::detect::{BBox, Detection};
use obi_core::eval::{evaluate_dataset, parse_annotations, DetectionSource, EvalConfig, GroundTruthBox};
use obi_core::labels::Labels;

struct Replay {
    offset: f32,
}

impl DetectionSource for Replay {
    fn detections(&self, image: &RgbImage, path: &Path) -> Result<Vec<Detection>, String> {
        let text = std::fs::read_to_string(path.with_extension("txt")).map_err(|e| e.to_string())?;
        let boxes = parse_annotations(&text).map_err(|e| e.to_string())?;
        Ok(boxes
            .iter()
            .map(|g| {
                let b = g.to_pixels(image.width(), image.height()).bbox;
                Detection {
                    bbox: BBox::new(b.x + self.offset, b.y, b.w, b.h),
                    class_index: g.class_index,
                    class_name: String::new(),
                    confidence: 0.9,
                    origin: None,
                }
            })
            .collect())
    }
}

pub fn run_example() -> anyhow::Result<()> {
    let dir = tempfile::tempdir()?;
    for i in 0..4u32 {
        RgbImage::from_pixel(320, 240, Rgb([20 * i as u8, 60, 90])).save(dir.path().join(format!("page{i}.png")))?;
        let boxes = [
            GroundTruthBox { class_index: (i % 3) as usize, cx: 0.3, cy: 0.4, w: 0.1, h: 0.2 },
            GroundTruthBox { class_index: 2, cx: 0.7, cy: 0.6, w: 0.15, h: 0.2 },
        ];
        let text: Vec<String> = boxes.iter().map(|b| b.to_line()).collect();
        std::fs::write(dir.path().join(format!("page{i}.txt")), text.join("\n"))?;
    }
    let labels = Labels::parse("sun\nmoon\nwater\n");

    let perfect = evaluate_dataset(&Replay { offset: 0.0 }, dir.path(), &labels, EvalConfig::default(), None)?;
    print!("{}", perfect.to_table());

    let shifted = evaluate_dataset(&Replay { offset: 12.0 }, dir.path(), &labels, EvalConfig::default(), None)?;
    println!();
    print!("{}", shifted.to_key_values());
    Ok(())
}

#[allow(dead_code)]
fn main() -> anyhow::Result<()> {
    run_example()
}
