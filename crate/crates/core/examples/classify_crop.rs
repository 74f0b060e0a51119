//! Second-stage classification of a user-drawn crop.
//!
//! ```text
//! cargo run --example classify_crop
//! ```

use image::{Rgb, RgbImage};
use obi_core::classify::{Classifier, CropRect, CropResize};
use obi_core::labels::Labels;
use obi_core::network::{build_mobilenet_v1, LoadedNetwork};

pub fn run_example() -> anyhow::Result<()> {
    let image = RgbImage::from_fn(400, 300, |x, y| {
        if (x as i32 - 200).abs() < 30 && (y as i32 - 150).abs() < 50 {
            Rgb([240, 240, 240])
        } else {
            Rgb([30, 30, 30])
        }
    });
    let names: Vec<String> = (0..29).map(|i| format!("glyph-{i:02}")).collect();
    let net = LoadedNetwork::random(build_mobilenet_v1(29, 0.5)?, 3).with_labels(Labels::new(names))?;
    let classifier = Classifier::new(net)?;

    let rect = CropRect::new(160, 90, 80, 120);
    for p in classifier.predict(&image, rect, 5)? {
        println!("{:<10} {:.4}", p.class_name, p.probability);
    }
    let top1 = classifier.predict(&image, rect, 1)?;
    let top5 = classifier.predict(&image, rect, 5)?;
    assert_eq!(top1[0], top5[0]);

    let padded = classifier.with_resize(CropResize::Letterbox);
    println!("letterboxed crop, best: {}", padded.predict(&image, rect, 1)?[0].class_name);

    match padded.predict(&image, CropRect::new(500, 500, 20, 20), 1) {
        Err(e) => println!("outside crop rejected: {e}"),
        Ok(_) => anyhow::bail!("crop outside the image was accepted"),
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> anyhow::Result<()> {
    run_example()
}
