//! Running the detector over an image at several confidence thresholds.
//! Lowering the threshold can only add candidates.
//!
//! With seeded random weights the boxes are meaningless, but the pipeline
//! (letterbox, forward, decode, suppression, mapping back) is the real one.
//!
//! ```text
//! cargo run --example detect_synthetic [image.png]
//! ```

use image::{Rgb, RgbImage};
use obi_core::detect::Detector;
use obi_core::labels::Labels;
use obi_core::network::{build_yolov3_tiny, LoadedNetwork};
use obi_core::render::render_detections;

fn rubbing(width: u32, height: u32) -> RgbImage {
    RgbImage::from_fn(width, height, |x, y| {
        let stroke = (x / 24 + y / 31) % 3 == 0 && (x % 24 < 5 || y % 31 < 4);
        if stroke {
            Rgb([235, 230, 220])
        } else {
            Rgb([40 + (x % 7) as u8, 38, 36 + (y % 5) as u8])
        }
    })
}

pub fn run_example() -> anyhow::Result<()> {
    let image = match std::env::args().nth(1) {
        Some(p) => image::open(p)?.to_rgb8(),
        None => rubbing(480, 360),
    };
    let net = LoadedNetwork::random(build_yolov3_tiny(27)?, 7).with_labels(Labels::generated(27))?;
    let detector = Detector::new(net)?;
    let features = detector.feature_maps(&image)?;

    for confidence in [0.7, 0.5, 0.3, 0.1] {
        let candidates = detector.candidates(&features, confidence)?.len();
        let kept = detector.decode(&features, confidence, 0.5)?;
        println!("confidence {confidence:.1}: {candidates:5} candidates, {:4} after suppression", kept.len());
    }

    let detections = detector.decode(&features, 0.5, 0.5)?;
    for d in detections.iter().take(5) {
        let (x0, y0, x1, y1) = d.bbox.corners();
        println!("  {} {:.3} [{x0:.0},{y0:.0} .. {x1:.0},{y1:.0}]", d.class_name, d.confidence);
    }
    let out = std::env::temp_dir().join("obi_detect_synthetic.png");
    render_detections(&image, &detections).save(&out)?;
    println!("rendered {}", out.display());
    Ok(())
}

#[allow(dead_code)]
fn main() -> anyhow::Result<()> {
    run_example()
}
