//! Layer-by-layer shapes and costs for both networks, the same table the
//! `obi inspect` subcommand prints.
//!
//! ```text
//! cargo run --example inspect_networks
//! ```

use obi_core::cli::inspect_table;
use obi_core::network::{build_mobilenet_v1, build_yolov3_tiny};

pub fn run_example() -> anyhow::Result<()> {
    let detector = build_yolov3_tiny(80)?;
    print!("{}", inspect_table(&detector));
    println!();
    let classifier = build_mobilenet_v1(29, 1.0)?;
    print!("{}", inspect_table(&classifier));
    println!(
        "\nclassifier needs {:.1}% of the detector's FLOPs",
        100.0 * classifier.flop_count() as f64 / detector.flop_count() as f64
    );
    Ok(())
}

#[allow(dead_code)]
fn main() -> anyhow::Result<()> {
    run_example()
}
