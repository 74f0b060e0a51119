//! Writing and reading Darknet weight files.
//!
//! ```text
//! cargo run --example weights_roundtrip
//! ```

use obi_core::network::{build_yolov3_tiny, load_darknet_weights, save_weights, LoadedNetwork};

pub fn run_example() -> anyhow::Result<()> {
    let spec = build_yolov3_tiny(27)?;
    let net = LoadedNetwork::random(spec.clone(), 42);
    let bytes = save_weights(&net);
    println!("{} parameters -> {} bytes", net.param_count(), bytes.len());

    let dir = tempfile::tempdir()?;
    let path = dir.path().join("yolov3-tiny-27.weights");
    std::fs::write(&path, &bytes)?;
    let loaded = load_darknet_weights(spec.clone(), &std::fs::read(&path)?)?;
    assert_eq!(loaded.params(), net.params());
    println!("sha256 {}", loaded.digest());

    match load_darknet_weights(spec, &bytes[..bytes.len() - 8]) {
        Err(e) => println!("truncated copy rejected: {e}"),
        Ok(_) => anyhow::bail!("truncated file loaded"),
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> anyhow::Result<()> {
    run_example()
}
