//! The HTTP service with seeded random models.
//!
//! Without arguments the example drives the router in-process through one
//! upload, recognize and predict-crop cycle. With `--listen` it then serves
//! on port 8080 until Ctrl-C.
//!
//! ```text
//! cargo run --example serve -- --listen
//! curl -s --data-binary @page.png localhost:8080/api/images
//! ```

use std::net::SocketAddr;

use axum::body::Body;
use axum::http::Request;
use http_body_util::BodyExt;
use obi_core::classify::Classifier;
use obi_core::detect::Detector;
use obi_core::labels::Labels;
use obi_core::network::{build_mobilenet_v1, build_yolov3_tiny, LoadedNetwork};
use obi_core::service::{router, serve, AppState, Models, ServiceConfig};
use serde_json::Value;
use tower::ServiceExt;

fn models() -> anyhow::Result<Models> {
    let labels = Labels::generated(6);
    let detector = Detector::new(LoadedNetwork::random(build_yolov3_tiny(6)?, 1).with_labels(labels.clone())?)?;
    let classifier = Classifier::new(LoadedNetwork::random(build_mobilenet_v1(6, 0.25)?, 2).with_labels(labels)?)?;
    Ok(Models { detector: Some(detector), classifier: Some(classifier) })
}

async fn send(app: &axum::Router, req: Request<Body>) -> anyhow::Result<Value> {
    let resp = app.clone().oneshot(req).await?;
    let status = resp.status();
    let body: Value = serde_json::from_slice(&resp.into_body().collect().await?.to_bytes())?;
    println!("{status} {body}");
    Ok(body)
}

async fn demo(app: axum::Router) -> anyhow::Result<()> {
    let image = image::RgbImage::from_fn(200, 160, |x, y| image::Rgb([(x ^ y) as u8, 90, 40]));
    let mut png = std::io::Cursor::new(Vec::new());
    image.write_to(&mut png, image::ImageFormat::Png)?;
    let up = send(&app, Request::post("/api/images").body(Body::from(png.into_inner()))?).await?;
    let id = up["image_id"].as_str().unwrap_or_default().to_string();

    let rec = send(&app, Request::post(format!("/api/images/{id}/recognize?confidence=0.6")).body(Body::empty())?).await?;
    println!("{} detections", rec["detections"].as_array().map_or(0, Vec::len));
    let crop = r#"{"x": 40, "y": 30, "w": 60, "h": 80, "top_k": 3}"#;
    send(
        &app,
        Request::post(format!("/api/images/{id}/predict-crop"))
            .header("content-type", "application/json")
            .body(Body::from(crop))?,
    )
    .await?;
    send(&app, Request::get("/api/health").body(Body::empty())?).await?;
    Ok(())
}

pub fn run_example() -> anyhow::Result<()> {
    let state = AppState::new(models()?, ServiceConfig::default());
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(demo(router(state.clone())))?;
    if std::env::args().any(|a| a == "--listen") {
        rt.block_on(serve(SocketAddr::from(([127, 0, 0, 1], 8080)), state))?;
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> anyhow::Result<()> {
    run_example()
}
