mod common;

use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use common::*;
use http_body_util::BodyExt;
use obi_core::classify::{Classifier, CropRect};
use obi_core::detect::{DetectionRecord, Detector};
use obi_core::labels::Labels;
use obi_core::network::{build_mobilenet_v1, build_yolov3_tiny, LoadedNetwork};
use obi_core::service::{router, AppState, Models, ServiceConfig};
use serde_json::{json, Value};
use tower::ServiceExt;

fn models() -> Models {
    let det = LoadedNetwork::random(build_yolov3_tiny(5).unwrap(), 21)
        .with_labels(Labels::generated(5))
        .unwrap();
    let cls = LoadedNetwork::random(build_mobilenet_v1(7, 0.5).unwrap(), 22)
        .with_labels(Labels::new((0..7).map(|i| format!("glyph{i}")).collect()))
        .unwrap();
    Models {
        detector: Some(Detector::new(det).unwrap()),
        classifier: Some(Classifier::new(cls).unwrap()),
    }
}

fn app_with(models: Models, config: ServiceConfig) -> (Router, Arc<AppState>) {
    let state = AppState::new(models, config);
    (router(state.clone()), state)
}

async fn call(app: &Router, req: Request<Body>) -> (StatusCode, Value) {
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let value = if bytes.is_empty() { Value::Null } else { serde_json::from_slice(&bytes).unwrap() };
    (status, value)
}

fn post(uri: &str, body: impl Into<Body>) -> Request<Body> {
    Request::post(uri).body(body.into()).unwrap()
}

fn post_json(uri: &str, v: Value) -> Request<Body> {
    Request::post(uri)
        .header("content-type", "application/json")
        .body(Body::from(v.to_string()))
        .unwrap()
}

async fn upload(app: &Router, image: &image::RgbImage) -> String {
    let (status, v) = call(app, post("/api/images", png_bytes(image))).await;
    assert_eq!(status, StatusCode::OK, "{v}");
    assert_eq!(v["width"], image.width());
    assert_eq!(v["height"], image.height());
    v["image_id"].as_str().unwrap().to_string()
}

/// The value as it reads back from a response body.
fn as_wire<T: serde::Serialize>(v: &T) -> Value {
    serde_json::from_str(&serde_json::to_string(v).unwrap()).unwrap()
}

fn error_code(v: &Value) -> &str {
    v["error"]["code"].as_str().unwrap()
}

#[tokio::test]
async fn round_trip_matches_schemas() {
    let (app, state) = app_with(models(), ServiceConfig::default());
    let image = synthetic_image(320, 240, 1);
    let id = upload(&app, &image).await;

    let (status, v) = call(&app, post(&format!("/api/images/{id}/recognize?confidence=0.1"), Body::empty())).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(v["model"], "yolov3-tiny");
    assert_eq!(v["confidence_used"].as_f64().unwrap() as f32, 0.1);
    for d in v["detections"].as_array().unwrap() {
        for key in ["x", "y", "w", "h", "confidence"] {
            assert!(d[key].is_number(), "{key}");
        }
        assert!(d["class_index"].as_u64().unwrap() < 5);
        assert!(d["class_name"].is_string());
        let c = d["confidence"].as_f64().unwrap();
        assert!((0.1 - 1e-6..=1.0).contains(&c));
        assert!(d["x"].as_f64().unwrap() >= 0.0 && d["x"].as_f64().unwrap() + d["w"].as_f64().unwrap() <= 320.0 + 1e-3);
    }
    assert!(state.session(&id).unwrap().has_cached_features());

    let (status, v) = call(&app, post_json(&format!("/api/images/{id}/predict-crop"), json!({"x": 0, "y": 0, "w": 320, "h": 240}))).await;
    assert_eq!(status, StatusCode::OK);
    let preds = v["predictions"].as_array().unwrap();
    assert_eq!(preds.len(), 5);
    let probs: Vec<f64> = preds.iter().map(|p| p["probability"].as_f64().unwrap()).collect();
    assert!(probs.windows(2).all(|w| w[0] >= w[1]));
    assert!(probs.iter().sum::<f64>() <= 1.0 + 1e-6);
    assert!(preds[0]["class_name"].as_str().unwrap().starts_with("glyph"));

    let (_, v) = call(&app, post_json(&format!("/api/images/{id}/predict-crop"), json!({"x": 10, "y": 10, "w": 50, "h": 60, "top_k": 100}))).await;
    assert_eq!(v["predictions"].as_array().unwrap().len(), 7);

    let (status, v) = call(&app, Request::get("/api/classes").body(Body::empty()).unwrap()).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(v["classes"].as_array().unwrap().len(), 5);
}

#[tokio::test]
async fn recognize_is_idempotent_and_monotone() {
    let (app, _) = app_with(models(), ServiceConfig::default());
    let id = upload(&app, &synthetic_image(200, 300, 2)).await;
    let uri = |c: f32| format!("/api/images/{id}/recognize?confidence={c}");
    let (_, a) = call(&app, post(&uri(0.3), Body::empty())).await;
    let (_, b) = call(&app, post(&uri(0.3), Body::empty())).await;
    assert_eq!(a, b);
    let mut last = usize::MAX;
    for c in [0.0, 0.1, 0.2, 0.3, 0.5, 0.8, 1.0] {
        let (_, v) = call(&app, post(&uri(c), Body::empty())).await;
        let n = v["candidate_count"].as_u64().unwrap() as usize;
        assert!(n <= last, "confidence {c}");
        last = n;
    }
    let (_, v) = call(&app, post(&format!("/api/images/{id}/recognize"), Body::empty())).await;
    assert_eq!(v["confidence_used"].as_f64().unwrap() as f32, 0.1);
    let (_, v) = call(&app, post(&uri(0.0), Body::empty())).await;
    assert_eq!(v["candidate_count"], 3 * (13 * 13 + 26 * 26));
}

#[tokio::test]
async fn error_paths() {
    let config = ServiceConfig { max_upload_bytes: 64 * 1024, ..ServiceConfig::default() };
    let (app, _) = app_with(models(), config);
    let id = upload(&app, &synthetic_image(64, 64, 3)).await;

    let (s, v) = call(&app, post("/api/images/nope/recognize", Body::empty())).await;
    assert_eq!((s, error_code(&v)), (StatusCode::NOT_FOUND, "not_found"));
    let (s, _) = call(&app, post_json("/api/images/nope/predict-crop", json!({"x":0,"y":0,"w":10,"h":10}))).await;
    assert_eq!(s, StatusCode::NOT_FOUND);

    let (s, v) = call(&app, post("/api/images", vec![0u8; 65 * 1024])).await;
    assert_eq!(s, StatusCode::PAYLOAD_TOO_LARGE);
    assert_eq!(error_code(&v), "payload_too_large");
    let (s, _) = call(&app, post("/api/images", Body::empty())).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let (s, _) = call(&app, post("/api/images", b"not an image".to_vec())).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);

    for bad in ["1.5", "-0.1", "abc", "NaN"] {
        let (s, v) = call(&app, post(&format!("/api/images/{id}/recognize?confidence={bad}"), Body::empty())).await;
        assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY, "{bad}: {v}");
    }
    let crop = format!("/api/images/{id}/predict-crop");
    for body in [
        json!({"x": 500, "y": 500, "w": 10, "h": 10}),
        json!({"x": 0, "y": 0, "w": 2, "h": 10}),
        json!({"x": 0, "y": 0, "w": 10, "h": 10, "top_k": 0}),
        json!({"x": 0, "y": 0}),
    ] {
        let (s, v) = call(&app, post_json(&crop, body.clone())).await;
        assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY, "{body}: {v}");
        assert!(v["error"]["message"].is_string());
    }
}

#[tokio::test]
async fn default_cap_rejects_seventeen_megabytes() {
    let (app, _) = app_with(Models::default(), ServiceConfig::default());
    let (s, _) = call(&app, post("/api/images", vec![0u8; 17 * 1024 * 1024])).await;
    assert_eq!(s, StatusCode::PAYLOAD_TOO_LARGE);
}

#[tokio::test]
async fn health_reports_counters() {
    let (empty, _) = app_with(Models::default(), ServiceConfig::default());
    let (s, v) = call(&empty, Request::get("/api/health").body(Body::empty()).unwrap()).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["models_loaded"], false);
    let id = upload(&empty, &synthetic_image(40, 40, 0)).await;
    let (s, v) = call(&empty, post(&format!("/api/images/{id}/recognize"), Body::empty())).await;
    assert_eq!((s, error_code(&v)), (StatusCode::SERVICE_UNAVAILABLE, "model_not_loaded"));

    let m = models();
    let (dp, cp) = (
        m.detector.as_ref().unwrap().network().param_count(),
        m.classifier.as_ref().unwrap().network().param_count(),
    );
    let (app, _) = app_with(m, ServiceConfig::default());
    let (_, v) = call(&app, Request::get("/api/health").body(Body::empty()).unwrap()).await;
    assert_eq!(v["models_loaded"], true);
    assert_eq!(v["params"]["detector"], dp);
    assert_eq!(v["params"]["classifier"], cp);
    assert!(v["flops"]["classifier"].as_u64() < v["flops"]["detector"].as_u64());
}

#[tokio::test]
async fn sessions_expire_after_ttl() {
    let config = ServiceConfig { session_ttl: Duration::from_millis(50), ..ServiceConfig::default() };
    let (app, state) = app_with(Models::default(), config);
    let id = upload(&app, &synthetic_image(30, 30, 0)).await;
    assert!(state.session(&id).is_some());
    tokio::time::sleep(Duration::from_millis(120)).await;
    assert!(state.session(&id).is_none());
    let (s, _) = call(&app, post(&format!("/api/images/{id}/recognize"), Body::empty())).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrent_mixed_requests_stay_isolated() {
    let start = Instant::now();
    let m = models();
    let detector = m.detector.clone().unwrap();
    let classifier = m.classifier.clone().unwrap();
    let (app, _) = app_with(m, ServiceConfig::default());
    let images: Vec<_> = (0..4).map(|i| synthetic_image(160 + 40 * i, 200 - 20 * i, 10 + i)).collect();
    let mut ids = Vec::new();
    for im in &images {
        ids.push(upload(&app, im).await);
    }

    let mut tasks = Vec::new();
    for k in 0..32usize {
        let s = k % 4;
        let app = app.clone();
        let id = ids[s].clone();
        tasks.push(tokio::spawn(async move {
            if k % 2 == 0 {
                let c = [0.1f32, 0.3, 0.5, 0.7][(k / 2) % 4];
                let (st, v) = call(&app, post(&format!("/api/images/{id}/recognize?confidence={c}"), Body::empty())).await;
                (k, s, st, Some(c), v)
            } else {
                let r = json!({"x": 5 * k, "y": 3 * k, "w": 40 + k, "h": 30 + k, "top_k": 3});
                let (st, v) = call(&app, post_json(&format!("/api/images/{id}/predict-crop"), r)).await;
                (k, s, st, None, v)
            }
        }));
    }
    for t in tasks {
        let (k, s, status, conf, v) = t.await.unwrap();
        assert_eq!(status, StatusCode::OK, "request {k}: {v}");
        match conf {
            Some(c) => {
                let want: Vec<DetectionRecord> = detector
                    .detect(&images[s], c, 0.5)
                    .unwrap()
                    .iter()
                    .map(DetectionRecord::from)
                    .collect();
                assert_eq!(v["detections"], as_wire(&want), "request {k}");
            }
            None => {
                let rect = CropRect::new(5 * k as i64, 3 * k as i64, 40 + k as i64, 30 + k as i64);
                let want = classifier.predict(&images[s], rect, 3).unwrap();
                assert_eq!(v["predictions"], as_wire(&want), "request {k}");
            }
        }
    }
    assert!(start.elapsed() < Duration::from_secs(30));
}
