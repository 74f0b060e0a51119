//! Two-stage glyph recognition on a small pure-Rust inference runtime.
//!
//! A YOLOv3-tiny detector finds and labels characters on a whole rubbing
//! image; a MobileNet-v1 classifier then recognises regions the user crops
//! by hand. Around the two networks sit an evaluation harness (precision,
//! recall, F1, mAP, parameter and FLOP counts), an HTTP service that keeps
//! per-image detector output cached so the score threshold can be tuned
//! interactively, and the `obi` command-line tool.

pub mod classify;
pub mod cli;
pub mod config;
pub mod detect;
pub mod eval;
pub mod labels;
pub mod network;
pub mod render;
pub mod service;
pub mod tensor;

pub use classify::{ClassPrediction, Classifier, CropRect};
pub use detect::{BBox, Detection, Detector};
pub use labels::Labels;
pub use network::{LoadedNetwork, NetworkSpec};
pub use tensor::{Shape, Tensor};
