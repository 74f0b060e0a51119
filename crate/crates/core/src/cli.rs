//! The `obi` command-line tool. Every subcommand goes through the same
//! library calls the HTTP service uses.
//!
//! Exit codes: 0 success, 1 bad input, 2 model-load failure.

use std::io::Write;
use std::net::{IpAddr, Ipv4Addr, SocketAddr};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::classify::{Classifier, CropRect, DEFAULT_TOP_K};
use crate::config::ModelConfig;
use crate::detect::{DetectionRecord, Detector, DEFAULT_CONFIDENCE, DEFAULT_NMS};
use crate::eval::{self, EvalConfig, ModelStats, ThresholdedDetector};
use crate::labels::Labels;
use crate::network::{
    build_mobilenet_v1, build_yolov3_tiny_with, layer_flop_count, layer_param_count,
    load_darknet_weights, Architecture, LayerKind, LoadedNetwork, NetworkSpec,
};
use crate::service::{self, AppState, Models, ServiceConfig};
use crate::tensor::{Shape, Tensor};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    BadInput(String),
    #[error("{0}")]
    ModelLoad(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::BadInput(_) => 1,
            CliError::ModelLoad(_) => 2,
        }
    }
}

fn bad(msg: impl std::fmt::Display) -> CliError {
    CliError::BadInput(msg.to_string())
}

fn load_err(msg: impl std::fmt::Display) -> CliError {
    CliError::ModelLoad(msg.to_string())
}

#[derive(Debug, Parser)]
#[command(name = "obi", version, about = "Two-stage glyph detection and recognition")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Detect and label characters in one image.
    Detect(DetectArgs),
    /// Classify one cropped region with the second-stage classifier.
    Classify(ClassifyArgs),
    /// Evaluate the detector on an annotated image directory.
    Eval(EvalArgs),
    /// Print per-layer shapes, parameters and FLOPs.
    Inspect(InspectArgs),
    /// Time forward passes.
    Bench(BenchArgs),
    /// Run the HTTP service.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct DetectArgs {
    pub image: PathBuf,
    #[arg(long)]
    pub weights: PathBuf,
    #[arg(long)]
    pub labels: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_CONFIDENCE)]
    pub confidence: f32,
    #[arg(long, default_value_t = DEFAULT_NMS)]
    pub nms: f32,
    /// Also write the detection lines to this file.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Write a copy of the image with labelled boxes.
    #[arg(long)]
    pub render: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ClassifyArgs {
    pub image: PathBuf,
    /// Crop rectangle `x,y,w,h` in image pixels (top-left origin).
    #[arg(long)]
    pub rect: String,
    #[arg(long)]
    pub weights: PathBuf,
    #[arg(long)]
    pub labels: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_TOP_K)]
    pub top_k: usize,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub images: PathBuf,
    #[arg(long)]
    pub weights: PathBuf,
    #[arg(long)]
    pub labels: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 0.5)]
    pub iou: f32,
    #[arg(long, default_value_t = DEFAULT_CONFIDENCE)]
    pub confidence: f32,
    #[arg(long, default_value_t = DEFAULT_NMS)]
    pub nms: f32,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    #[arg(long)]
    pub arch: Architecture,
    #[arg(long)]
    pub classes: usize,
    /// Optional weights to validate against the graph.
    #[arg(long)]
    pub weights: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub arch: Architecture,
    #[arg(long, default_value_t = 80)]
    pub classes: usize,
    #[arg(long, default_value_t = 10)]
    pub iterations: usize,
    /// Weights to time; seeded random weights otherwise.
    #[arg(long)]
    pub weights: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, default_value_t = service::DEFAULT_PORT)]
    pub port: u16,
    #[arg(long, default_value_t = IpAddr::V4(Ipv4Addr::UNSPECIFIED))]
    pub host: IpAddr,
    #[arg(long)]
    pub weights_detector: Option<PathBuf>,
    #[arg(long)]
    pub weights_classifier: Option<PathBuf>,
    /// Class names for the detector (and the classifier, unless overridden).
    #[arg(long)]
    pub labels: Option<PathBuf>,
    #[arg(long)]
    pub labels_classifier: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub static_dir: Option<PathBuf>,
    #[arg(long)]
    pub spool_dir: Option<PathBuf>,
    #[arg(long, default_value_t = service::DEFAULT_SESSION_TTL.as_secs())]
    pub session_ttl_seconds: u64,
    #[arg(long, default_value_t = service::DEFAULT_MAX_UPLOAD)]
    pub max_upload_bytes: usize,
}

pub fn load_labels(path: &Path) -> Result<Labels, CliError> {
    let labels = Labels::from_file(path)
        .map_err(|e| bad(format!("cannot read labels {}: {e}", path.display())))?;
    if labels.is_empty() {
        return Err(bad(format!("label file {} is empty", path.display())));
    }
    Ok(labels)
}

pub fn load_config(path: Option<&Path>) -> Result<ModelConfig, CliError> {
    match path {
        Some(p) => ModelConfig::from_file(p).map_err(|e| bad(format!("{}: {e}", p.display()))),
        None => Ok(ModelConfig::default()),
    }
}

fn read_image(path: &Path) -> Result<image::RgbImage, CliError> {
    Ok(image::open(path)
        .map_err(|e| bad(format!("cannot read image {}: {e}", path.display())))?
        .to_rgb8())
}

fn load_network(spec: NetworkSpec, weights: &Path) -> Result<(LoadedNetwork, u64), CliError> {
    let bytes = std::fs::read(weights)
        .map_err(|e| load_err(format!("cannot read weights {}: {e}", weights.display())))?;
    let net = load_darknet_weights(spec, &bytes)
        .map_err(|e| load_err(format!("{}: {e}", weights.display())))?;
    Ok((net, bytes.len() as u64))
}

/// Detector from a weight file; the class count comes from the config or the labels.
pub fn load_detector(
    weights: &Path,
    labels: Labels,
    config: &ModelConfig,
) -> Result<(Detector, u64), CliError> {
    let spec = build_yolov3_tiny_with(&config.detector(labels.len())).map_err(load_err)?;
    let (net, volume) = load_network(spec, weights)?;
    let net = net.with_labels(labels).map_err(load_err)?;
    Ok((Detector::new(net).map_err(load_err)?, volume))
}

/// MobileNet classifier from a weight file; one class per label.
pub fn load_classifier(
    weights: &Path,
    labels: Labels,
    config: &ModelConfig,
) -> Result<Classifier, CliError> {
    let spec = build_mobilenet_v1(labels.len(), config.width_multiplier).map_err(load_err)?;
    let (net, _) = load_network(spec, weights)?;
    let net = net.with_labels(labels).map_err(load_err)?;
    Classifier::new(net).map_err(load_err)
}

pub fn format_detection_line(d: &DetectionRecord) -> String {
    format!(
        "{} {:.6} {:.2} {:.2} {:.2} {:.2}",
        d.class_name, d.confidence, d.x, d.y, d.w, d.h
    )
}

fn parse_rect(text: &str) -> Result<CropRect, CliError> {
    let parts: Vec<i64> = text
        .split(',')
        .map(|p| p.trim().parse::<i64>())
        .collect::<Result<_, _>>()
        .map_err(|_| bad(format!("--rect expects x,y,w,h integers, got `{text}`")))?;
    match parts[..] {
        [x, y, w, h] => Ok(CropRect::new(x, y, w, h)),
        _ => Err(bad(format!("--rect expects four values, got `{text}`"))),
    }
}

fn check_unit(name: &str, v: f32) -> Result<(), CliError> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(bad(format!("--{name} must be in [0, 1], got {v}")))
    }
}

fn run_detect(a: &DetectArgs, out: &mut dyn Write) -> Result<(), CliError> {
    check_unit("confidence", a.confidence)?;
    check_unit("nms", a.nms)?;
    let labels = load_labels(&a.labels)?;
    let config = load_config(a.config.as_deref())?;
    let image = read_image(&a.image)?;
    let (detector, _) = load_detector(&a.weights, labels, &config)?;
    let detections = detector
        .detect(&image, a.confidence, a.nms)
        .map_err(bad)?;
    let mut text = String::new();
    for d in &detections {
        text.push_str(&format_detection_line(&DetectionRecord::from(d)));
        text.push('\n');
    }
    out.write_all(text.as_bytes()).map_err(bad)?;
    if let Some(path) = &a.out {
        std::fs::write(path, &text).map_err(|e| bad(format!("{}: {e}", path.display())))?;
    }
    if let Some(path) = &a.render {
        crate::render::render_detections(&image, &detections)
            .save(path)
            .map_err(|e| bad(format!("{}: {e}", path.display())))?;
    }
    Ok(())
}

fn run_classify(a: &ClassifyArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let rect = parse_rect(&a.rect)?;
    let labels = load_labels(&a.labels)?;
    let config = load_config(a.config.as_deref())?;
    let image = read_image(&a.image)?;
    let classifier = load_classifier(&a.weights, labels, &config)?;
    if a.top_k == 0 {
        return Err(bad("--top-k must be at least 1"));
    }
    let top_k = a.top_k.min(classifier.num_classes());
    for p in classifier.predict(&image, rect, top_k).map_err(bad)? {
        writeln!(out, "{} {:.6}", p.class_name, p.probability).map_err(bad)?;
    }
    Ok(())
}

fn run_eval(a: &EvalArgs, out: &mut dyn Write) -> Result<(), CliError> {
    check_unit("confidence", a.confidence)?;
    check_unit("nms", a.nms)?;
    check_unit("iou", a.iou)?;
    let labels = load_labels(&a.labels)?;
    let config = load_config(a.config.as_deref())?;
    let (detector, volume) = load_detector(&a.weights, labels.clone(), &config)?;
    let source = ThresholdedDetector {
        detector: &detector,
        conf_threshold: a.confidence,
        nms_threshold: a.nms,
    };
    let report = eval::evaluate_dataset(
        &source,
        &a.images,
        &labels,
        EvalConfig {
            conf_threshold: a.confidence,
            nms_threshold: a.nms,
            iou_threshold: a.iou,
        },
        Some(ModelStats::of(detector.network(), volume)),
    )
    .map_err(bad)?;
    write!(out, "{}\n{}", report.to_table(), report.to_key_values()).map_err(bad)?;
    if !report.skipped.is_empty() {
        let list: Vec<String> = report
            .skipped
            .iter()
            .map(|s| s.path.display().to_string())
            .collect();
        return Err(bad(format!(
            "{} image(s) skipped: {}",
            list.len(),
            list.join(", ")
        )));
    }
    Ok(())
}

fn build_spec(arch: Architecture, classes: usize, config: &ModelConfig) -> Result<NetworkSpec, CliError> {
    match arch {
        Architecture::YoloV3Tiny => {
            let mut cfg = config.detector(classes);
            cfg.classes = classes;
            build_yolov3_tiny_with(&cfg)
        }
        Architecture::MobileNetV1 => build_mobilenet_v1(classes, config.width_multiplier),
        Architecture::Custom => return Err(bad("only yolov3-tiny and mobilenet-v1 are buildable")),
    }
    .map_err(bad)
}

fn size_stride(kind: &LayerKind) -> String {
    match kind {
        LayerKind::Convolutional(c) => format!("{0}×{0}, {1}", c.size, c.stride),
        LayerKind::MaxPool { size, stride } => format!("{size}×{size}, {stride}"),
        LayerKind::Upsample { factor } => format!("{factor}×{factor}, 1"),
        LayerKind::DepthwiseBlock { stride, .. } => format!("3×3 dw, {stride}"),
        _ => String::new(),
    }
}

fn filters(kind: &LayerKind) -> String {
    match kind {
        LayerKind::Convolutional(c) => c.filters.to_string(),
        LayerKind::DepthwiseBlock { filters, .. } => filters.to_string(),
        LayerKind::DenseSoftmax { classes } => classes.to_string(),
        _ => String::new(),
    }
}

fn type_label(kind: &LayerKind) -> String {
    match kind {
        LayerKind::Route { sources } => {
            let s: Vec<String> = sources.iter().map(|s| s.to_string()).collect();
            format!("Route {}", s.join(" "))
        }
        other => other.type_name().to_string(),
    }
}

/// Per-layer table in `W×H×C` order plus totals.
pub fn inspect_table(spec: &NetworkSpec) -> String {
    let mut s = format!(
        "{} ({} classes, input {})\n{:>5}  {:<20} {:>7}  {:<10} {:>16} {:>16} {:>12} {:>16}\n",
        spec.arch,
        spec.num_classes,
        spec.input,
        "Layer",
        "Type",
        "Filters",
        "Size/Str",
        "Input",
        "Output",
        "Params",
        "FLOPs"
    );
    for (layer, shapes) in spec.layers.iter().zip(spec.layer_shapes()) {
        let (input, output) = match layer.kind {
            LayerKind::Route { .. } | LayerKind::Yolo(_) => (String::new(), String::new()),
            _ => (shapes.input.to_string(), shapes.output.to_string()),
        };
        s.push_str(&format!(
            "{:>5}  {:<20} {:>7}  {:<10} {:>16} {:>16} {:>12} {:>16}\n",
            layer.index,
            type_label(&layer.kind),
            filters(&layer.kind),
            size_stride(&layer.kind),
            input,
            output,
            layer_param_count(spec, layer.index),
            layer_flop_count(spec, layer.index),
        ));
    }
    s.push_str(&format!(
        "total_params={}\ntotal_flops={}\n",
        spec.param_count(),
        spec.flop_count()
    ));
    s
}

fn run_inspect(a: &InspectArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let config = load_config(a.config.as_deref())?;
    let spec = build_spec(a.arch, a.classes, &config)?;
    let mut text = inspect_table(&spec);
    if let Some(w) = &a.weights {
        let (net, volume) = load_network(spec, w)?;
        text.push_str(&format!(
            "model_volume_bytes={volume}\nsha256={}\n",
            net.digest()
        ));
    }
    out.write_all(text.as_bytes()).map_err(bad)
}

fn run_bench(a: &BenchArgs, out: &mut dyn Write) -> Result<(), CliError> {
    if a.iterations == 0 {
        return Err(bad("--iterations must be at least 1"));
    }
    let config = load_config(a.config.as_deref())?;
    let spec = build_spec(a.arch, a.classes, &config)?;
    let net = match &a.weights {
        Some(w) => load_network(spec, w)?.0,
        None => LoadedNetwork::random(spec, 0),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let input_shape: Shape = net.spec().input;
    let input = Tensor::from_fn(input_shape, |_, _, _| rng.gen_range(0.0..1.0));
    net.forward(&input).map_err(bad)?;
    let mut samples: Vec<Duration> = Vec::with_capacity(a.iterations);
    for i in 0..a.iterations {
        let t = Instant::now();
        net.forward(&input).map_err(bad)?;
        let dt = t.elapsed();
        writeln!(out, "run {} {:.3} ms", i + 1, dt.as_secs_f64() * 1e3).map_err(bad)?;
        samples.push(dt);
    }
    samples.sort();
    let mean = samples.iter().sum::<Duration>().as_secs_f64() / samples.len() as f64;
    let n = samples.len();
    let median = if n % 2 == 1 {
        samples[n / 2].as_secs_f64()
    } else {
        (samples[n / 2 - 1].as_secs_f64() + samples[n / 2].as_secs_f64()) / 2.0
    };
    writeln!(
        out,
        "arch={}\niterations={}\nmean_ms={:.3}\nmedian_ms={:.3}\nflops={}",
        net.spec().arch,
        n,
        mean * 1e3,
        median * 1e3,
        net.flop_count()
    )
    .map_err(bad)
}

/// Loads whatever models the flags name. Missing weights leave that model unloaded.
pub fn build_models(a: &ServeArgs) -> Result<Models, CliError> {
    let config = load_config(a.config.as_deref())?;
    let labels = a.labels.as_deref().map(load_labels).transpose()?;
    let classifier_labels = match &a.labels_classifier {
        Some(p) => Some(load_labels(p)?),
        None => labels.clone(),
    };
    let detector = match &a.weights_detector {
        Some(w) => {
            let labels = labels
                .clone()
                .ok_or_else(|| bad("--weights-detector needs --labels"))?;
            Some(load_detector(w, labels, &config)?.0)
        }
        None => None,
    };
    let classifier = match &a.weights_classifier {
        Some(w) => {
            let labels = classifier_labels
                .ok_or_else(|| bad("--weights-classifier needs --labels or --labels-classifier"))?;
            Some(load_classifier(w, labels, &config)?)
        }
        None => None,
    };
    Ok(Models {
        detector,
        classifier,
    })
}

fn run_serve(a: &ServeArgs) -> Result<(), CliError> {
    let models = build_models(a)?;
    let config = ServiceConfig {
        max_upload_bytes: a.max_upload_bytes,
        session_ttl: Duration::from_secs(a.session_ttl_seconds),
        static_dir: a.static_dir.clone(),
        spool_dir: a.spool_dir.clone(),
        ..ServiceConfig::default()
    };
    if let Some(dir) = &config.spool_dir {
        std::fs::create_dir_all(dir).map_err(|e| bad(format!("{}: {e}", dir.display())))?;
    }
    let runtime = tokio::runtime::Runtime::new().map_err(bad)?;
    runtime
        .block_on(service::serve(
            SocketAddr::new(a.host, a.port),
            AppState::new(models, config),
        ))
        .map_err(bad)
}

pub fn run(cli: &Cli, out: &mut dyn Write) -> Result<(), CliError> {
    match &cli.command {
        Command::Detect(a) => run_detect(a, out),
        Command::Classify(a) => run_classify(a, out),
        Command::Eval(a) => run_eval(a, out),
        Command::Inspect(a) => run_inspect(a, out),
        Command::Bench(a) => run_bench(a, out),
        Command::Serve(a) => run_serve(a),
    }
}

/// Parses `args` (including the program name), runs, and returns the exit code.
pub fn main_with_args<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = write!(err, "{e}");
            return code;
        }
    };
    match run(&cli, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}
