use std::fmt;

use crate::tensor::{maxpool_extent, Activation, Shape};

use super::NetworkError;

/// Default YOLOv3-tiny anchors as (width, height) in input pixels.
pub const DEFAULT_ANCHORS: [(f32, f32); 6] = [
    (10.0, 14.0),
    (23.0, 27.0),
    (37.0, 58.0),
    (81.0, 82.0),
    (135.0, 169.0),
    (344.0, 319.0),
];

/// Anchor masks for the coarse (13×13) and fine (26×26) heads.
pub const DEFAULT_MASKS: [[usize; 3]; 2] = [[3, 4, 5], [1, 2, 3]];

pub const DETECTOR_INPUT: usize = 416;
pub const CLASSIFIER_INPUT: usize = 224;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Architecture {
    YoloV3Tiny,
    MobileNetV1,
    Custom,
}

impl Architecture {
    pub fn name(self) -> &'static str {
        match self {
            Architecture::YoloV3Tiny => "yolov3-tiny",
            Architecture::MobileNetV1 => "mobilenet-v1",
            Architecture::Custom => "custom",
        }
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Architecture {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "yolov3-tiny" => Ok(Architecture::YoloV3Tiny),
            "mobilenet-v1" => Ok(Architecture::MobileNetV1),
            other => Err(format!(
                "unknown architecture `{other}` (expected yolov3-tiny or mobilenet-v1)"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub filters: usize,
    pub size: usize,
    pub stride: usize,
    pub padding: usize,
    pub batch_normalize: bool,
    pub activation: Activation,
}

impl ConvLayer {
    /// Darknet-style "same" convolution: padding is `size / 2`.
    pub fn same(filters: usize, size: usize, stride: usize, activation: Activation) -> Self {
        Self {
            filters,
            size,
            stride,
            padding: size / 2,
            batch_normalize: true,
            activation,
        }
    }

    pub fn without_batchnorm(mut self) -> Self {
        self.batch_normalize = false;
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct YoloLayer {
    /// Indices into `anchors` used by this head.
    pub mask: Vec<usize>,
    pub anchors: Vec<(f32, f32)>,
    pub classes: usize,
}

impl YoloLayer {
    pub fn masked_anchors(&self) -> Vec<(f32, f32)> {
        self.mask.iter().map(|&i| self.anchors[i]).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerKind {
    Convolutional(ConvLayer),
    MaxPool { size: usize, stride: usize },
    Upsample { factor: usize },
    /// Concatenates the outputs of earlier layers along channels.
    Route { sources: Vec<usize> },
    Yolo(YoloLayer),
    /// 3×3 depthwise conv + BN + ReLU6, then 1×1 pointwise conv + BN + ReLU6.
    DepthwiseBlock { filters: usize, stride: usize },
    GlobalPool,
    DenseSoftmax { classes: usize },
}

impl LayerKind {
    pub fn type_name(&self) -> &'static str {
        match self {
            LayerKind::Convolutional(_) => "Convolutional",
            LayerKind::MaxPool { .. } => "Max Pooling",
            LayerKind::Upsample { .. } => "Up-sampling",
            LayerKind::Route { .. } => "Route",
            LayerKind::Yolo(_) => "YOLO",
            LayerKind::DepthwiseBlock { .. } => "Depthwise Separable",
            LayerKind::GlobalPool => "Global Avg Pool",
            LayerKind::DenseSoftmax { .. } => "Dense Softmax",
        }
    }

    pub fn is_parametric(&self) -> bool {
        matches!(
            self,
            LayerKind::Convolutional(_)
                | LayerKind::DepthwiseBlock { .. }
                | LayerKind::DenseSoftmax { .. }
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerSpec {
    pub index: usize,
    pub kind: LayerKind,
}

/// An ordered layer graph with its fixed input extent.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkSpec {
    pub arch: Architecture,
    pub layers: Vec<LayerSpec>,
    /// Input as (channels, height, width).
    pub input: Shape,
    pub num_classes: usize,
    shapes: Vec<Shape>,
}

/// Per-layer geometry: what the layer consumes and produces.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerShape {
    pub index: usize,
    pub input: Shape,
    pub output: Shape,
}

impl NetworkSpec {
    /// Validates the graph by propagating shapes from `input` through every layer.
    pub fn new(
        arch: Architecture,
        input: Shape,
        num_classes: usize,
        kinds: Vec<LayerKind>,
    ) -> Result<Self, NetworkError> {
        let layers: Vec<LayerSpec> = kinds
            .into_iter()
            .enumerate()
            .map(|(index, kind)| LayerSpec { index, kind })
            .collect();
        let shapes = propagate(input, &layers)?;
        let yolo = layers
            .iter()
            .filter(|l| matches!(l.kind, LayerKind::Yolo(_)))
            .count();
        let dense = layers
            .iter()
            .filter(|l| matches!(l.kind, LayerKind::DenseSoftmax { .. }))
            .count();
        match arch {
            Architecture::YoloV3Tiny if yolo != 2 => {
                return Err(NetworkError::Invalid(format!(
                    "detector graph needs exactly two yolo layers, found {yolo}"
                )))
            }
            Architecture::MobileNetV1 if dense != 1 => {
                return Err(NetworkError::Invalid(format!(
                    "classifier graph needs exactly one dense softmax layer, found {dense}"
                )))
            }
            _ => {}
        }
        Ok(Self {
            arch,
            layers,
            input,
            num_classes,
            shapes,
        })
    }

    /// Output shape of each layer, in order.
    pub fn output_shapes(&self) -> &[Shape] {
        &self.shapes
    }

    /// Input and output shape of each layer. Route layers report their first source as input.
    pub fn layer_shapes(&self) -> Vec<LayerShape> {
        self.layers
            .iter()
            .map(|l| LayerShape {
                index: l.index,
                input: self.layer_input(l.index),
                output: self.shapes[l.index],
            })
            .collect()
    }

    pub(crate) fn layer_input(&self, index: usize) -> Shape {
        match &self.layers[index].kind {
            LayerKind::Route { sources } => self.shapes[sources[0]],
            _ if index == 0 => self.input,
            _ => self.shapes[index - 1],
        }
    }

    /// Layers whose outputs form the network's result: every yolo head, or
    /// the final layer if there are none.
    pub fn terminal_layers(&self) -> Vec<usize> {
        let yolo: Vec<usize> = self
            .layers
            .iter()
            .filter(|l| matches!(l.kind, LayerKind::Yolo(_)))
            .map(|l| l.index)
            .collect();
        if yolo.is_empty() {
            self.layers.len().checked_sub(1).into_iter().collect()
        } else {
            yolo
        }
    }

    pub fn yolo_layers(&self) -> Vec<&YoloLayer> {
        self.layers
            .iter()
            .filter_map(|l| match &l.kind {
                LayerKind::Yolo(y) => Some(y),
                _ => None,
            })
            .collect()
    }

    pub fn param_count(&self) -> u64 {
        super::count_params(self)
    }

    pub fn flop_count(&self) -> u64 {
        super::count_flops(self)
    }
}

fn propagate(input: Shape, layers: &[LayerSpec]) -> Result<Vec<Shape>, NetworkError> {
    if input.is_empty() {
        return Err(NetworkError::Invalid(format!(
            "input extent must be nonzero, got {input}"
        )));
    }
    let mut shapes: Vec<Shape> = Vec::with_capacity(layers.len());
    for layer in layers {
        let prev = shapes.last().copied().unwrap_or(input);
        let err = |msg: String| NetworkError::Shape {
            layer: layer.index,
            message: msg,
        };
        let out = match &layer.kind {
            LayerKind::Convolutional(c) => {
                if c.filters == 0 || c.size == 0 || c.stride == 0 {
                    return Err(err("filters, size and stride must be at least 1".into()));
                }
                let ph = prev.height + 2 * c.padding;
                let pw = prev.width + 2 * c.padding;
                if c.size > ph || c.size > pw {
                    return Err(err(format!(
                        "{0}x{0} kernel does not fit input {prev}",
                        c.size
                    )));
                }
                Shape::new(
                    c.filters,
                    (ph - c.size) / c.stride + 1,
                    (pw - c.size) / c.stride + 1,
                )
            }
            LayerKind::MaxPool { size, stride } => {
                if *size == 0 || *stride == 0 {
                    return Err(err("pool size and stride must be at least 1".into()));
                }
                Shape::new(
                    prev.channels,
                    maxpool_extent(prev.height, *stride),
                    maxpool_extent(prev.width, *stride),
                )
            }
            LayerKind::Upsample { factor } => {
                if *factor == 0 {
                    return Err(err("upsample factor must be at least 1".into()));
                }
                Shape::new(prev.channels, prev.height * factor, prev.width * factor)
            }
            LayerKind::Route { sources } => {
                let Some(&first) = sources.first() else {
                    return Err(err("route needs at least one source".into()));
                };
                if let Some(&bad) = sources.iter().find(|&&s| s >= layer.index) {
                    return Err(err(format!(
                        "route source {bad} is not an earlier layer"
                    )));
                }
                let base = shapes[first];
                let mut channels = 0;
                for &s in sources {
                    let sh = shapes[s];
                    if sh.height != base.height || sh.width != base.width {
                        return Err(err(format!(
                            "route sources disagree spatially: {base} vs {sh}"
                        )));
                    }
                    channels += sh.channels;
                }
                Shape::new(channels, base.height, base.width)
            }
            LayerKind::Yolo(y) => {
                if y.classes == 0 {
                    return Err(err("yolo head needs at least one class".into()));
                }
                if let Some(&bad) = y.mask.iter().find(|&&m| m >= y.anchors.len()) {
                    return Err(err(format!(
                        "anchor mask index {bad} outside {} anchors",
                        y.anchors.len()
                    )));
                }
                let expected = y.mask.len() * (y.classes + 5);
                if prev.channels != expected {
                    return Err(err(format!(
                        "yolo head expects {expected} channels, got {}",
                        prev.channels
                    )));
                }
                if prev.height != prev.width {
                    return Err(err(format!("yolo grid must be square, got {prev}")));
                }
                prev
            }
            LayerKind::DepthwiseBlock { filters, stride } => {
                if *filters == 0 || *stride == 0 {
                    return Err(err("filters and stride must be at least 1".into()));
                }
                Shape::new(
                    *filters,
                    (prev.height - 1) / stride + 1,
                    (prev.width - 1) / stride + 1,
                )
            }
            LayerKind::GlobalPool => Shape::new(prev.channels, 1, 1),
            LayerKind::DenseSoftmax { classes } => {
                if *classes == 0 {
                    return Err(err("dense layer needs at least one class".into()));
                }
                if prev.height != 1 || prev.width != 1 {
                    return Err(err(format!(
                        "dense layer expects a pooled C×1×1 input, got {prev}"
                    )));
                }
                Shape::new(*classes, 1, 1)
            }
        };
        shapes.push(out);
    }
    Ok(shapes)
}

/// Detector construction options; the defaults reproduce stock YOLOv3-tiny.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorConfig {
    pub classes: usize,
    pub anchors: Vec<(f32, f32)>,
    pub masks: [Vec<usize>; 2],
    pub input_size: usize,
}

impl DetectorConfig {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            anchors: DEFAULT_ANCHORS.to_vec(),
            masks: [DEFAULT_MASKS[0].to_vec(), DEFAULT_MASKS[1].to_vec()],
            input_size: DETECTOR_INPUT,
        }
    }
}

pub fn build_yolov3_tiny(num_classes: usize) -> Result<NetworkSpec, NetworkError> {
    build_yolov3_tiny_with(&DetectorConfig::new(num_classes))
}

pub fn build_yolov3_tiny_with(cfg: &DetectorConfig) -> Result<NetworkSpec, NetworkError> {
    if cfg.classes == 0 {
        return Err(NetworkError::Invalid("num_classes must be at least 1".into()));
    }
    if cfg.input_size == 0 || cfg.input_size % 32 != 0 {
        return Err(NetworkError::Invalid(format!(
            "detector input size must be a positive multiple of 32, got {}",
            cfg.input_size
        )));
    }
    let leaky = Activation::DARKNET_LEAKY;
    let conv = |f, s| LayerKind::Convolutional(ConvLayer::same(f, s, 1, leaky));
    let head = |mask: &Vec<usize>| {
        (
            LayerKind::Convolutional(
                ConvLayer::same(mask.len() * (cfg.classes + 5), 1, 1, Activation::Linear)
                    .without_batchnorm(),
            ),
            LayerKind::Yolo(YoloLayer {
                mask: mask.clone(),
                anchors: cfg.anchors.clone(),
                classes: cfg.classes,
            }),
        )
    };
    let pool = |stride| LayerKind::MaxPool { size: 2, stride };
    let (head0_conv, head0_yolo) = head(&cfg.masks[0]);
    let (head1_conv, head1_yolo) = head(&cfg.masks[1]);
    let layers = vec![
        conv(16, 3),                               // 0
        pool(2),                                   // 1
        conv(32, 3),                               // 2
        pool(2),                                   // 3
        conv(64, 3),                               // 4
        pool(2),                                   // 5
        conv(128, 3),                              // 6
        pool(2),                                   // 7
        conv(256, 3),                              // 8
        pool(2),                                   // 9
        conv(512, 3),                              // 10
        pool(1),                                   // 11
        conv(1024, 3),                             // 12
        conv(256, 1),                              // 13
        conv(512, 3),                              // 14
        head0_conv,                                // 15
        head0_yolo,                                // 16
        LayerKind::Route { sources: vec![13] },    // 17
        conv(128, 1),                              // 18
        LayerKind::Upsample { factor: 2 },         // 19
        LayerKind::Route { sources: vec![19, 8] }, // 20
        conv(256, 3),                              // 21
        head1_conv,                                // 22
        head1_yolo,                                // 23
    ];
    NetworkSpec::new(
        Architecture::YoloV3Tiny,
        Shape::new(3, cfg.input_size, cfg.input_size),
        cfg.classes,
        layers,
    )
}

/// Scales a MobileNet channel count by `alpha`, rounding to the nearest
/// multiple of 8 with a floor of 8.
pub fn scaled_width(channels: usize, alpha: f64) -> usize {
    let scaled = channels as f64 * alpha;
    let rounded = ((scaled + 4.0) / 8.0).floor() as usize * 8;
    rounded.max(8)
}

/// (filters, stride) of the thirteen depthwise-separable blocks.
pub const MOBILENET_BLOCKS: [(usize, usize); 13] = [
    (64, 1),
    (128, 2),
    (128, 1),
    (256, 2),
    (256, 1),
    (512, 2),
    (512, 1),
    (512, 1),
    (512, 1),
    (512, 1),
    (512, 1),
    (1024, 2),
    (1024, 1),
];

pub fn build_mobilenet_v1(
    num_classes: usize,
    width_multiplier: f64,
) -> Result<NetworkSpec, NetworkError> {
    build_mobilenet_v1_with(num_classes, width_multiplier, CLASSIFIER_INPUT)
}

pub fn build_mobilenet_v1_with(
    num_classes: usize,
    width_multiplier: f64,
    input_size: usize,
) -> Result<NetworkSpec, NetworkError> {
    if num_classes == 0 {
        return Err(NetworkError::Invalid("num_classes must be at least 1".into()));
    }
    if !(width_multiplier > 0.0 && width_multiplier <= 1.0) {
        return Err(NetworkError::Invalid(format!(
            "width multiplier must be in (0, 1], got {width_multiplier}"
        )));
    }
    if input_size < 32 {
        return Err(NetworkError::Invalid(format!(
            "classifier input size must be at least 32, got {input_size}"
        )));
    }
    let mut layers = vec![LayerKind::Convolutional(ConvLayer::same(
        scaled_width(32, width_multiplier),
        3,
        2,
        Activation::Relu6,
    ))];
    layers.extend(
        MOBILENET_BLOCKS
            .iter()
            .map(|&(filters, stride)| LayerKind::DepthwiseBlock {
                filters: scaled_width(filters, width_multiplier),
                stride,
            }),
    );
    layers.push(LayerKind::GlobalPool);
    layers.push(LayerKind::DenseSoftmax {
        classes: num_classes,
    });
    NetworkSpec::new(
        Architecture::MobileNetV1,
        Shape::new(3, input_size, input_size),
        num_classes,
        layers,
    )
}
