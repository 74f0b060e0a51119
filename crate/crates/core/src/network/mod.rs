//! Layer graphs for the detector and classifier, weight binding, forward
//! execution, and parameter / FLOP accounting.

mod spec;
mod weights;

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::labels::Labels;
use crate::tensor::{self, Activation, BatchNorm, ConvParams, Shape, Tensor, TensorError};

pub use spec::{
    build_mobilenet_v1, build_mobilenet_v1_with, build_yolov3_tiny, build_yolov3_tiny_with,
    scaled_width, Architecture, ConvLayer, DetectorConfig, LayerKind, LayerShape, LayerSpec,
    NetworkSpec, YoloLayer, CLASSIFIER_INPUT, DEFAULT_ANCHORS, DEFAULT_MASKS, DETECTOR_INPUT,
    MOBILENET_BLOCKS,
};
pub use weights::{load_darknet_weights, save_weights, WeightsError, WeightsHeader};

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error("layer {layer}: {message}")]
    Shape { layer: usize, message: String },
    #[error("invalid network: {0}")]
    Invalid(String),
    #[error("input extent mismatch: network expects {expected}, got {actual}")]
    InputExtent { expected: Shape, actual: Shape },
    #[error("{labels} class names supplied for a network with {classes} classes")]
    LabelCount { labels: usize, classes: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Zero-valued parameter blocks for every conv stage of `layer`, in file order.
///
/// Convolutional layers contribute one block, depthwise-separable blocks two
/// (depthwise then pointwise), dense layers one 1×1 block with bias.
pub(crate) fn parameter_templates(spec: &NetworkSpec, layer: usize) -> Vec<ConvParams> {
    let input = spec.layer_input(layer);
    match &spec.layers[layer].kind {
        LayerKind::Convolutional(c) => {
            let mut p = ConvParams::zeros(
                input.channels,
                c.filters,
                (c.size, c.size),
                c.stride,
                c.padding,
                1,
            );
            if c.batch_normalize {
                p.batchnorm = Some(BatchNorm::identity(c.filters));
            }
            vec![p]
        }
        LayerKind::DepthwiseBlock { filters, stride } => {
            let c = input.channels;
            let mut dw = ConvParams::zeros(c, c, (3, 3), *stride, 1, c);
            dw.batchnorm = Some(BatchNorm::identity(c));
            let mut pw = ConvParams::zeros(c, *filters, (1, 1), 1, 0, 1);
            pw.batchnorm = Some(BatchNorm::identity(*filters));
            vec![dw, pw]
        }
        LayerKind::DenseSoftmax { classes } => {
            vec![ConvParams::zeros(input.channels, *classes, (1, 1), 1, 0, 1)]
        }
        _ => Vec::new(),
    }
}

/// Number of stored floats for one parameter block: BN layers store
/// beta/gamma/mean/var, plain layers store a bias.
fn block_floats(p: &ConvParams) -> usize {
    let per_channel = if p.batchnorm.is_some() { 4 } else { 1 };
    p.weight_len() + per_channel * p.out_channels
}

/// Weights, biases and BatchNorm statistics across all parametric layers.
pub fn count_params(spec: &NetworkSpec) -> u64 {
    (0..spec.layers.len()).map(|i| layer_param_count(spec, i)).sum()
}

pub fn layer_param_count(spec: &NetworkSpec, layer: usize) -> u64 {
    parameter_templates(spec, layer)
        .iter()
        .map(|p| block_floats(p) as u64)
        .sum()
}

/// Floating-point operations for one forward pass.
///
/// Convolutions count two operations per multiply-accumulate, max-pools count
/// `size² − 1` comparisons per output cell, global pooling one addition per
/// input cell, dense layers `2 · in · out`. Bias, BatchNorm and activations
/// are not counted.
pub fn count_flops(spec: &NetworkSpec) -> u64 {
    (0..spec.layers.len()).map(|i| layer_flop_count(spec, i)).sum()
}

pub fn layer_flop_count(spec: &NetworkSpec, layer: usize) -> u64 {
    let out = spec.output_shapes()[layer];
    let input = spec.layer_input(layer);
    match &spec.layers[layer].kind {
        LayerKind::Convolutional(_) | LayerKind::DepthwiseBlock { .. } => {
            let mut shape = input;
            let mut flops = 0;
            for p in parameter_templates(spec, layer) {
                let o = p.output_shape(shape).expect("validated at construction");
                flops += conv_flops(&p, o);
                shape = o;
            }
            flops
        }
        LayerKind::MaxPool { size, .. } => out.len() as u64 * (size * size - 1) as u64,
        LayerKind::GlobalPool => input.len() as u64,
        LayerKind::DenseSoftmax { classes } => 2 * input.channels as u64 * *classes as u64,
        LayerKind::Upsample { .. } | LayerKind::Route { .. } | LayerKind::Yolo(_) => 0,
    }
}

/// `2 · (in / groups) · kh · kw` per output cell.
pub fn conv_flops(p: &ConvParams, output: Shape) -> u64 {
    2 * (p.in_channels / p.groups) as u64
        * p.kernel.0 as u64
        * p.kernel.1 as u64
        * output.len() as u64
}

/// A network graph with every parametric layer bound to weights.
#[derive(Debug, Clone)]
pub struct LoadedNetwork {
    spec: NetworkSpec,
    /// One entry per layer; empty for layers without parameters.
    params: Vec<Vec<ConvParams>>,
    digest: String,
    labels: Labels,
}

impl LoadedNetwork {
    /// Binds explicit parameter blocks. Every block must match its template's geometry.
    pub fn from_params(
        spec: NetworkSpec,
        params: Vec<Vec<ConvParams>>,
    ) -> Result<Self, NetworkError> {
        if params.len() != spec.layers.len() {
            return Err(NetworkError::Invalid(format!(
                "{} parameter entries for {} layers",
                params.len(),
                spec.layers.len()
            )));
        }
        for (i, blocks) in params.iter().enumerate() {
            let templates = parameter_templates(&spec, i);
            if blocks.len() != templates.len() {
                return Err(NetworkError::Invalid(format!(
                    "layer {i}: expected {} parameter blocks, got {}",
                    templates.len(),
                    blocks.len()
                )));
            }
            for (b, t) in blocks.iter().zip(&templates) {
                let same_geometry = b.in_channels == t.in_channels
                    && b.out_channels == t.out_channels
                    && b.kernel == t.kernel
                    && b.stride == t.stride
                    && b.padding == t.padding
                    && b.groups == t.groups
                    && b.batchnorm.is_some() == t.batchnorm.is_some();
                if !same_geometry {
                    return Err(NetworkError::Invalid(format!(
                        "layer {i}: parameter geometry does not match the layer"
                    )));
                }
                if b.batchnorm.is_some() && b.bias.iter().any(|&v| v != 0.0) {
                    return Err(NetworkError::Shape {
                        layer: i,
                        message: "batch-normalised stages carry their shift in beta; bias must be zero"
                            .into(),
                    });
                }
                b.validate().map_err(|e| NetworkError::Shape {
                    layer: i,
                    message: e.to_string(),
                })?;
            }
        }
        let labels = Labels::generated(spec.num_classes);
        let mut net = Self {
            spec,
            params,
            digest: String::new(),
            labels,
        };
        net.digest = digest_hex(&save_weights(&net));
        Ok(net)
    }

    /// All weights, biases and BN shifts zero, BN scale zero, running variance zero.
    pub fn zeros(spec: NetworkSpec) -> Self {
        let params = (0..spec.layers.len())
            .map(|i| {
                parameter_templates(&spec, i)
                    .into_iter()
                    .map(|mut p| {
                        if let Some(bn) = &mut p.batchnorm {
                            bn.gamma.fill(0.0);
                            bn.running_var.fill(0.0);
                        }
                        p
                    })
                    .collect()
            })
            .collect();
        Self::from_params(spec, params).expect("templates match their own geometry")
    }

    /// Deterministic pseudo-random weights scaled by fan-in, with unit BatchNorm.
    pub fn random(spec: NetworkSpec, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = (0..spec.layers.len())
            .map(|i| {
                parameter_templates(&spec, i)
                    .into_iter()
                    .map(|mut p| {
                        let fan_in = (p.in_channels / p.groups) * p.kernel.0 * p.kernel.1;
                        let bound = (3.0 / fan_in as f32).sqrt();
                        p.weights
                            .iter_mut()
                            .for_each(|w| *w = rng.gen_range(-bound..bound));
                        match &mut p.batchnorm {
                            Some(bn) => {
                                bn.gamma.iter_mut().for_each(|g| *g = rng.gen_range(0.5..1.5));
                                bn.beta.iter_mut().for_each(|b| *b = rng.gen_range(-0.1..0.1));
                                bn.running_mean.iter_mut().for_each(|m| *m = rng.gen_range(-0.1..0.1));
                                bn.running_var.iter_mut().for_each(|v| *v = rng.gen_range(0.5..1.5));
                            }
                            None => p.bias.iter_mut().for_each(|b| *b = rng.gen_range(-0.5..0.5)),
                        }
                        p
                    })
                    .collect()
            })
            .collect();
        Self::from_params(spec, params).expect("templates match their own geometry")
    }

    pub fn with_labels(mut self, labels: Labels) -> Result<Self, NetworkError> {
        if labels.len() != self.spec.num_classes {
            return Err(NetworkError::LabelCount {
                labels: labels.len(),
                classes: self.spec.num_classes,
            });
        }
        self.labels = labels;
        Ok(self)
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn params(&self) -> &[Vec<ConvParams>] {
        &self.params
    }

    pub fn layer_params(&self, layer: usize) -> &[ConvParams] {
        &self.params[layer]
    }

    pub fn layer_params_mut(&mut self, layer: usize) -> &mut [ConvParams] {
        &mut self.params[layer]
    }

    /// SHA-256 of the Darknet serialisation of these weights.
    pub fn digest(&self) -> &str {
        &self.digest
    }

    pub fn labels(&self) -> &Labels {
        &self.labels
    }

    pub fn param_count(&self) -> u64 {
        count_params(&self.spec)
    }

    pub fn flop_count(&self) -> u64 {
        count_flops(&self.spec)
    }

    /// Runs the graph and returns the terminal outputs: the raw yolo feature
    /// maps for a detector, the class-probability vector for a classifier.
    pub fn forward(&self, input: &Tensor) -> Result<Vec<Tensor>, NetworkError> {
        if input.shape() != self.spec.input {
            return Err(NetworkError::InputExtent {
                expected: self.spec.input,
                actual: input.shape(),
            });
        }
        let layers = &self.spec.layers;
        if layers.is_empty() {
            return Ok(vec![input.clone()]);
        }
        let terminals = self.spec.terminal_layers();
        let last_use = last_uses(&self.spec, &terminals);
        let mut outputs: Vec<Option<Arc<Tensor>>> = vec![None; layers.len()];
        let mut current = Arc::new(input.clone());
        for layer in layers {
            let i = layer.index;
            let out = match &layer.kind {
                LayerKind::Convolutional(c) => {
                    let mut t = tensor::conv2d(&current, &self.params[i][0])?;
                    c.activation.apply_in_place(t.data_mut());
                    Arc::new(t)
                }
                LayerKind::MaxPool { size, stride } => {
                    Arc::new(tensor::maxpool(&current, *size, *stride)?)
                }
                LayerKind::Upsample { factor } => {
                    Arc::new(tensor::upsample_nearest(&current, *factor)?)
                }
                LayerKind::Route { sources } => {
                    let fetch = |s: usize| {
                        outputs[s]
                            .clone()
                            .expect("route source retained until last use")
                    };
                    let mut acc = fetch(sources[0]);
                    for &s in &sources[1..] {
                        acc = Arc::new(tensor::concat_channels(&acc, &fetch(s))?);
                    }
                    acc
                }
                LayerKind::Yolo(_) => current.clone(),
                LayerKind::DepthwiseBlock { .. } => {
                    let blocks = &self.params[i];
                    let mut mid = tensor::conv2d(&current, &blocks[0])?;
                    Activation::Relu6.apply_in_place(mid.data_mut());
                    let mut t = tensor::conv2d(&mid, &blocks[1])?;
                    Activation::Relu6.apply_in_place(t.data_mut());
                    Arc::new(t)
                }
                LayerKind::GlobalPool => Arc::new(tensor::global_avg_pool(&current)),
                LayerKind::DenseSoftmax { .. } => {
                    let logits = tensor::conv2d(&current, &self.params[i][0])?;
                    Arc::new(tensor::softmax(&logits)?)
                }
            };
            for (j, slot) in outputs.iter_mut().enumerate().take(i) {
                if last_use[j] <= i && !terminals.contains(&j) {
                    *slot = None;
                }
            }
            if last_use[i] > i || terminals.contains(&i) {
                outputs[i] = Some(out.clone());
            }
            current = out;
        }
        Ok(terminals
            .iter()
            .map(|&t| {
                let out = outputs[t].take().expect("terminal output retained");
                Arc::try_unwrap(out).unwrap_or_else(|shared| (*shared).clone())
            })
            .collect())
    }
}

/// For each layer, the index of the last layer that reads its output.
fn last_uses(spec: &NetworkSpec, terminals: &[usize]) -> Vec<usize> {
    let n = spec.layers.len();
    let mut last: Vec<usize> = (0..n).map(|i| (i + 1).min(n - 1)).collect();
    for layer in &spec.layers {
        if let LayerKind::Route { sources } = &layer.kind {
            for &s in sources {
                last[s] = last[s].max(layer.index);
            }
        }
    }
    for &t in terminals {
        last[t] = n;
    }
    last
}

pub(crate) fn digest_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}
