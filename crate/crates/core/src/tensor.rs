//! Dense CHW tensors and the inference kernels used by both networks.
//!
//! All kernels are pure functions over immutable inputs. Data is stored
//! channel-major, then row-major; shapes are printed in `W×H×C` order to
//! match how layer tables are usually written.

use std::fmt;

use rayon::prelude::*;
use thiserror::Error;

/// BatchNorm epsilon used by Darknet convolutional layers.
pub const BATCHNORM_EPSILON: f32 = 1e-5;

/// Minimum multiply-accumulate work per output channel before conv2d fans
/// out across threads.
const PARALLEL_MAC_THRESHOLD: usize = 1 << 15;
const GEMM_MAC_THRESHOLD: usize = 1 << 14;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("tensor dimensions must be at least 1, got {0}")]
    ZeroExtent(Shape),
    #[error("data length {actual} does not match shape {shape} (expected {expected})")]
    DataLength {
        shape: Shape,
        expected: usize,
        actual: usize,
    },
    #[error("channel mismatch: expected {expected} input channels, got {actual}")]
    ChannelMismatch { expected: usize, actual: usize },
    #[error("spatial mismatch: {a} and {b} differ in height or width")]
    SpatialMismatch { a: Shape, b: Shape },
    #[error("kernel {kh}x{kw} does not fit padded input {shape} (padding {padding})")]
    KernelTooLarge {
        kh: usize,
        kw: usize,
        padding: usize,
        shape: Shape,
    },
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
}

/// Extents of a tensor. Stored as (channels, height, width); displayed as `W×H×C`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape {
    pub const fn new(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
        }
    }

    pub const fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub const fn plane(&self) -> usize {
        self.height * self.width
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}×{}×{}", self.width, self.height, self.channels)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Shape, data: Vec<f32>) -> Result<Self, TensorError> {
        if shape.channels == 0 || shape.height == 0 || shape.width == 0 {
            return Err(TensorError::ZeroExtent(shape));
        }
        if data.len() != shape.len() {
            return Err(TensorError::DataLength {
                shape,
                expected: shape.len(),
                actual: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize) -> f32) -> Self {
        assert!(!shape.is_empty(), "tensor dimensions must be at least 1");
        let mut data = Vec::with_capacity(shape.len());
        for c in 0..shape.channels {
            for y in 0..shape.height {
                for x in 0..shape.width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self { shape, data }
    }

    pub fn filled(shape: Shape, value: f32) -> Self {
        assert!(!shape.is_empty(), "tensor dimensions must be at least 1");
        Self {
            shape,
            data: vec![value; shape.len()],
        }
    }

    pub fn zeros(shape: Shape) -> Self {
        Self::filled(shape, 0.0)
    }

    /// A `C×1×1` vector.
    pub fn vector(values: Vec<f32>) -> Result<Self, TensorError> {
        Self::new(Shape::new(values.len(), 1, 1), values)
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn channels(&self) -> usize {
        self.shape.channels
    }

    pub fn height(&self) -> usize {
        self.shape.height
    }

    pub fn width(&self) -> usize {
        self.shape.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.shape.height + y) * self.shape.width + x]
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let plane = self.shape.plane();
        &self.data[c * plane..(c + 1) * plane]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Copies channels `start..end` into a new tensor.
    pub fn slice_channels(&self, start: usize, end: usize) -> Result<Tensor, TensorError> {
        if start >= end || end > self.shape.channels {
            return Err(TensorError::InvalidParams(format!(
                "channel range {start}..{end} outside 0..{}",
                self.shape.channels
            )));
        }
        let plane = self.shape.plane();
        Tensor::new(
            Shape::new(end - start, self.shape.height, self.shape.width),
            self.data[start * plane..end * plane].to_vec(),
        )
    }

    fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
    pub epsilon: f32,
}

impl BatchNorm {
    /// Unit scale, zero shift: normalisation is the identity.
    pub fn identity(channels: usize) -> Self {
        Self {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0 - BATCHNORM_EPSILON; channels],
            epsilon: BATCHNORM_EPSILON,
        }
    }
}

/// Weights and geometry for one (possibly grouped) 2-D convolution.
///
/// `weights` is laid out `(out_channel, in_channel / groups, kh, kw)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams {
    pub out_channels: usize,
    pub in_channels: usize,
    pub kernel: (usize, usize),
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
    pub weights: Vec<f32>,
    pub bias: Vec<f32>,
    pub batchnorm: Option<BatchNorm>,
}

impl ConvParams {
    /// Zero weights and bias with the given geometry.
    pub fn zeros(
        in_channels: usize,
        out_channels: usize,
        kernel: (usize, usize),
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Self {
        let per_group = if groups == 0 { 0 } else { in_channels / groups };
        Self {
            out_channels,
            in_channels,
            kernel,
            stride,
            padding,
            groups,
            weights: vec![0.0; out_channels * per_group * kernel.0 * kernel.1],
            bias: vec![0.0; out_channels],
            batchnorm: None,
        }
    }

    pub fn weight_len(&self) -> usize {
        self.out_channels * (self.in_channels / self.groups.max(1)) * self.kernel.0 * self.kernel.1
    }

    pub fn validate(&self) -> Result<(), TensorError> {
        let bad = |msg: String| Err(TensorError::InvalidParams(msg));
        if self.out_channels == 0 || self.in_channels == 0 {
            return bad("channel counts must be at least 1".into());
        }
        if self.kernel.0 == 0 || self.kernel.1 == 0 || self.stride == 0 {
            return bad("kernel extent and stride must be at least 1".into());
        }
        if self.groups == 0
            || self.in_channels % self.groups != 0
            || self.out_channels % self.groups != 0
        {
            return bad(format!(
                "groups {} must divide in_channels {} and out_channels {}",
                self.groups, self.in_channels, self.out_channels
            ));
        }
        if self.weights.len() != self.weight_len() {
            return bad(format!(
                "expected {} weights, got {}",
                self.weight_len(),
                self.weights.len()
            ));
        }
        if self.bias.len() != self.out_channels {
            return bad(format!(
                "expected {} bias values, got {}",
                self.out_channels,
                self.bias.len()
            ));
        }
        if let Some(bn) = &self.batchnorm {
            let n = self.out_channels;
            if bn.gamma.len() != n
                || bn.beta.len() != n
                || bn.running_mean.len() != n
                || bn.running_var.len() != n
            {
                return bad(format!("batchnorm vectors must have {n} entries"));
            }
            if bn.running_var.iter().any(|&v| v < 0.0) {
                return bad("batchnorm running variance must be non-negative".into());
            }
        }
        Ok(())
    }

    /// Output shape for an input of the given shape.
    pub fn output_shape(&self, input: Shape) -> Result<Shape, TensorError> {
        if input.channels != self.in_channels {
            return Err(TensorError::ChannelMismatch {
                expected: self.in_channels,
                actual: input.channels,
            });
        }
        let (kh, kw) = self.kernel;
        let ph = input.height + 2 * self.padding;
        let pw = input.width + 2 * self.padding;
        if kh > ph || kw > pw {
            return Err(TensorError::KernelTooLarge {
                kh,
                kw,
                padding: self.padding,
                shape: input,
            });
        }
        Ok(Shape::new(
            self.out_channels,
            (ph - kh) / self.stride + 1,
            (pw - kw) / self.stride + 1,
        ))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    Linear,
    Leaky(f32),
    Relu6,
}

impl Activation {
    /// Darknet's leaky ReLU slope.
    pub const DARKNET_LEAKY: Activation = Activation::Leaky(0.1);

    #[inline]
    pub fn apply_scalar(self, v: f32) -> f32 {
        match self {
            Activation::Linear => v,
            Activation::Leaky(alpha) => {
                if v >= 0.0 {
                    v
                } else {
                    alpha * v
                }
            }
            Activation::Relu6 => v.clamp(0.0, 6.0),
        }
    }

    pub fn apply(self, input: &Tensor) -> Tensor {
        match self {
            Activation::Linear => input.clone(),
            _ => input.map(|v| self.apply_scalar(v)),
        }
    }

    pub(crate) fn apply_in_place(self, data: &mut [f32]) {
        if self != Activation::Linear {
            data.iter_mut().for_each(|v| *v = self.apply_scalar(*v));
        }
    }
}

/// Adds `weight * input[iy, ix]` into every output cell whose receptive
/// field covers kernel tap `(ky, kx)`.
#[allow(clippy::too_many_arguments)]
fn accumulate_tap(
    out: &mut [f32],
    out_h: usize,
    out_w: usize,
    plane: &[f32],
    in_h: usize,
    in_w: usize,
    weight: f32,
    ky: usize,
    kx: usize,
    stride: usize,
    padding: usize,
) {
    // ix = ox * stride + kx - padding must land in [0, in_w)
    let ox_lo = if kx >= padding {
        0
    } else {
        (padding - kx).div_ceil(stride)
    };
    let ox_hi = {
        let limit = in_w + padding;
        if limit <= kx {
            0
        } else {
            ((limit - kx - 1) / stride + 1).min(out_w)
        }
    };
    if ox_lo >= ox_hi {
        return;
    }
    for oy in 0..out_h {
        let iy = oy * stride + ky;
        if iy < padding || iy - padding >= in_h {
            continue;
        }
        let in_row = &plane[(iy - padding) * in_w..(iy - padding + 1) * in_w];
        let out_row = &mut out[oy * out_w + ox_lo..oy * out_w + ox_hi];
        let ix0 = ox_lo * stride + kx - padding;
        if stride == 1 {
            let src = &in_row[ix0..ix0 + out_row.len()];
            for (o, &i) in out_row.iter_mut().zip(src) {
                *o += weight * i;
            }
        } else {
            for (n, o) in out_row.iter_mut().enumerate() {
                *o += weight * in_row[ix0 + n * stride];
            }
        }
    }
}

fn conv_output_channel(input: &Tensor, p: &ConvParams, out_shape: Shape, oc: usize, out: &mut [f32]) {
    let (kh, kw) = p.kernel;
    let in_per_group = p.in_channels / p.groups;
    let out_per_group = p.out_channels / p.groups;
    let group = oc / out_per_group;
    out.fill(p.bias[oc]);
    for icg in 0..in_per_group {
        let ic = group * in_per_group + icg;
        let plane = input.channel(ic);
        let base = (oc * in_per_group + icg) * kh * kw;
        for ky in 0..kh {
            for kx in 0..kw {
                let w = p.weights[base + ky * kw + kx];
                if w == 0.0 {
                    continue;
                }
                accumulate_tap(
                    out,
                    out_shape.height,
                    out_shape.width,
                    plane,
                    input.height(),
                    input.width(),
                    w,
                    ky,
                    kx,
                    p.stride,
                    p.padding,
                );
            }
        }
    }
    apply_batchnorm(p, oc, out);
}

fn apply_batchnorm(p: &ConvParams, oc: usize, out: &mut [f32]) {
    if let Some(bn) = &p.batchnorm {
        let scale = bn.gamma[oc] / (bn.running_var[oc] + bn.epsilon).sqrt();
        let mean = bn.running_mean[oc];
        let beta = bn.beta[oc];
        out.iter_mut().for_each(|v| *v = (*v - mean) * scale + beta);
    }
}

/// Unfolds the receptive fields into a `(in · kh · kw) × (out_h · out_w)` matrix.
fn im2col(input: &Tensor, p: &ConvParams, out_shape: Shape) -> Vec<f32> {
    let (kh, kw) = p.kernel;
    let (in_h, in_w) = (input.height(), input.width());
    let (out_h, out_w) = (out_shape.height, out_shape.width);
    let n = out_h * out_w;
    let mut col = vec![0.0f32; p.in_channels * kh * kw * n];
    col.par_chunks_mut(kh * kw * n)
        .enumerate()
        .for_each(|(ic, block)| {
            let plane = input.channel(ic);
            for ky in 0..kh {
                for kx in 0..kw {
                    let row = &mut block[(ky * kw + kx) * n..(ky * kw + kx + 1) * n];
                    for oy in 0..out_h {
                        let iy = oy * p.stride + ky;
                        if iy < p.padding || iy - p.padding >= in_h {
                            continue;
                        }
                        let src = &plane[(iy - p.padding) * in_w..(iy - p.padding + 1) * in_w];
                        let dst = &mut row[oy * out_w..(oy + 1) * out_w];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = ox * p.stride + kx;
                            if ix >= p.padding && ix - p.padding < in_w {
                                *d = src[ix - p.padding];
                            }
                        }
                    }
                }
            }
        });
    col
}

fn conv_gemm(input: &Tensor, p: &ConvParams, out_shape: Shape, data: &mut [f32]) {
    let n = out_shape.plane();
    let k = p.in_channels * p.kernel.0 * p.kernel.1;
    let pointwise = p.kernel == (1, 1) && p.stride == 1 && p.padding == 0;
    let unfolded;
    let col: &[f32] = if pointwise {
        input.data()
    } else {
        unfolded = im2col(input, p, out_shape);
        &unfolded
    };
    for (oc, out) in data.chunks_mut(n).enumerate() {
        out.fill(p.bias[oc]);
    }
    // SAFETY: the three buffers are distinct allocations with the row-major
    // strides below and lengths m·k, k·n and m·n.
    unsafe {
        matrixmultiply::sgemm(
            p.out_channels,
            k,
            n,
            1.0,
            p.weights.as_ptr(),
            k as isize,
            1,
            col.as_ptr(),
            n as isize,
            1,
            1.0,
            data.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    data.par_chunks_mut(n)
        .enumerate()
        .for_each(|(oc, out)| apply_batchnorm(p, oc, out));
}

/// Grouped 2-D convolution with optional inference-time batch normalisation.
///
/// BatchNorm, when present, is applied to `conv + bias` as
/// `gamma * (x - mean) / sqrt(var + eps) + beta`. No activation is applied.
pub fn conv2d(input: &Tensor, p: &ConvParams) -> Result<Tensor, TensorError> {
    p.validate()?;
    let out_shape = p.output_shape(input.shape())?;
    let plane = out_shape.plane();
    let mut data = vec![0.0f32; out_shape.len()];
    let macs_per_channel = plane * (p.in_channels / p.groups) * p.kernel.0 * p.kernel.1;
    let macs = macs_per_channel * p.out_channels;
    if p.groups == 1 && macs >= GEMM_MAC_THRESHOLD {
        conv_gemm(input, p, out_shape, &mut data);
    } else if macs >= PARALLEL_MAC_THRESHOLD && p.out_channels > 1 {
        data.par_chunks_mut(plane)
            .enumerate()
            .for_each(|(oc, out)| conv_output_channel(input, p, out_shape, oc, out));
    } else {
        data.chunks_mut(plane)
            .enumerate()
            .for_each(|(oc, out)| conv_output_channel(input, p, out_shape, oc, out));
    }
    Tensor::new(out_shape, data)
}

/// Depthwise 3×3 (or any `groups == channels`) convolution followed by a
/// 1×1 pointwise convolution. Activations between the two are the caller's
/// concern; this is exactly `conv2d(conv2d(input, dw), pw)`.
pub fn depthwise_separable(
    input: &Tensor,
    dw: &ConvParams,
    pw: &ConvParams,
) -> Result<Tensor, TensorError> {
    if dw.groups != input.channels() || dw.in_channels != input.channels() {
        return Err(TensorError::InvalidParams(format!(
            "depthwise stage needs groups == in_channels == {}, got groups {} in_channels {}",
            input.channels(),
            dw.groups,
            dw.in_channels
        )));
    }
    if pw.kernel != (1, 1) {
        return Err(TensorError::InvalidParams(format!(
            "pointwise stage must be 1x1, got {}x{}",
            pw.kernel.0, pw.kernel.1
        )));
    }
    if pw.in_channels != dw.out_channels {
        return Err(TensorError::ChannelMismatch {
            expected: pw.in_channels,
            actual: dw.out_channels,
        });
    }
    let mid = conv2d(input, dw)?;
    conv2d(&mid, pw)
}

/// Output extent of a Darknet max-pool along one axis: `⌊(n − 1) / stride⌋ + 1`.
///
/// Windows that run off the right or bottom edge only see real cells, which
/// is what makes the size-2/stride-1 pool extent-preserving.
pub fn maxpool_extent(n: usize, stride: usize) -> usize {
    (n - 1) / stride + 1
}

pub fn maxpool(input: &Tensor, size: usize, stride: usize) -> Result<Tensor, TensorError> {
    if size == 0 || stride == 0 {
        return Err(TensorError::InvalidParams(
            "pool size and stride must be at least 1".into(),
        ));
    }
    let (h, w) = (input.height(), input.width());
    let out_shape = Shape::new(
        input.channels(),
        maxpool_extent(h, stride),
        maxpool_extent(w, stride),
    );
    let mut data = Vec::with_capacity(out_shape.len());
    for c in 0..input.channels() {
        let plane = input.channel(c);
        for oy in 0..out_shape.height {
            let y0 = oy * stride;
            let y1 = (y0 + size).min(h);
            for ox in 0..out_shape.width {
                let x0 = ox * stride;
                let x1 = (x0 + size).min(w);
                let mut best = f32::MIN;
                for y in y0..y1 {
                    for &v in &plane[y * w + x0..y * w + x1] {
                        if v > best {
                            best = v;
                        }
                    }
                }
                data.push(best);
            }
        }
    }
    Tensor::new(out_shape, data)
}

pub fn upsample_nearest(input: &Tensor, factor: usize) -> Result<Tensor, TensorError> {
    if factor == 0 {
        return Err(TensorError::InvalidParams(
            "upsample factor must be at least 1".into(),
        ));
    }
    if factor == 1 {
        return Ok(input.clone());
    }
    let s = input.shape();
    let out_shape = Shape::new(s.channels, s.height * factor, s.width * factor);
    let mut data = Vec::with_capacity(out_shape.len());
    for c in 0..s.channels {
        let plane = input.channel(c);
        for oy in 0..out_shape.height {
            let row = &plane[(oy / factor) * s.width..(oy / factor + 1) * s.width];
            for &v in row {
                data.extend(std::iter::repeat_n(v, factor));
            }
        }
    }
    Tensor::new(out_shape, data)
}

/// Stacks `b`'s channels after `a`'s.
pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
    if a.height() != b.height() || a.width() != b.width() {
        return Err(TensorError::SpatialMismatch {
            a: a.shape(),
            b: b.shape(),
        });
    }
    let mut data = Vec::with_capacity(a.data.len() + b.data.len());
    data.extend_from_slice(&a.data);
    data.extend_from_slice(&b.data);
    Tensor::new(
        Shape::new(a.channels() + b.channels(), a.height(), a.width()),
        data,
    )
}

pub fn leaky_relu(input: &Tensor, alpha: f32) -> Tensor {
    Activation::Leaky(alpha).apply(input)
}

pub fn relu6(input: &Tensor) -> Tensor {
    Activation::Relu6.apply(input)
}

/// Numerically stable softmax over a `C×1×1` logit vector.
pub fn softmax(input: &Tensor) -> Result<Tensor, TensorError> {
    if input.height() != 1 || input.width() != 1 {
        return Err(TensorError::InvalidParams(format!(
            "softmax expects a C×1×1 vector, got {}",
            input.shape()
        )));
    }
    let max = input.data.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let exps: Vec<f64> = input
        .data
        .iter()
        .map(|&v| f64::from(v - max).exp())
        .collect();
    let sum: f64 = exps.iter().sum();
    Tensor::vector(exps.into_iter().map(|e| (e / sum) as f32).collect())
}

pub fn global_avg_pool(input: &Tensor) -> Tensor {
    let plane = input.shape().plane();
    let data = (0..input.channels())
        .map(|c| {
            let sum: f64 = input.channel(c).iter().map(|&v| f64::from(v)).sum();
            (sum / plane as f64) as f32
        })
        .collect();
    Tensor {
        shape: Shape::new(input.channels(), 1, 1),
        data,
    }
}
