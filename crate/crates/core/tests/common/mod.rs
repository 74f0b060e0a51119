//! Independent reference implementations and fixtures shared by the
//! integration tests. Nothing here calls into the kernels it checks.

#![allow(dead_code)]

use std::io::Cursor;

use image::{Rgb, RgbImage};
use obi_core::detect::{BBox, Detection};
use obi_core::tensor::{BatchNorm, ConvParams, Shape, Tensor};
use rand::Rng;

/// Plain nested-loop grouped convolution, BN after bias, no activation.
pub fn conv_oracle(input: &Tensor, p: &ConvParams) -> Tensor {
    let (c, h, w) = (input.channels(), input.height(), input.width());
    assert_eq!(c, p.in_channels);
    let (kh, kw) = p.kernel;
    let oh = (h + 2 * p.padding - kh) / p.stride + 1;
    let ow = (w + 2 * p.padding - kw) / p.stride + 1;
    let in_g = p.in_channels / p.groups;
    let out_g = p.out_channels / p.groups;
    let mut out = vec![0.0f64; p.out_channels * oh * ow];
    for oc in 0..p.out_channels {
        let g = oc / out_g;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = p.bias[oc] as f64;
                for icg in 0..in_g {
                    let ic = g * in_g + icg;
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let iy = (oy * p.stride + ky) as isize - p.padding as isize;
                            let ix = (ox * p.stride + kx) as isize - p.padding as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            let wv = p.weights[((oc * in_g + icg) * kh + ky) * kw + kx];
                            acc += wv as f64 * input.get(ic, iy as usize, ix as usize) as f64;
                        }
                    }
                }
                if let Some(bn) = &p.batchnorm {
                    acc = bn.gamma[oc] as f64 * (acc - bn.running_mean[oc] as f64)
                        / (bn.running_var[oc] as f64 + bn.epsilon as f64).sqrt()
                        + bn.beta[oc] as f64;
                }
                out[(oc * oh + oy) * ow + ox] = acc;
            }
        }
    }
    Tensor::new(
        Shape::new(p.out_channels, oh, ow),
        out.into_iter().map(|v| v as f32).collect(),
    )
    .unwrap()
}

/// Window max where positions past the right/bottom edge are skipped.
pub fn maxpool_oracle(input: &Tensor, size: usize, stride: usize) -> Tensor {
    let (c, h, w) = (input.channels(), input.height(), input.width());
    let oh = (h - 1) / stride + 1;
    let ow = (w - 1) / stride + 1;
    let mut out = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut m = f32::NEG_INFINITY;
                for dy in 0..size {
                    for dx in 0..size {
                        let (y, x) = (oy * stride + dy, ox * stride + dx);
                        if y < h && x < w {
                            m = m.max(input.get(ch, y, x));
                        }
                    }
                }
                out.push(m);
            }
        }
    }
    Tensor::new(Shape::new(c, oh, ow), out).unwrap()
}

pub fn upsample_oracle(input: &Tensor, factor: usize) -> Tensor {
    let s = input.shape();
    Tensor::from_fn(
        Shape::new(s.channels, s.height * factor, s.width * factor),
        |c, y, x| input.get(c, y / factor, x / factor),
    )
}

pub fn max_abs_diff(a: &Tensor, b: &Tensor) -> f32 {
    assert_eq!(a.shape(), b.shape());
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f32::max)
}

pub fn random_tensor(rng: &mut impl Rng, shape: Shape) -> Tensor {
    Tensor::from_fn(shape, |_, _, _| rng.gen_range(-1.0..1.0))
}

pub fn random_conv(
    rng: &mut impl Rng,
    in_c: usize,
    out_c: usize,
    k: usize,
    stride: usize,
    pad: usize,
    groups: usize,
    with_bn: bool,
) -> ConvParams {
    let mut p = ConvParams::zeros(in_c, out_c, (k, k), stride, pad, groups);
    p.weights.iter_mut().for_each(|w| *w = rng.gen_range(-1.0..1.0));
    if with_bn {
        let mut bn = BatchNorm::identity(out_c);
        for i in 0..out_c {
            bn.gamma[i] = rng.gen_range(0.5..1.5);
            bn.beta[i] = rng.gen_range(-0.5..0.5);
            bn.running_mean[i] = rng.gen_range(-0.5..0.5);
            bn.running_var[i] = rng.gen_range(0.5..1.5);
        }
        p.batchnorm = Some(bn);
    } else {
        p.bias.iter_mut().for_each(|b| *b = rng.gen_range(-1.0..1.0));
    }
    p
}

/// Exhaustive greedy-NMS reference. Priority ranks come from pairwise
/// counting and suppression from a full IoU matrix.
pub fn nms_reference(dets: &[Detection], thr: f32) -> Vec<usize> {
    let n = dets.len();
    let before = |j: usize, i: usize| {
        let (a, b) = (&dets[j], &dets[i]);
        a.confidence > b.confidence
            || (a.confidence == b.confidence
                && (a.class_index < b.class_index || (a.class_index == b.class_index && j < i)))
    };
    let rank: Vec<usize> = (0..n)
        .map(|i| (0..n).filter(|&j| j != i && before(j, i)).count())
        .collect();
    let mut by_rank = vec![usize::MAX; n];
    for (i, &r) in rank.iter().enumerate() {
        by_rank[r] = i;
    }
    let overlap: Vec<Vec<bool>> = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| {
                    dets[i].class_index == dets[j].class_index
                        && iou_oracle(&dets[i].bbox, &dets[j].bbox) > thr
                })
                .collect()
        })
        .collect();
    let mut kept = vec![false; n];
    for &i in &by_rank {
        kept[i] = !(0..n).any(|j| kept[j] && overlap[j][i]);
    }
    by_rank.into_iter().filter(|&i| kept[i]).collect()
}

pub fn iou_oracle(a: &BBox, b: &BBox) -> f32 {
    let (ax0, ay0, ax1, ay1) = (a.x - a.w / 2.0, a.y - a.h / 2.0, a.x + a.w / 2.0, a.y + a.h / 2.0);
    let (bx0, by0, bx1, by1) = (b.x - b.w / 2.0, b.y - b.h / 2.0, b.x + b.w / 2.0, b.y + b.h / 2.0);
    let iw = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
    let ih = (ay1.min(by1) - ay0.max(by0)).max(0.0);
    let inter = iw * ih;
    let union = a.w * a.h + b.w * b.h - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

pub fn detection(x: f32, y: f32, w: f32, h: f32, class_index: usize, confidence: f32) -> Detection {
    Detection {
        bbox: BBox::new(x, y, w, h),
        class_index,
        class_name: format!("class_{class_index}"),
        confidence,
        origin: None,
    }
}

/// A deterministic textured image, different per `seed`.
pub fn synthetic_image(width: u32, height: u32, seed: u32) -> RgbImage {
    RgbImage::from_fn(width, height, |x, y| {
        let v = x.wrapping_mul(7 + seed) ^ y.wrapping_mul(13 + 3 * seed);
        Rgb([(v % 251) as u8, ((v / 3 + seed * 40) % 256) as u8, ((x + y + seed) % 256) as u8])
    })
}

pub fn png_bytes(image: &RgbImage) -> Vec<u8> {
    let mut buf = Cursor::new(Vec::new());
    image.write_to(&mut buf, image::ImageFormat::Png).unwrap();
    buf.into_inner()
}

/// All-point AP computed as a sum over recall steps of the best precision
/// reachable at or beyond each step.
pub fn ap_oracle(scored: &[(f32, bool)], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    let mut idx: Vec<usize> = (0..scored.len()).collect();
    idx.sort_by(|&a, &b| scored[b].0.partial_cmp(&scored[a].0).unwrap().then(a.cmp(&b)));
    let mut points = Vec::new();
    let mut tp = 0;
    for (k, &i) in idx.iter().enumerate() {
        if scored[i].1 {
            tp += 1;
        }
        points.push((tp as f64 / n_gt as f64, tp as f64 / (k + 1) as f64));
    }
    let mut ap = 0.0;
    let mut last = 0.0;
    for &(r, _) in &points {
        if r > last {
            let best = points.iter().filter(|q| q.0 >= r).map(|q| q.1).fold(0.0, f64::max);
            ap += (r - last) * best;
            last = r;
        }
    }
    ap
}
