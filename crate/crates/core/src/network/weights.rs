//! Darknet `.weights` serialisation.
//!
//! Layout (little-endian): `major: i32, minor: i32, revision: i32`, then
//! `seen` as `u64` when `major * 10 + minor >= 2` and as `u32` otherwise,
//! then raw `f32` values. Each conv stage stores `[beta, gamma, mean, var]`
//! when batch-normalised (a bias otherwise) followed by its weights in
//! `(out, in, kh, kw)` order.

use thiserror::Error;

use super::{digest_hex, parameter_templates, LoadedNetwork, NetworkSpec};
use crate::tensor::ConvParams;

#[derive(Debug, Error, PartialEq)]
pub enum WeightsError {
    #[error("bad weights header: {0}")]
    BadHeader(String),
    #[error(
        "weights file truncated in layer {layer}: expected {expected} floats, found {actual}"
    )]
    Truncated {
        layer: usize,
        expected: usize,
        actual: usize,
    },
    #[error("weights file has {extra} trailing bytes after {expected} floats")]
    TrailingBytes { expected: usize, extra: usize },
    #[error("layer {layer}: {message}")]
    Invalid { layer: usize, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WeightsHeader {
    pub major: i32,
    pub minor: i32,
    pub revision: i32,
    pub seen: u64,
}

impl WeightsHeader {
    pub const CURRENT: WeightsHeader = WeightsHeader {
        major: 2,
        minor: 0,
        revision: 0,
        seen: 0,
    };

    fn wide_seen(major: i32, minor: i32) -> bool {
        major * 10 + minor >= 2
    }

    pub fn byte_len(&self) -> usize {
        if Self::wide_seen(self.major, self.minor) {
            20
        } else {
            16
        }
    }

    pub fn parse(bytes: &[u8]) -> Result<Self, WeightsError> {
        let word = |i: usize| -> Result<[u8; 4], WeightsError> {
            bytes
                .get(i * 4..i * 4 + 4)
                .map(|b| b.try_into().expect("4-byte slice"))
                .ok_or_else(|| {
                    WeightsError::BadHeader(format!(
                        "need at least 12 bytes for the version, file has {}",
                        bytes.len()
                    ))
                })
        };
        let major = i32::from_le_bytes(word(0)?);
        let minor = i32::from_le_bytes(word(1)?);
        let revision = i32::from_le_bytes(word(2)?);
        if !(0..1000).contains(&major) || !(0..1000).contains(&minor) || revision < 0 {
            return Err(WeightsError::BadHeader(format!(
                "implausible version {major}.{minor}.{revision}"
            )));
        }
        let seen = if Self::wide_seen(major, minor) {
            let b = bytes.get(12..20).ok_or_else(|| {
                WeightsError::BadHeader("missing 64-bit `seen` counter".into())
            })?;
            u64::from_le_bytes(b.try_into().expect("8-byte slice"))
        } else {
            u64::from(u32::from_le_bytes(word(3).map_err(|_| {
                WeightsError::BadHeader("missing 32-bit `seen` counter".into())
            })?))
        };
        Ok(Self {
            major,
            minor,
            revision,
            seen,
        })
    }

    pub fn write(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.major.to_le_bytes());
        out.extend_from_slice(&self.minor.to_le_bytes());
        out.extend_from_slice(&self.revision.to_le_bytes());
        if Self::wide_seen(self.major, self.minor) {
            out.extend_from_slice(&self.seen.to_le_bytes());
        } else {
            out.extend_from_slice(&(self.seen as u32).to_le_bytes());
        }
    }
}

/// Float count of one stored stage: per-channel vectors then weights.
fn stage_floats(p: &ConvParams) -> usize {
    let per_channel = if p.batchnorm.is_some() { 4 } else { 1 };
    per_channel * p.out_channels + p.weight_len()
}

/// Binds a weight file to `spec`. The file must contain exactly the floats
/// the graph needs.
pub fn load_darknet_weights(
    spec: NetworkSpec,
    bytes: &[u8],
) -> Result<LoadedNetwork, WeightsError> {
    let header = WeightsHeader::parse(bytes)?;
    let body = &bytes[header.byte_len()..];
    let templates: Vec<Vec<ConvParams>> = (0..spec.layers.len())
        .map(|i| parameter_templates(&spec, i))
        .collect();
    let expected: usize = templates.iter().flatten().map(stage_floats).sum();
    let available = body.len() / 4;

    let mut cursor = 0usize;
    let mut take = |layer: usize, n: usize| -> Result<Vec<f32>, WeightsError> {
        if cursor + n > available {
            return Err(WeightsError::Truncated {
                layer,
                expected,
                actual: available,
            });
        }
        let values = body[cursor * 4..(cursor + n) * 4]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")))
            .collect();
        cursor += n;
        Ok(values)
    };

    let mut params = Vec::with_capacity(templates.len());
    for (layer, stages) in templates.into_iter().enumerate() {
        let mut bound = Vec::with_capacity(stages.len());
        for mut p in stages {
            let n = p.out_channels;
            match &mut p.batchnorm {
                Some(bn) => {
                    bn.beta = take(layer, n)?;
                    bn.gamma = take(layer, n)?;
                    bn.running_mean = take(layer, n)?;
                    bn.running_var = take(layer, n)?;
                }
                None => p.bias = take(layer, n)?,
            }
            p.weights = take(layer, p.weight_len())?;
            bound.push(p);
        }
        params.push(bound);
    }
    if body.len() != expected * 4 {
        return Err(WeightsError::TrailingBytes {
            expected,
            extra: body.len() - expected * 4,
        });
    }
    let mut net = LoadedNetwork::from_params(spec, params).map_err(|e| match e {
        super::NetworkError::Shape { layer, message } => WeightsError::Invalid { layer, message },
        other => WeightsError::Invalid {
            layer: 0,
            message: other.to_string(),
        },
    })?;
    net.digest = digest_hex(bytes);
    Ok(net)
}

/// Serialises weights with a version (2, 0, 0) header and `seen = 0`.
pub fn save_weights(net: &LoadedNetwork) -> Vec<u8> {
    let floats: usize = net.params.iter().flatten().map(stage_floats).sum();
    let mut out = Vec::with_capacity(20 + floats * 4);
    WeightsHeader::CURRENT.write(&mut out);
    let mut put = |values: &[f32]| {
        for v in values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    };
    for p in net.params.iter().flatten() {
        match &p.batchnorm {
            Some(bn) => {
                put(&bn.beta);
                put(&bn.gamma);
                put(&bn.running_mean);
                put(&bn.running_var);
            }
            None => put(&p.bias),
        }
        put(&p.weights);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{build_yolov3_tiny, Architecture, NetworkSpec};
    use crate::tensor::Shape;

    #[test]
    fn empty_network_is_header_only() {
        let spec = NetworkSpec::new(Architecture::Custom, Shape::new(1, 1, 1), 1, vec![]).unwrap();
        let bytes = save_weights(&LoadedNetwork::zeros(spec));
        assert_eq!(bytes.len(), 20);
        assert_eq!(&bytes[..4], &2i32.to_le_bytes());
        assert!(bytes[4..].iter().all(|&b| b == 0));
    }

    #[test]
    fn narrow_seen_for_old_versions() {
        let mut bytes = Vec::new();
        WeightsHeader {
            major: 0,
            minor: 1,
            revision: 0,
            seen: 7,
        }
        .write(&mut bytes);
        assert_eq!(bytes.len(), 16);
        let h = WeightsHeader::parse(&bytes).unwrap();
        assert_eq!(h.seen, 7);
        assert_eq!(h.byte_len(), 16);
    }

    #[test]
    fn short_and_implausible_headers() {
        assert!(matches!(
            WeightsHeader::parse(&[0; 8]),
            Err(WeightsError::BadHeader(_))
        ));
        let mut bytes = Vec::new();
        for v in [-1i32, 0, 0, 0, 0] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        assert!(matches!(
            WeightsHeader::parse(&bytes),
            Err(WeightsError::BadHeader(_))
        ));
        // version 2.0 needs 8 bytes of `seen`
        let mut bytes = Vec::new();
        for v in [2i32, 0, 0] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        bytes.extend_from_slice(&[0, 0, 0]);
        assert!(matches!(
            WeightsHeader::parse(&bytes),
            Err(WeightsError::BadHeader(_))
        ));
    }

    #[test]
    fn truncation_reports_layer() {
        let spec = build_yolov3_tiny(1).unwrap();
        let bytes = save_weights(&LoadedNetwork::zeros(spec.clone()));
        let err = load_darknet_weights(spec, &bytes[..bytes.len() - 4]).unwrap_err();
        let expected = (bytes.len() - 20) / 4;
        assert_eq!(
            err,
            WeightsError::Truncated {
                layer: 22,
                expected,
                actual: expected - 1
            }
        );
    }
}
