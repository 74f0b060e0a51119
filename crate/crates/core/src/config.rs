//! Plain-text `key=value` model configuration.
//!
//! ```text
//! # detector
//! classes = 27
//! anchors = 10,14, 23,27, 37,58, 81,82, 135,169, 344,319
//! masks = 3,4,5; 1,2,3
//! input_size = 416
//! ```
//!
//! `width_multiplier` (MobileNet α) is also accepted. Blank lines and `#`
//! comments are ignored; unknown keys are rejected.

use std::path::Path;

use thiserror::Error;

use crate::network::{DetectorConfig, DEFAULT_ANCHORS, DEFAULT_MASKS, DETECTOR_INPUT};

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("invalid value for `{key}`: {message}")]
    Value { key: String, message: String },
    #[error("cannot read config: {0}")]
    Io(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub classes: Option<usize>,
    pub anchors: Vec<(f32, f32)>,
    pub masks: [Vec<usize>; 2],
    pub input_size: usize,
    pub width_multiplier: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            classes: None,
            anchors: DEFAULT_ANCHORS.to_vec(),
            masks: [DEFAULT_MASKS[0].to_vec(), DEFAULT_MASKS[1].to_vec()],
            input_size: DETECTOR_INPUT,
            width_multiplier: 1.0,
        }
    }
}

fn value_err(key: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Value {
        key: key.to_string(),
        message: message.into(),
    }
}

fn parse_list<T: std::str::FromStr>(key: &str, text: &str) -> Result<Vec<T>, ConfigError> {
    text.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse()
                .map_err(|_| value_err(key, format!("`{s}` is not a valid number")))
        })
        .collect()
}

impl ModelConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: n + 1,
                message: format!("expected key=value, got `{line}`"),
            })?;
            let (key, value) = (key.trim(), value.trim());
            match key {
                "classes" => {
                    let c: usize = value
                        .parse()
                        .map_err(|_| value_err(key, "expected a positive integer"))?;
                    if c == 0 {
                        return Err(value_err(key, "must be at least 1"));
                    }
                    cfg.classes = Some(c);
                }
                "anchors" => {
                    let v: Vec<f32> = parse_list(key, value)?;
                    if v.is_empty() || v.len() % 2 != 0 {
                        return Err(value_err(key, "expected an even number of values"));
                    }
                    if v.iter().any(|&a| !(a > 0.0 && a.is_finite())) {
                        return Err(value_err(key, "anchor extents must be positive"));
                    }
                    cfg.anchors = v.chunks_exact(2).map(|p| (p[0], p[1])).collect();
                }
                "masks" => {
                    let groups: Vec<&str> = value.split(';').collect();
                    if groups.len() != 2 {
                        return Err(value_err(
                            key,
                            "expected two `;`-separated groups (13x13 head; 26x26 head)",
                        ));
                    }
                    let a: Vec<usize> = parse_list(key, groups[0])?;
                    let b: Vec<usize> = parse_list(key, groups[1])?;
                    if a.is_empty() || b.is_empty() {
                        return Err(value_err(key, "mask groups must not be empty"));
                    }
                    cfg.masks = [a, b];
                }
                "input_size" => {
                    let s: usize = value
                        .parse()
                        .map_err(|_| value_err(key, "expected a positive integer"))?;
                    if s == 0 || s % 32 != 0 {
                        return Err(value_err(key, "must be a positive multiple of 32"));
                    }
                    cfg.input_size = s;
                }
                "width_multiplier" => {
                    let a: f64 = value
                        .parse()
                        .map_err(|_| value_err(key, "expected a real number"))?;
                    if !(a > 0.0 && a <= 1.0) {
                        return Err(value_err(key, "must be in (0, 1]"));
                    }
                    cfg.width_multiplier = a;
                }
                other => return Err(ConfigError::UnknownKey(other.to_string())),
            }
        }
        for &m in cfg.masks.iter().flatten() {
            if m >= cfg.anchors.len() {
                return Err(value_err(
                    "masks",
                    format!("index {m} outside {} anchors", cfg.anchors.len()),
                ));
            }
        }
        Ok(cfg)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let text =
            std::fs::read_to_string(path.as_ref()).map_err(|e| ConfigError::Io(e.to_string()))?;
        Self::parse(&text)
    }

    /// Detector geometry, using `fallback_classes` when the file sets none.
    pub fn detector(&self, fallback_classes: usize) -> DetectorConfig {
        DetectorConfig {
            classes: self.classes.unwrap_or(fallback_classes),
            anchors: self.anchors.clone(),
            masks: self.masks.clone(),
            input_size: self.input_size,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_all_keys() {
        let cfg = ModelConfig::parse(
            "# tiny\nclasses = 27\nanchors = 1,2, 3,4\nmasks = 0,1;1\ninput_size=320\nwidth_multiplier=0.5\n",
        )
        .unwrap();
        assert_eq!(cfg.classes, Some(27));
        assert_eq!(cfg.anchors, vec![(1.0, 2.0), (3.0, 4.0)]);
        assert_eq!(cfg.masks, [vec![0, 1], vec![1]]);
        assert_eq!(cfg.input_size, 320);
        assert_eq!(cfg.width_multiplier, 0.5);
        assert_eq!(cfg.detector(5).classes, 27);
    }

    #[test]
    fn defaults_when_empty() {
        let cfg = ModelConfig::parse("").unwrap();
        assert_eq!(cfg, ModelConfig::default());
        assert_eq!(cfg.detector(3).masks, [vec![3, 4, 5], vec![1, 2, 3]]);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(
            ModelConfig::parse("colour = red"),
            Err(ConfigError::UnknownKey(_))
        ));
        assert!(matches!(
            ModelConfig::parse("classes"),
            Err(ConfigError::Syntax { line: 1, .. })
        ));
        assert!(ModelConfig::parse("input_size = 100").is_err());
        assert!(ModelConfig::parse("anchors = 1,2,3").is_err());
        assert!(ModelConfig::parse("masks = 0,7;1").is_err());
    }
}
