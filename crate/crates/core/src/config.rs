//! Run configuration: one JSON document captures everything a training or
//! evaluation run needs, and `--set key=value` overrides patch it before
//! deserialization. Every command writes the fully resolved config next to
//! its outputs so a run can be reproduced from that file alone.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::conv::{AttentionMode, ConvolveWith};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Classification,
    Segmentation,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorKind {
    Shapes3,
    Parts2,
    PartsAdaptive,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    Adapt,
    GraphConv,
    AttentionPoint,
    AttentionChannel,
}

impl EncoderKind {
    pub fn attention_mode(&self) -> Option<AttentionMode> {
        match self {
            EncoderKind::AttentionPoint => Some(AttentionMode::Point),
            EncoderKind::AttentionChannel => Some(AttentionMode::Channel),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureSource {
    Xyz,
    XyzNormals,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetSpec {
    pub generator: GeneratorKind,
    /// Load from a manifest file instead of generating, when set.
    pub manifest: Option<String>,
    pub samples_per_class: usize,
    pub points: usize,
    pub noise_std: f64,
    /// Train/test fractions; must sum to 1.
    pub split: [f64; 2],
    /// Defaults to the run seed's "data" stream.
    pub seed: Option<u64>,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            generator: GeneratorKind::Shapes3,
            manifest: None,
            samples_per_class: 80,
            points: 256,
            noise_std: 0.02,
            split: [0.75, 0.25],
            seed: None,
        }
    }
}

impl DatasetSpec {
    pub fn train_count_per_class(&self) -> usize {
        (self.samples_per_class as f64 * self.split[0]).round() as usize
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub k: usize,
    /// Output width of each encoder convolution. For segmentation the last
    /// layer is a fixed-kernel graph convolution.
    pub conv_widths: Vec<usize>,
    /// Hidden width of the kernel-generating MLP; None means m*c/2.
    pub kernel_hidden: Option<usize>,
    pub variant: ConvolveWith,
    pub encoder_kind: EncoderKind,
    /// Classification: shared fully connected width after the shortcut concat.
    pub aggregate_width: usize,
    /// Classification head widths.
    pub head_widths: Vec<usize>,
    /// Segmentation decoder widths.
    pub decoder_widths: Vec<usize>,
    pub dropout: f64,
    pub norm: bool,
    /// Classification: recompute each layer's graph in feature space.
    pub dynamic_graph: bool,
    /// Segmentation: subsampling rate per pooling layer.
    pub pool_rate: usize,
    /// Segmentation: encoder layer indices after which a pooling layer runs.
    pub pool_after: Vec<usize>,
    /// Aggregate pooled features with an extra adaptive conv instead of a
    /// plain neighborhood max.
    pub pooled_aggregation_conv: bool,
    pub feature_source: FeatureSource,
    /// Negative slope of every LeakyReLU; recorded for reproducibility.
    pub leaky_slope: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            k: 20,
            conv_widths: vec![8, 8, 8, 8],
            kernel_hidden: Some(16),
            variant: ConvolveWith::Spatial,
            encoder_kind: EncoderKind::Adapt,
            aggregate_width: 128,
            head_widths: vec![64, 32],
            decoder_widths: vec![64, 32],
            dropout: 0.5,
            norm: true,
            dynamic_graph: true,
            pool_rate: 4,
            pool_after: vec![1, 3],
            pooled_aggregation_conv: false,
            feature_source: FeatureSource::Xyz,
            leaky_slope: crate::layers::LEAKY_SLOPE,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentParams {
    pub enabled: bool,
    /// Uniform global shift drawn per axis from [-shift, shift].
    pub shift: f64,
    /// Isotropic scale drawn from [scale_lo, scale_hi].
    pub scale_lo: f64,
    pub scale_hi: f64,
    /// Per-point Gaussian jitter, clipped per coordinate.
    pub jitter_std: f64,
    pub jitter_clip: f64,
}

impl Default for AugmentParams {
    fn default() -> Self {
        AugmentParams {
            enabled: true,
            shift: 0.1,
            scale_lo: 0.8,
            scale_hi: 1.25,
            jitter_std: 0.02,
            jitter_clip: 0.05,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainParams {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub momentum: f64,
    /// Stop once the test metric reaches this value, when set.
    pub early_stop_metric: Option<f64>,
    pub eval_every: usize,
    pub augment: AugmentParams,
}

impl Default for TrainParams {
    fn default() -> Self {
        TrainParams {
            epochs: 30,
            batch_size: 8,
            lr_max: 0.1,
            lr_min: 0.001,
            momentum: 0.9,
            early_stop_metric: None,
            eval_every: 1,
            augment: AugmentParams::default(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub task: Task,
    pub seed: u64,
    pub dataset: DatasetSpec,
    pub model: ModelConfig,
    pub train: TrainParams,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            task: Task::Classification,
            seed: 1,
            dataset: DatasetSpec::default(),
            model: ModelConfig::default(),
            train: TrainParams::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        if m.k < 1 {
            return Err(Error::config("model.k must be at least 1"));
        }
        if m.conv_widths.is_empty() {
            return Err(Error::config("model.conv_widths must not be empty"));
        }
        if m.conv_widths.contains(&0) {
            return Err(Error::config("model.conv_widths must be positive"));
        }
        if !(0.0..1.0).contains(&m.dropout) {
            return Err(Error::config(format!(
                "model.dropout {} not in [0, 1)",
                m.dropout
            )));
        }
        if m.pool_rate < 2 {
            return Err(Error::config("model.pool_rate must be at least 2"));
        }
        if !(0.0..1.0).contains(&m.leaky_slope) || m.leaky_slope == 0.0 {
            return Err(Error::config(format!(
                "model.leaky_slope {} not in (0, 1)",
                m.leaky_slope
            )));
        }
        if self.task == Task::Segmentation {
            for &p in &m.pool_after {
                if p + 1 >= m.conv_widths.len() {
                    return Err(Error::config(format!(
                        "model.pool_after index {p} must leave at least one later conv layer"
                    )));
                }
            }
        }
        let d = &self.dataset;
        if (d.split[0] + d.split[1] - 1.0).abs() > 1e-9 {
            return Err(Error::config(format!(
                "dataset.split {:?} must sum to 1",
                d.split
            )));
        }
        if d.samples_per_class == 0 || d.points == 0 {
            return Err(Error::config(
                "dataset.samples_per_class and dataset.points must be positive",
            ));
        }
        if d.points < m.k {
            return Err(Error::config(format!(
                "dataset.points {} must be at least model.k {}",
                d.points, m.k
            )));
        }
        let t = &self.train;
        if t.epochs == 0 || t.batch_size == 0 {
            return Err(Error::config("train.epochs and train.batch_size must be positive"));
        }
        if t.lr_max <= 0.0 || t.lr_min < 0.0 || t.lr_min > t.lr_max {
            return Err(Error::config(format!(
                "learning-rate range [{}, {}] invalid",
                t.lr_min, t.lr_max
            )));
        }
        if !(0.0..1.0).contains(&t.momentum) {
            return Err(Error::config(format!("momentum {} not in [0, 1)", t.momentum)));
        }
        if t.eval_every == 0 {
            return Err(Error::config("train.eval_every must be positive"));
        }
        if self.task == Task::Segmentation && self.dataset.generator == GeneratorKind::Shapes3 {
            return Err(Error::config(
                "segmentation needs a per-point labeled generator (parts2 or parts_adaptive)",
            ));
        }
        Ok(())
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn from_json(json: &str) -> Result<RunConfig> {
        Ok(serde_json::from_str(json)?)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)?;
        RunConfig::from_json(&text)
    }

    /// Parse, apply dotted-path overrides, validate.
    pub fn load_with_overrides(path: &Path, sets: &[(String, String)]) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)?;
        let mut value: serde_json::Value = serde_json::from_str(&text)?;
        apply_overrides(&mut value, sets)?;
        let cfg: RunConfig = serde_json::from_value(value)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Patch `value` at dotted paths ("model.k" = "5"). Values parse as JSON
/// when possible and fall back to strings.
pub fn apply_overrides(value: &mut serde_json::Value, sets: &[(String, String)]) -> Result<()> {
    for (path, raw) in sets {
        let parsed: serde_json::Value = serde_json::from_str(raw)
            .unwrap_or_else(|_| serde_json::Value::String(raw.clone()));
        let mut cursor = &mut *value;
        let parts: Vec<&str> = path.split('.').collect();
        for (i, part) in parts.iter().enumerate() {
            let map = match cursor {
                serde_json::Value::Object(m) => m,
                _ => {
                    return Err(Error::config(format!(
                        "override path {path}: {part} is not an object"
                    )))
                }
            };
            if i + 1 == parts.len() {
                map.insert((*part).to_string(), parsed.clone());
                break;
            }
            cursor = map
                .entry((*part).to_string())
                .or_insert_with(|| serde_json::Value::Object(Default::default()));
        }
    }
    Ok(())
}
