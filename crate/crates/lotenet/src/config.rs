//! Run configuration: a strict JSON schema covering model architecture,
//! training hyperparameters, and the data source. Unknown keys are rejected;
//! all defaults match the fixed recipe (learning rate 5e-4, bond dimension
//! 5, 4 layers, strides 8/2/2, patience 10).

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::feature_map::FeatureMapKind;
use crate::model::LoTeNetConfig;
use crate::train::{EarlyStopMetric, TrainConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config parse error: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F64,
    F32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub precision: Precision,
    pub model: ModelSection,
    #[serde(default)]
    pub training: TrainingSection,
    pub data: DataSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(default = "default_layers")]
    pub layers: usize,
    #[serde(default = "default_strides")]
    pub strides: Vec<usize>,
    #[serde(default = "default_bond_dim")]
    pub bond_dim: usize,
    /// Defaults to `bond_dim` when absent.
    #[serde(default)]
    pub virtual_dim: Option<usize>,
    #[serde(default = "default_feature_map")]
    pub feature_map: String,
    pub n_classes: usize,
    #[serde(default = "default_spatial_rank")]
    pub spatial_rank: usize,
    /// Spatial extents plus channel count.
    pub input_shape: Vec<usize>,
    #[serde(default)]
    pub share_weights_per_layer: bool,
    #[serde(default = "default_true")]
    pub batch_norm: bool,
    #[serde(default = "default_init_std")]
    pub init_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingSection {
    #[serde(default = "default_lr")]
    pub lr: f64,
    /// Defaults to 512 for 2D inputs and 4 for 3D.
    #[serde(default)]
    pub batch_size: Option<usize>,
    #[serde(default = "default_patience")]
    pub patience: usize,
    #[serde(default = "default_max_epochs")]
    pub max_epochs: usize,
    #[serde(default = "default_metric")]
    pub metric: String,
    #[serde(default)]
    pub augment: bool,
    #[serde(default = "default_true")]
    pub record_timing: bool,
}

impl Default for TrainingSection {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields defaulted")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// "synthetic" | "ltnt" | "idx".
    pub format: String,
    /// LTNT container path.
    #[serde(default)]
    pub path: Option<String>,
    /// IDX image/label paths for the train pool.
    #[serde(default)]
    pub images: Option<String>,
    #[serde(default)]
    pub labels: Option<String>,
    /// Optional held-out IDX test pair; when present, `split` only divides
    /// the train pool.
    #[serde(default)]
    pub test_images: Option<String>,
    #[serde(default)]
    pub test_labels: Option<String>,
    #[serde(default)]
    pub synthetic: Option<SynthSection>,
    #[serde(default = "default_split")]
    pub split: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSection {
    pub kind: String,
    pub count: usize,
    pub size: usize,
}

fn default_layers() -> usize {
    4
}
fn default_strides() -> Vec<usize> {
    vec![8, 2, 2]
}
fn default_bond_dim() -> usize {
    5
}
fn default_feature_map() -> String {
    "sinusoidal".into()
}
fn default_spatial_rank() -> usize {
    2
}
fn default_true() -> bool {
    true
}
fn default_init_std() -> f64 {
    1e-2
}
fn default_lr() -> f64 {
    5e-4
}
fn default_patience() -> usize {
    10
}
fn default_max_epochs() -> usize {
    100
}
fn default_metric() -> String {
    "accuracy".into()
}
fn default_split() -> Vec<f64> {
    vec![0.6, 0.2, 0.2]
}

impl RunConfig {
    pub fn from_json(json: &str) -> Result<Self, ConfigError> {
        let config: RunConfig = serde_json::from_str(json)?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Full-default template for a synthetic 2D run.
    pub fn template() -> Self {
        Self {
            seed: 0,
            precision: Precision::F64,
            model: ModelSection {
                layers: default_layers(),
                strides: default_strides(),
                bond_dim: default_bond_dim(),
                virtual_dim: None,
                feature_map: default_feature_map(),
                n_classes: 2,
                spatial_rank: default_spatial_rank(),
                input_shape: vec![32, 32, 1],
                share_weights_per_layer: false,
                batch_norm: true,
                init_std: default_init_std(),
            },
            training: TrainingSection::default(),
            data: DataSection {
                format: "synthetic".into(),
                path: None,
                images: None,
                labels: None,
                test_images: None,
                test_labels: None,
                synthetic: Some(SynthSection {
                    kind: "blobs2d".into(),
                    count: 2000,
                    size: 32,
                }),
                split: default_split(),
            },
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.feature_map_kind()?;
        self.early_stop_metric()?;
        match self.data.format.as_str() {
            "synthetic" => {
                let synth = self
                    .data
                    .synthetic
                    .as_ref()
                    .ok_or_else(|| ConfigError::Invalid("synthetic format needs a synthetic section".into()))?;
                synth
                    .kind
                    .parse::<crate::data::SyntheticKind>()
                    .map_err(|e| ConfigError::Invalid(e.to_string()))?;
            }
            "ltnt" => {
                if self.data.path.is_none() {
                    return Err(ConfigError::Invalid("ltnt format needs data.path".into()));
                }
            }
            "idx" => {
                if self.data.images.is_none() || self.data.labels.is_none() {
                    return Err(ConfigError::Invalid(
                        "idx format needs data.images and data.labels".into(),
                    ));
                }
            }
            other => {
                return Err(ConfigError::Invalid(format!(
                    "unknown data format {other:?} (expected synthetic, ltnt or idx)"
                )));
            }
        }
        if self.training.metric == "auc" && self.model.n_classes > 2 {
            return Err(ConfigError::Invalid(
                "auc early stopping needs a binary task".into(),
            ));
        }
        Ok(())
    }

    pub fn feature_map_kind(&self) -> Result<FeatureMapKind, ConfigError> {
        self.model
            .feature_map
            .parse()
            .map_err(|e: crate::feature_map::FeatureMapError| ConfigError::Invalid(e.to_string()))
    }

    pub fn early_stop_metric(&self) -> Result<EarlyStopMetric, ConfigError> {
        match self.training.metric.as_str() {
            "accuracy" => Ok(EarlyStopMetric::Accuracy),
            "auc" => Ok(EarlyStopMetric::Auc),
            other => Err(ConfigError::Invalid(format!(
                "unknown metric {other:?} (expected accuracy or auc)"
            ))),
        }
    }

    /// Resolved architecture description.
    pub fn model_config(&self) -> Result<LoTeNetConfig, ConfigError> {
        Ok(LoTeNetConfig {
            layers: self.model.layers,
            strides: self.model.strides.clone(),
            bond_dim: self.model.bond_dim,
            virtual_dim: self.model.virtual_dim.unwrap_or(self.model.bond_dim),
            feature_map: self.feature_map_kind()?,
            n_classes: self.model.n_classes,
            spatial_rank: self.model.spatial_rank,
            input_shape: self.model.input_shape.clone(),
            share_weights_per_layer: self.model.share_weights_per_layer,
            batch_norm: self.model.batch_norm,
            init_std: self.model.init_std,
            seed: self.seed,
        })
    }

    /// Resolved training hyperparameters.
    pub fn train_config(&self) -> Result<TrainConfig, ConfigError> {
        let batch_size = self.training.batch_size.unwrap_or(match self.model.spatial_rank {
            3 => 4,
            _ => 512,
        });
        Ok(TrainConfig {
            lr: self.training.lr,
            batch_size,
            patience: self.training.patience,
            max_epochs: self.training.max_epochs,
            metric: self.early_stop_metric()?,
            augment: self.training.augment,
            seed: self.seed,
            record_timing: self.training.record_timing,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_the_fixed_recipe() {
        let config = RunConfig::template();
        assert_eq!(config.model.layers, 4);
        assert_eq!(config.model.strides, vec![8, 2, 2]);
        assert_eq!(config.model.bond_dim, 5);
        assert_eq!(config.training.lr, 5e-4);
        assert_eq!(config.training.patience, 10);
        let tc = config.train_config().unwrap();
        assert_eq!(tc.batch_size, 512);
        let mc = config.model_config().unwrap();
        assert_eq!(mc.virtual_dim, 5);
    }

    #[test]
    fn minimal_json_fills_defaults() {
        let json = r#"{
            "model": {"n_classes": 2, "input_shape": [32, 32, 1]},
            "data": {"format": "synthetic", "synthetic": {"kind": "blobs2d", "count": 100, "size": 32}}
        }"#;
        let config = RunConfig::from_json(json).unwrap();
        assert_eq!(config.model.strides, vec![8, 2, 2]);
        assert_eq!(config.data.split, vec![0.6, 0.2, 0.2]);
        assert_eq!(config.precision, Precision::F64);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let json = r#"{
            "model": {"n_classes": 2, "input_shape": [32, 32, 1], "bogus": 1},
            "data": {"format": "synthetic", "synthetic": {"kind": "blobs2d", "count": 100, "size": 32}}
        }"#;
        assert!(matches!(RunConfig::from_json(json), Err(ConfigError::Parse(_))));
        let top = r#"{"extra": true, "model": {"n_classes": 2, "input_shape": [1,1,1]}, "data": {"format": "ltnt", "path": "x"}}"#;
        assert!(RunConfig::from_json(top).is_err());
    }

    #[test]
    fn format_requirements_are_validated() {
        let no_synth = r#"{"model": {"n_classes": 2, "input_shape": [32,32,1]}, "data": {"format": "synthetic"}}"#;
        assert!(matches!(RunConfig::from_json(no_synth), Err(ConfigError::Invalid(_))));
        let no_path = r#"{"model": {"n_classes": 2, "input_shape": [32,32,1]}, "data": {"format": "ltnt"}}"#;
        assert!(RunConfig::from_json(no_path).is_err());
        let bad_format = r#"{"model": {"n_classes": 2, "input_shape": [32,32,1]}, "data": {"format": "csv"}}"#;
        assert!(RunConfig::from_json(bad_format).is_err());
    }

    #[test]
    fn auc_metric_requires_binary() {
        let json = r#"{
            "model": {"n_classes": 10, "input_shape": [32, 32, 1]},
            "training": {"metric": "auc"},
            "data": {"format": "synthetic", "synthetic": {"kind": "blobs2d", "count": 100, "size": 32}}
        }"#;
        assert!(RunConfig::from_json(json).is_err());
    }

    #[test]
    fn three_d_defaults_to_small_batches_and_no_map() {
        let json = r#"{
            "model": {"n_classes": 2, "input_shape": [16, 16, 16, 1], "spatial_rank": 3,
                      "feature_map": "none", "strides": [4, 2], "layers": 3},
            "data": {"format": "synthetic", "synthetic": {"kind": "blobs3d", "count": 10, "size": 16}}
        }"#;
        let config = RunConfig::from_json(json).unwrap();
        assert_eq!(config.train_config().unwrap().batch_size, 4);
        assert_eq!(
            config.model_config().unwrap().feature_map,
            FeatureMapKind::None
        );
    }

    #[test]
    fn json_roundtrip_preserves_config() {
        let config = RunConfig::template();
        let json = config.to_json_pretty();
        let back = RunConfig::from_json(&json).unwrap();
        assert_eq!(back, config);
    }
}
