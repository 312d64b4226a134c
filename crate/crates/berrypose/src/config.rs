//! The TOML configuration file: one human-editable document covering the
//! grid, the model, codec constants, training, scene synthesis and
//! evaluation. Every field has a default; an empty file (or no file) is a
//! valid configuration. Command-line flags override file values.

use crate::network::{BackboneKind, ModelConfig};
use crate::pipeline::TrainConfig;
use crate::synthgen::SynthConfig;
use berrypose_core::codec::{CodecError, GridSpec};
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Parse {
        path: String,
        #[source]
        source: toml::de::Error,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct GridSection {
    pub input_width: u32,
    pub input_height: u32,
    pub anchors: usize,
}

impl Default for GridSection {
    fn default() -> Self {
        GridSection { input_width: 416, input_height: 416, anchors: 5 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub backbone: BackboneKind,
    pub channels: Vec<usize>,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            backbone: BackboneKind::Tiny,
            channels: vec![16, 32, 64, 128, 256, 256],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct CodecSection {
    /// Confidence sharpness.
    pub alpha: f64,
    /// Confidence distance cutoff, pixels.
    pub d_th_px: f64,
    pub conf_threshold: f64,
    pub nms_iou_threshold: f64,
    pub symmetry_steps: usize,
}

impl Default for CodecSection {
    fn default() -> Self {
        CodecSection {
            alpha: 2.0,
            d_th_px: 30.0,
            conf_threshold: 0.3,
            nms_iou_threshold: 0.45,
            symmetry_steps: 12,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Forward passes run before timing starts.
    pub warmup_images: usize,
    /// Ground truths below this visible fraction are dropped from
    /// evaluation (0 keeps everything, including fully occluded fruit).
    pub min_visible_fraction: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { warmup_images: 2, min_visible_fraction: 0.0 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct AppConfig {
    pub grid: GridSection,
    pub model: ModelSection,
    pub codec: CodecSection,
    pub train: TrainConfig,
    pub synth: SynthConfig,
    pub eval: EvalSection,
}

impl AppConfig {
    pub fn load(path: Option<&Path>) -> Result<AppConfig, ConfigError> {
        match path {
            None => Ok(AppConfig::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| ConfigError::Io {
                    path: p.display().to_string(),
                    source: e,
                })?;
                toml::from_str(&text).map_err(|e| ConfigError::Parse {
                    path: p.display().to_string(),
                    source: e,
                })
            }
        }
    }

    pub fn grid_spec(&self) -> Result<GridSpec, CodecError> {
        GridSpec::new(
            self.grid.input_width,
            self.grid.input_height,
            crate::network::STRIDE,
            self.grid.anchors,
        )
    }

    pub fn model_config(&self, seed: u64) -> ModelConfig {
        ModelConfig {
            backbone: self.model.backbone,
            input_width: self.grid.input_width,
            input_height: self.grid.input_height,
            anchors: self.grid.anchors,
            channels: self.model.channels.clone(),
            seed,
        }
    }
}

// SynthConfig and TrainConfig derive PartialEq through their fields; keep
// AppConfig comparable for tests.
