//! Run configuration: one JSON document with every tunable default.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::codec::Codec;
use crate::datagen::{DatagenConfig, Geometry, Perturbation, Thresholds};
use crate::error::{Error, Result};
use crate::net::ModelConfig;
use crate::trainer::{BatchContext, Stage, StageConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeometryConfig {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub codec_stride: usize,
}

impl Default for GeometryConfig {
    fn default() -> Self {
        GeometryConfig {
            frames: 8,
            height: 16,
            width: 16,
            codec_stride: 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlowConfig {
    pub sampler_steps: usize,
}

impl Default for FlowConfig {
    fn default() -> Self {
        FlowConfig { sampler_steps: 16 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatagenSection {
    pub ct_samples: usize,
    pub sft_samples: usize,
    pub test_samples: usize,
    pub thresholds: Thresholds,
    pub perturbation: Perturbation,
    pub max_retries: usize,
}

impl Default for DatagenSection {
    fn default() -> Self {
        let d = DatagenConfig::default();
        DatagenSection {
            ct_samples: 2048,
            sft_samples: 256,
            test_samples: 32,
            thresholds: d.thresholds,
            perturbation: d.perturbation,
            max_retries: d.max_retries,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainerConfig {
    pub base: StageConfig,
    pub ct: StageConfig,
    pub sft: StageConfig,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            base: StageConfig {
                iterations: 1000,
                seed: 11,
                ..StageConfig::default()
            },
            ct: StageConfig {
                iterations: 2000,
                seed: 17,
                ..StageConfig::default()
            },
            sft: StageConfig {
                iterations: 500,
                seed: 19,
                learning_rate: 5e-4,
                checkpoint_every: 250,
                validate_every: 100,
                ..StageConfig::default()
            },
        }
    }
}

impl TrainerConfig {
    pub fn stage(&self, stage: Stage) -> &StageConfig {
        match stage {
            Stage::Base => &self.base,
            Stage::Ct => &self.ct,
            Stage::Sft => &self.sft,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsConfig {
    /// Test-set size used by `eval` and `ablate`.
    pub eval_samples: usize,
    /// Centroid-table examples per style operator for text-style alignment.
    pub centroid_examples: usize,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        MetricsConfig {
            eval_samples: 32,
            centroid_examples: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    /// Holds `ct/`, `sft/` and `test/` datasets.
    pub data_dir: PathBuf,
    /// Holds `base/`, `CT/`, `SFT/` and `final/` training outputs.
    pub run_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            data_dir: PathBuf::from("runs/data"),
            run_dir: PathBuf::from("runs/train"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SeedsConfig {
    pub ct_data: u64,
    pub sft_data: u64,
    pub test_data: u64,
    pub model: u64,
    pub sampler: u64,
    pub metrics: u64,
}

impl Default for SeedsConfig {
    fn default() -> Self {
        SeedsConfig {
            ct_data: 101,
            sft_data: 202,
            test_data: 303,
            model: 3,
            sampler: 23,
            metrics: 29,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub geometry: GeometryConfig,
    pub model: ModelConfig,
    pub flow: FlowConfig,
    pub datagen: DatagenSection,
    pub trainer: TrainerConfig,
    pub metrics: MetricsConfig,
    pub paths: PathsConfig,
    pub seeds: SeedsConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingPath(path.to_path_buf()));
        }
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let cfg: RunConfig = serde_json::from_slice(&bytes)
            .map_err(|e| Error::Usage(format!("config {}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let g = &self.geometry;
        if g.frames == 0 || g.height == 0 || g.width == 0 {
            return Err(Error::Usage("geometry extents must be >= 1".into()));
        }
        let cell = g.codec_stride * self.model.patch;
        if cell == 0 || g.height % cell != 0 || g.width % cell != 0 {
            return Err(Error::Usage(format!(
                "height and width must be multiples of codec_stride*patch = {cell}"
            )));
        }
        if self.model.latent_channels != 3 * g.codec_stride * g.codec_stride {
            return Err(Error::Usage(format!(
                "model.latent_channels {} must equal 3*codec_stride^2 = {}",
                self.model.latent_channels,
                3 * g.codec_stride * g.codec_stride
            )));
        }
        if self.flow.sampler_steps == 0 {
            return Err(Error::Usage("flow.sampler_steps must be >= 1".into()));
        }
        self.model.validate().map_err(|e| Error::Usage(e.to_string()))?;
        for s in [&self.trainer.base, &self.trainer.ct, &self.trainer.sft] {
            s.validate().map_err(|e| Error::Usage(e.to_string()))?;
        }
        Ok(())
    }

    pub fn datagen_config(&self) -> DatagenConfig {
        DatagenConfig {
            geometry: Geometry {
                frames: self.geometry.frames,
                height: self.geometry.height,
                width: self.geometry.width,
            },
            thresholds: self.datagen.thresholds,
            perturbation: self.datagen.perturbation,
            max_retries: self.datagen.max_retries,
        }
    }

    pub fn codec(&self) -> Result<Codec> {
        Codec::new(self.geometry.codec_stride)
    }

    pub fn batch_context(&self) -> Result<BatchContext> {
        Ok(BatchContext {
            codec: self.codec()?,
            patch: self.model.patch,
            style_mask: self.model.lora_mode.style_mask(),
        })
    }

    /// Latent dims `[C, F, H', W']` of one video.
    pub fn latent_dims(&self) -> [usize; 4] {
        let g = &self.geometry;
        let s = g.codec_stride;
        [3 * s * s, g.frames, g.height / s, g.width / s]
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_roundtrip_and_validate() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let back: RunConfig = serde_json::from_str(&cfg.to_json().unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn partial_document_materializes_defaults() {
        let cfg: RunConfig = serde_json::from_str(r#"{"trainer": {"ct": {"iterations": 5}}}"#).unwrap();
        assert_eq!(cfg.trainer.ct.iterations, 5);
        assert_eq!(cfg.trainer.ct.accumulation, 2);
        assert_eq!(cfg.seeds, SeedsConfig::default());
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"bogus": 1}"#).is_err());
        assert!(serde_json::from_str::<RunConfig>(r#"{"model": {"depth": 3}}"#).is_err());
        assert!(serde_json::from_str::<RunConfig>(r#"{"trainer": {"ct": {"lr": 3}}}"#).is_err());
    }

    #[test]
    fn inconsistent_geometry_is_usage_error() {
        let mut cfg = RunConfig::default();
        cfg.geometry.height = 18;
        assert!(matches!(cfg.validate(), Err(Error::Usage(_))));
        let mut cfg = RunConfig::default();
        cfg.model.latent_channels = 8;
        assert!(matches!(cfg.validate(), Err(Error::Usage(_))));
    }
}
