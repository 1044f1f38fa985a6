//! Pipeline configuration, loadable from TOML or JSON.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cascade::CascadeTrainConfig;
use crate::error::{Error, Result};
use crate::fitting::FitConfig;
use crate::gabor::GwnBuildConfig;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub template_size: usize,
    pub wavelets: usize,
    pub build: GwnBuildConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            template_size: 48,
            wavelets: 16,
            build: crate::synth::face_build_config(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    pub positives: usize,
    pub negatives: usize,
    pub cascade: CascadeTrainConfig,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            positives: 200,
            negatives: 600,
            cascade: CascadeTrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectConfig {
    pub scale_step: f64,
    pub min_size: usize,
    /// Subtracted from the last cascade stage's threshold; larger values
    /// admit more candidate windows.
    pub threshold_shift: f64,
    /// Minimum wavelet-residual verification score to keep a candidate.
    pub verify_threshold: f64,
    /// At most this many verified candidates are fitted, best first.
    pub max_candidates: usize,
}

impl Default for DetectConfig {
    fn default() -> Self {
        DetectConfig {
            scale_step: 1.25,
            min_size: 24,
            threshold_shift: 0.5,
            verify_threshold: 0.35,
            max_candidates: 8,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrackConfig {
    /// Lost when the frame cost exceeds `loss_factor` times the median
    /// cost of the first `warmup_frames` tracked frames.
    pub loss_factor: f64,
    pub warmup_frames: usize,
}

impl Default for TrackConfig {
    fn default() -> Self {
        TrackConfig {
            loss_factor: 3.0,
            warmup_frames: 5,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub width: usize,
    pub height: usize,
    pub noise_sigma: f64,
    /// Field pixels per template pixel when rasterizing for warping.
    pub supersample: usize,
    pub scale_min: f64,
    pub scale_max: f64,
    pub rotation_max: f64,
    pub translation_max: f64,
    pub perspective_max: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            width: 96,
            height: 96,
            noise_sigma: 0.05,
            supersample: 8,
            scale_min: 0.8,
            scale_max: 1.3,
            rotation_max: 0.4,
            translation_max: 5.0,
            perspective_max: 0.008,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub model: ModelConfig,
    pub training: TrainingConfig,
    pub fit: FitConfig,
    pub detect: DetectConfig,
    pub track: TrackConfig,
    pub synth: SynthConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            model: ModelConfig::default(),
            training: TrainingConfig::default(),
            // Window-initialized fits on noisy images need more damped
            // steps than the bare minimizer default to reach tolerance.
            fit: FitConfig {
                lm: crate::lm::LmConfig {
                    max_iterations: 300,
                    ..crate::lm::LmConfig::default()
                },
                ..FitConfig::default()
            },
            detect: DetectConfig::default(),
            track: TrackConfig::default(),
            synth: SynthConfig::default(),
        }
    }
}

impl PipelineConfig {
    /// Loads TOML (`.toml`) or JSON (anything else) by extension.
    pub fn load(path: impl AsRef<Path>) -> Result<PipelineConfig> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        if path.extension().and_then(|e| e.to_str()) == Some("toml") {
            toml::from_str(&text).map_err(|e| Error::InvalidConfig(e.to_string()))
        } else {
            serde_json::from_str(&text).map_err(|e| Error::InvalidConfig(e.to_string()))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_roundtrip_through_toml_and_json() {
        let config = PipelineConfig::default();
        let toml_text = toml::to_string(&config).unwrap();
        let from_toml: PipelineConfig = toml::from_str(&toml_text).unwrap();
        assert_eq!(from_toml.detect.min_size, config.detect.min_size);

        let json_text = serde_json::to_string(&config).unwrap();
        let from_json: PipelineConfig = serde_json::from_str(&json_text).unwrap();
        assert_eq!(from_json.fit.lambda_distance, config.fit.lambda_distance);
    }

    #[test]
    fn partial_files_fill_in_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("partial.toml");
        std::fs::write(&path, "[detect]\nthreshold_shift = 1.5\n").unwrap();
        let config = PipelineConfig::load(&path).unwrap();
        assert_eq!(config.detect.threshold_shift, 1.5);
        assert_eq!(config.detect.min_size, 24);

        let jpath = dir.path().join("partial.json");
        std::fs::write(&jpath, "{\"track\":{\"loss_factor\":4.0}}").unwrap();
        let config = PipelineConfig::load(&jpath).unwrap();
        assert_eq!(config.track.loss_factor, 4.0);
    }

    #[test]
    fn malformed_config_is_a_distinct_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.toml");
        std::fs::write(&path, "detect = 3").unwrap();
        assert!(matches!(
            PipelineConfig::load(&path),
            Err(Error::InvalidConfig(_))
        ));
    }
}
