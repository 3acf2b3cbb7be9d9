//! Pipeline configuration file.
//!
//! One TOML file drives every stage. All sections and fields are optional;
//! an empty file selects the documented defaults, so configs only state
//! what they change. Unknown keys are rejected so typos fail loudly instead
//! of silently running the default.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::{BackgroundPolicy, MixupPolicy, SpecAugmentPolicy};
use crate::calibrate::default_quantile_grid;
use crate::dataset::synth::SynthConfig;
use crate::dataset::{BackgroundMix, BatchConfig};
use crate::dsp::SpectrogramParams;
use crate::model::ModelConfig;
use crate::train::{LossConfig, OptimizerConfig, TrainConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("failed to parse {path}: {source}")]
    Parse {
        path: String,
        #[source]
        source: Box<toml::de::Error>,
    },
    #[error("invalid config: {reason}")]
    Invalid { reason: String },
    #[error("no seed: pass --seed or set `seed` in the config file")]
    MissingSeed,
}

/// Chunking and batch geometry for training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BatchSection {
    pub batch_size: usize,
    pub window_seconds: f64,
    pub chunk_seconds: f64,
    pub n_chunks: usize,
}

impl Default for BatchSection {
    fn default() -> Self {
        let b = BatchConfig::default();
        Self {
            batch_size: b.batch_size,
            window_seconds: b.window_seconds,
            chunk_seconds: b.chunk_seconds,
            n_chunks: b.n_chunks,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MixupSection {
    pub enabled: bool,
    pub beta_alpha: f64,
    pub apply_probability: f64,
}

impl Default for MixupSection {
    fn default() -> Self {
        let p = MixupPolicy::default();
        Self {
            enabled: true,
            beta_alpha: p.beta_alpha,
            apply_probability: p.apply_probability,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpecAugmentSection {
    pub enabled: bool,
    pub n_freq_masks: usize,
    pub max_freq_width: usize,
    pub n_time_masks: usize,
    pub max_time_width: usize,
    pub fill_value: f64,
}

impl Default for SpecAugmentSection {
    fn default() -> Self {
        let p = SpecAugmentPolicy::default();
        Self {
            enabled: true,
            n_freq_masks: p.n_freq_masks,
            max_freq_width: p.max_freq_width,
            n_time_masks: p.n_time_masks,
            max_time_width: p.max_time_width,
            fill_value: p.fill_value,
        }
    }
}

/// Background-noise mixing. Disabled unless a noise directory is named.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackgroundSection {
    pub enabled: bool,
    /// Directory of noise WAV files, required when enabled.
    pub noise_dir: Option<PathBuf>,
    pub snr_db_min: f64,
    pub snr_db_max: f64,
    pub apply_probability: f64,
}

impl Default for BackgroundSection {
    fn default() -> Self {
        let p = BackgroundPolicy::default();
        Self {
            enabled: false,
            noise_dir: None,
            snr_db_min: p.snr_db_min,
            snr_db_max: p.snr_db_max,
            apply_probability: p.apply_probability,
        }
    }
}

/// Network shape; the class count always comes from the species table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub blocks: Vec<usize>,
    pub attention_temperature: f64,
    pub dropout_rate: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            blocks: m.blocks,
            attention_temperature: m.attention_temperature,
            dropout_rate: m.dropout_rate,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub val_fraction: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            epochs: 8,
            steps_per_epoch: 50,
            val_fraction: 0.15,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationSection {
    pub quantile_grid: Vec<f64>,
    /// Class-share penalization strength applied before thresholding.
    pub penalty_factor: f64,
}

impl Default for CalibrationSection {
    fn default() -> Self {
        Self {
            quantile_grid: default_quantile_grid(),
            penalty_factor: 0.8,
        }
    }
}

/// The whole configuration file.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Base seed for every random draw; the --seed flag overrides it.
    pub seed: Option<u64>,
    pub spectrogram: SpectrogramParams,
    pub batch: BatchSection,
    pub mixup: MixupSection,
    pub spec_augment: SpecAugmentSection,
    pub background: BackgroundSection,
    pub model: ModelSection,
    pub loss: LossConfig,
    pub optimizer: OptimizerConfig,
    pub train: TrainSection,
    pub calibration: CalibrationSection,
    pub synth: SynthConfig,
}

impl PipelineConfig {
    pub fn from_path(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        toml::from_str(&text).map_err(|source| ConfigError::Parse {
            path: path.display().to_string(),
            source: Box::new(source),
        })
    }

    /// The effective seed: the flag wins over the file.
    pub fn resolve_seed(&self, flag: Option<u64>) -> Result<u64, ConfigError> {
        flag.or(self.seed).ok_or(ConfigError::MissingSeed)
    }

    /// Assembles the batch sampler config, listing the noise directory when
    /// background mixing is enabled.
    pub fn batch_config(&self) -> Result<BatchConfig, ConfigError> {
        let background = if self.background.enabled {
            let dir = self.background.noise_dir.as_ref().ok_or_else(|| {
                ConfigError::Invalid {
                    reason: "background mixing is enabled but no noise_dir is set".to_string(),
                }
            })?;
            let noise_paths = list_wavs(dir)?;
            if noise_paths.is_empty() {
                return Err(ConfigError::Invalid {
                    reason: format!("no .wav files under {}", dir.display()),
                });
            }
            Some(BackgroundMix {
                policy: BackgroundPolicy {
                    snr_db_min: self.background.snr_db_min,
                    snr_db_max: self.background.snr_db_max,
                    apply_probability: self.background.apply_probability,
                },
                noise_paths,
            })
        } else {
            None
        };
        Ok(BatchConfig {
            batch_size: self.batch.batch_size,
            window_seconds: self.batch.window_seconds,
            chunk_seconds: self.batch.chunk_seconds,
            n_chunks: self.batch.n_chunks,
            spectrogram: self.spectrogram,
            background,
            mixup: self.mixup.enabled.then_some(MixupPolicy {
                beta_alpha: self.mixup.beta_alpha,
                apply_probability: self.mixup.apply_probability,
            }),
            spec_augment: self.spec_augment.enabled.then_some(SpecAugmentPolicy {
                n_freq_masks: self.spec_augment.n_freq_masks,
                max_freq_width: self.spec_augment.max_freq_width,
                n_time_masks: self.spec_augment.n_time_masks,
                max_time_width: self.spec_augment.max_time_width,
                fill_value: self.spec_augment.fill_value,
            }),
        })
    }

    #[must_use]
    pub fn model_config(&self, n_classes: usize) -> ModelConfig {
        ModelConfig {
            blocks: self.model.blocks.clone(),
            n_classes,
            attention_temperature: self.model.attention_temperature,
            dropout_rate: self.model.dropout_rate,
        }
    }

    /// Assembles the full training config for a species table of the given
    /// size.
    pub fn train_config(&self, n_classes: usize, seed: u64) -> Result<TrainConfig, ConfigError> {
        Ok(TrainConfig {
            model: self.model_config(n_classes),
            batch: self.batch_config()?,
            loss: self.loss.clone(),
            optimizer: self.optimizer.clone(),
            epochs: self.train.epochs,
            steps_per_epoch: self.train.steps_per_epoch,
            val_fraction: self.train.val_fraction,
            seed,
        })
    }
}

/// All .wav files directly under `dir`, sorted by name so runs are stable.
pub fn list_wavs(dir: &Path) -> Result<Vec<PathBuf>, ConfigError> {
    let io_err = |source: std::io::Error| ConfigError::Io {
        path: dir.display().to_string(),
        source,
    };
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(io_err)? {
        let path = entry.map_err(io_err)?.path();
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("wav")) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}
