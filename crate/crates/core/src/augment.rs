//! Training-time augmentations for long-tailed audio.
//!
//! Three families: background noise mixing at a target SNR in the waveform
//! domain, selective mixup of log-mel spectrograms with label union, and
//! rectangular time/frequency masking. All randomness comes from caller
//! provided RNGs so batches stay reproducible.

use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::AudioClip;
use crate::dsp::MelSpectrogram;
use crate::Real;

#[derive(Debug, Error)]
pub enum AugmentError {
    #[error("input clip is empty")]
    EmptyInput,
    #[error("clip rate {clip} does not match noise rate {noise}")]
    RateMismatch { clip: u32, noise: u32 },
    #[error("noise clip is silent, cannot scale it to a target SNR")]
    SilentNoise,
    #[error("spectrogram shapes differ: {a:?} vs {b:?}")]
    ShapeMismatch { a: (usize, usize), b: (usize, usize) },
    #[error("label vectors differ in length: {a} vs {b}")]
    LabelLengthMismatch { a: usize, b: usize },
    #[error("mixup weight {lambda} is outside [0, 1]")]
    LambdaOutOfRange { lambda: f64 },
    #[error("mixup partner must come from a recording whose primary label is scored")]
    UnscoredPartner,
    #[error("{axis} mask width {width} exceeds axis size {size}")]
    MaskWiderThanAxis {
        axis: &'static str,
        width: usize,
        size: usize,
    },
    #[error("invalid augmentation policy: {reason}")]
    InvalidPolicy { reason: String },
}

/// Mixup schedule: `Beta(alpha, alpha)` weights applied with a coin flip.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MixupPolicy {
    pub beta_alpha: f64,
    pub apply_probability: f64,
}

impl Default for MixupPolicy {
    fn default() -> Self {
        Self {
            beta_alpha: 1.0,
            apply_probability: 0.5,
        }
    }
}

impl MixupPolicy {
    pub fn validate(&self) -> Result<(), AugmentError> {
        if !(self.beta_alpha.is_finite() && self.beta_alpha > 0.0) {
            return Err(AugmentError::InvalidPolicy {
                reason: format!("beta_alpha must be positive, got {}", self.beta_alpha),
            });
        }
        if !(0.0..=1.0).contains(&self.apply_probability) {
            return Err(AugmentError::InvalidPolicy {
                reason: format!(
                    "apply_probability must be in [0, 1], got {}",
                    self.apply_probability
                ),
            });
        }
        Ok(())
    }
}

/// Rectangular masking over mel rows and time columns.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SpecAugmentPolicy {
    pub n_freq_masks: usize,
    pub max_freq_width: usize,
    pub n_time_masks: usize,
    pub max_time_width: usize,
    pub fill_value: f64,
}

impl Default for SpecAugmentPolicy {
    fn default() -> Self {
        Self {
            n_freq_masks: 2,
            max_freq_width: 16,
            n_time_masks: 2,
            max_time_width: 32,
            fill_value: -100.0,
        }
    }
}

/// Background-noise mixing schedule: SNR drawn uniformly from a dB range,
/// applied with a coin flip.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackgroundPolicy {
    pub snr_db_min: f64,
    pub snr_db_max: f64,
    pub apply_probability: f64,
}

impl Default for BackgroundPolicy {
    fn default() -> Self {
        Self {
            snr_db_min: 0.0,
            snr_db_max: 20.0,
            apply_probability: 0.5,
        }
    }
}

impl BackgroundPolicy {
    pub fn validate(&self) -> Result<(), AugmentError> {
        if !self.snr_db_min.is_finite() || !self.snr_db_max.is_finite() {
            return Err(AugmentError::InvalidPolicy {
                reason: "SNR bounds must be finite".to_string(),
            });
        }
        if self.snr_db_min > self.snr_db_max {
            return Err(AugmentError::InvalidPolicy {
                reason: format!(
                    "snr_db_min {} exceeds snr_db_max {}",
                    self.snr_db_min, self.snr_db_max
                ),
            });
        }
        if !(0.0..=1.0).contains(&self.apply_probability) {
            return Err(AugmentError::InvalidPolicy {
                reason: format!(
                    "apply_probability must be in [0, 1], got {}",
                    self.apply_probability
                ),
            });
        }
        Ok(())
    }

    /// Draws one SNR from the inclusive dB range.
    pub fn sample_snr<R: Rng>(&self, rng: &mut R) -> Result<f64, AugmentError> {
        self.validate()?;
        if self.snr_db_min == self.snr_db_max {
            return Ok(self.snr_db_min);
        }
        Ok(rng.random_range(self.snr_db_min..=self.snr_db_max))
    }
}

/// Adds `noise` to `clip` at `snr_db` decibels of signal-to-noise ratio.
///
/// The noise is tiled from its start when shorter than the clip. The gain is
/// `rms(clip) / rms(noise) * 10^(-snr/20)`; a silent clip falls back to
/// `10^(-snr/20)` so pure-noise beds can still be produced. If the mix would
/// clip, the whole output is renormalised to peak 1.
pub fn mix_background(
    clip: &AudioClip,
    noise: &AudioClip,
    snr_db: f64,
) -> Result<AudioClip, AugmentError> {
    if clip.is_empty() || noise.is_empty() {
        return Err(AugmentError::EmptyInput);
    }
    if clip.sample_rate != noise.sample_rate {
        return Err(AugmentError::RateMismatch {
            clip: clip.sample_rate,
            noise: noise.sample_rate,
        });
    }
    let noise_rms = noise.rms();
    if noise_rms == 0.0 {
        return Err(AugmentError::SilentNoise);
    }
    let attenuation = 10f64.powf(-snr_db / 20.0);
    let clip_rms = clip.rms();
    let gain = if clip_rms == 0.0 {
        attenuation
    } else {
        clip_rms / noise_rms * attenuation
    };

    let mut out: Vec<f64> = clip
        .samples
        .iter()
        .enumerate()
        .map(|(i, &s)| f64::from(s) + gain * f64::from(noise.samples[i % noise.len()]))
        .collect();
    let peak = out.iter().fold(0.0f64, |acc, &v| acc.max(v.abs()));
    if peak > 1.0 {
        for v in &mut out {
            *v /= peak;
        }
    }

    Ok(AudioClip::new(
        out.into_iter().map(|v| v as f32).collect(),
        clip.sample_rate,
    ))
}

/// Draws a mixup weight from `Beta(alpha, alpha)`.
pub fn sample_lambda<R: Rng>(policy: &MixupPolicy, rng: &mut R) -> Result<f64, AugmentError> {
    policy.validate()?;
    let beta = Beta::new(policy.beta_alpha, policy.beta_alpha).map_err(|e| {
        AugmentError::InvalidPolicy {
            reason: format!("beta distribution: {e}"),
        }
    })?;
    Ok(beta.sample(rng))
}

/// Blends two spectrograms in the dB domain, `lambda * a + (1 - lambda) * b`,
/// and unions their multi-hot labels. The partner must come from a recording
/// whose primary label is a scored species; callers enforce the sampling and
/// this checks the flag.
pub fn selective_mixup<F: Real>(
    spec_a: &MelSpectrogram<F>,
    labels_a: &[f32],
    spec_b: &MelSpectrogram<F>,
    labels_b: &[f32],
    partner_is_scored: bool,
    lambda: f64,
) -> Result<(MelSpectrogram<F>, Vec<f32>), AugmentError> {
    if !partner_is_scored {
        return Err(AugmentError::UnscoredPartner);
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(AugmentError::LambdaOutOfRange { lambda });
    }
    let shape_a = (spec_a.n_mels(), spec_a.n_frames);
    let shape_b = (spec_b.n_mels(), spec_b.n_frames);
    if shape_a != shape_b {
        return Err(AugmentError::ShapeMismatch { a: shape_a, b: shape_b });
    }
    if labels_a.len() != labels_b.len() {
        return Err(AugmentError::LabelLengthMismatch {
            a: labels_a.len(),
            b: labels_b.len(),
        });
    }

    let w_a = F::from_f(lambda);
    let w_b = F::from_f(1.0 - lambda);
    let values = spec_a
        .values
        .iter()
        .zip(&spec_b.values)
        .map(|(&a, &b)| a * w_a + b * w_b)
        .collect();
    let labels = labels_a
        .iter()
        .zip(labels_b)
        .map(|(&a, &b)| a.max(b))
        .collect();

    Ok((
        MelSpectrogram {
            params: spec_a.params,
            n_frames: spec_a.n_frames,
            values,
        },
        labels,
    ))
}

/// Masks random mel bands and time spans with the policy's fill value.
///
/// Draw order is fixed: for each frequency mask a width in `[0, max]` then a
/// start, then the same for time masks, so a seeded RNG reproduces the exact
/// masking.
pub fn spec_augment<F: Real, R: Rng>(
    spec: &MelSpectrogram<F>,
    policy: &SpecAugmentPolicy,
    rng: &mut R,
) -> Result<MelSpectrogram<F>, AugmentError> {
    let n_mels = spec.n_mels();
    let n_frames = spec.n_frames;
    if policy.max_freq_width > n_mels {
        return Err(AugmentError::MaskWiderThanAxis {
            axis: "frequency",
            width: policy.max_freq_width,
            size: n_mels,
        });
    }
    if policy.max_time_width > n_frames {
        return Err(AugmentError::MaskWiderThanAxis {
            axis: "time",
            width: policy.max_time_width,
            size: n_frames,
        });
    }

    let fill = F::from_f(policy.fill_value);
    let mut values = spec.values.clone();
    for _ in 0..policy.n_freq_masks {
        let width = rng.random_range(0..=policy.max_freq_width);
        let start = rng.random_range(0..=n_mels - width);
        for row in start..start + width {
            values[row * n_frames..(row + 1) * n_frames].fill(fill);
        }
    }
    for _ in 0..policy.n_time_masks {
        let width = rng.random_range(0..=policy.max_time_width);
        let start = rng.random_range(0..=n_frames - width);
        for row in 0..n_mels {
            values[row * n_frames + start..row * n_frames + start + width].fill(fill);
        }
    }

    Ok(MelSpectrogram {
        params: spec.params,
        n_frames,
        values,
    })
}
