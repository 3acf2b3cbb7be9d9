//! Weak-label training loop.
//!
//! Clip-level targets supervise attention-pooled chunk predictions: each
//! batch item contributes the focal binary cross entropy of its best chunk
//! per class, weighted by the recording's quality rating. Optimization is
//! AdamW with decoupled weight decay under a cosine learning-rate schedule.
//! Every random draw flows from one base seed, so a rerun with the same
//! config and data reproduces the weights exactly.

use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::segment_clip;
use crate::dataset::{derive_seed, sample_batch, BatchConfig, ClipStore, Recording, SpeciesTable};
use crate::dsp::MelEngine;
use crate::model::{
    backward, clip_predictions, commit_running_stats, forward, route_clip_gradient,
    stack_spectrograms, Gradients, Mode, ModelConfig, ModelError, Tensor, Weights, BN_MOMENTUM,
};

/// Sigmoid outputs this close to 0 or 1 are nudged inside the open interval
/// before the log, so a saturated unit cannot produce an infinite loss.
const PROB_MARGIN: f64 = 1e-7;

const SPLIT_STREAM: u64 = 0xD1;
const INIT_STREAM: u64 = 0xD2;
const BATCH_STREAM: u64 = 0xD3;
const DROPOUT_STREAM: u64 = 0xD4;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {reason}")]
    InvalidConfig { reason: String },
    #[error("target vector is not binary: value {value}")]
    NonBinaryTarget { value: f64 },
    #[error("probability {value} outside [0, 1]")]
    ProbabilityOutOfRange { value: f64 },
    #[error("training halted at step {step}: loss became {loss}")]
    NonFiniteLoss { step: u64, loss: f64 },
    #[error("training halted at step {step}: gradient for {tensor} is not finite")]
    NonFiniteGradient { step: u64, tensor: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("batch sampling failed: {source}")]
    Batch {
        #[source]
        source: Box<crate::Error>,
    },
    #[error("validation pass failed: {source}")]
    Validation {
        #[source]
        source: Box<crate::Error>,
    },
    #[error("failed to write {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Loss shaping knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    /// Focal exponent; 0 recovers plain binary cross entropy.
    pub focal_gamma: f64,
    /// One-sided label smoothing: negative targets become this value,
    /// positives stay at 1. Absorbs unlabeled background calls.
    pub smoothing: f64,
    /// Scale each clip's loss by rating / 5.
    pub rating_weighting: bool,
    /// Weight used for unrated (rating 0) clips when rating weighting is on.
    pub unrated_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            focal_gamma: 2.0,
            smoothing: 0.01,
            rating_weighting: true,
            unrated_weight: 0.5,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let fail = |reason: String| Err(TrainError::InvalidConfig { reason });
        if !(self.focal_gamma.is_finite() && self.focal_gamma >= 0.0) {
            return fail(format!("focal_gamma must be >= 0, got {}", self.focal_gamma));
        }
        if !(0.0..0.5).contains(&self.smoothing) {
            return fail(format!("smoothing must be in [0, 0.5), got {}", self.smoothing));
        }
        if !(self.unrated_weight > 0.0 && self.unrated_weight <= 1.0) {
            return fail(format!(
                "unrated_weight must be in (0, 1], got {}",
                self.unrated_weight
            ));
        }
        Ok(())
    }
}

/// AdamW hyperparameters and the cosine schedule endpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub lr_max: f64,
    pub lr_min: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr_max: 1e-3,
            lr_min: 1e-6,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 1e-2,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let fail = |reason: String| Err(TrainError::InvalidConfig { reason });
        if !(self.lr_max.is_finite() && self.lr_max > 0.0) {
            return fail(format!("lr_max must be positive, got {}", self.lr_max));
        }
        if !(self.lr_min.is_finite() && self.lr_min >= 0.0 && self.lr_min <= self.lr_max) {
            return fail(format!("need 0 <= lr_min <= lr_max, got lr_min {}", self.lr_min));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return fail(format!("{name} must be in [0, 1), got {b}"));
            }
        }
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return fail(format!("epsilon must be positive, got {}", self.epsilon));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return fail(format!(
                "weight_decay must be >= 0, got {}",
                self.weight_decay
            ));
        }
        Ok(())
    }
}

/// Everything `train` needs beyond the data itself.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub batch: BatchConfig,
    pub loss: LossConfig,
    pub optimizer: OptimizerConfig,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    /// Fraction of recordings held out for the per-epoch validation score.
    pub val_fraction: f64,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        self.model.validate()?;
        self.loss.validate()?;
        self.optimizer.validate()?;
        let fail = |reason: String| Err(TrainError::InvalidConfig { reason });
        if self.epochs == 0 || self.steps_per_epoch == 0 {
            return fail("epochs and steps_per_epoch must be positive".to_string());
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return fail(format!(
                "val_fraction must be in [0, 1), got {}",
                self.val_fraction
            ));
        }
        Ok(())
    }
}

/// Raises negative targets to `value`; positives pass through. Targets must
/// be exactly 0 or 1.
pub fn smooth_labels(targets: &[f32], value: f64) -> Result<Vec<f64>, TrainError> {
    targets
        .iter()
        .map(|&t| {
            if t == 0.0 {
                Ok(value)
            } else if t == 1.0 {
                Ok(1.0)
            } else {
                Err(TrainError::NonBinaryTarget { value: f64::from(t) })
            }
        })
        .collect()
}

/// Focal binary cross entropy averaged over classes.
///
/// Per class, with p_t = y p + (1 - y)(1 - p), the loss is
/// (1 - p_t)^gamma * (-y ln p - (1 - y) ln(1 - p)). Returns the scalar loss
/// and its gradient with respect to each probability.
pub fn focal_bce(
    probs: &[f64],
    targets: &[f64],
    gamma: f64,
) -> Result<(f64, Vec<f64>), TrainError> {
    if probs.len() != targets.len() || probs.is_empty() {
        return Err(TrainError::InvalidConfig {
            reason: format!(
                "loss needs matching non-empty vectors, got {} probs and {} targets",
                probs.len(),
                targets.len()
            ),
        });
    }
    let k = probs.len() as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(probs.len());
    for (&p_raw, &y) in probs.iter().zip(targets) {
        if !(0.0..=1.0).contains(&p_raw) {
            return Err(TrainError::ProbabilityOutOfRange { value: p_raw });
        }
        let p = p_raw.clamp(PROB_MARGIN, 1.0 - PROB_MARGIN);
        let pt = y * p + (1.0 - y) * (1.0 - p);
        let bce = -y * p.ln() - (1.0 - y) * (1.0 - p).ln();
        let focal = (1.0 - pt).powf(gamma);
        loss += focal * bce;

        let d_bce = -y / p + (1.0 - y) / (1.0 - p);
        let d_focal = if gamma == 0.0 {
            0.0
        } else {
            gamma * (1.0 - pt).powf(gamma - 1.0) * (1.0 - 2.0 * y)
        };
        grad.push((d_focal * bce + focal * d_bce) / k);
    }
    Ok((loss / k, grad))
}

/// Focal loss of one clip with smoothing and rating weighting applied.
pub fn weighted_clip_loss(
    probs: &[f64],
    targets: &[f32],
    rating: f32,
    cfg: &LossConfig,
) -> Result<(f64, Vec<f64>), TrainError> {
    let smoothed = smooth_labels(targets, cfg.smoothing)?;
    let (loss, mut grad) = focal_bce(probs, &smoothed, cfg.focal_gamma)?;
    let w = if cfg.rating_weighting {
        if rating > 0.0 {
            f64::from(rating) / 5.0
        } else {
            cfg.unrated_weight
        }
    } else {
        1.0
    };
    for g in &mut grad {
        *g *= w;
    }
    Ok((loss * w, grad))
}

/// Cosine schedule from `lr_max` at step 0 to `lr_min` at `total` steps.
pub fn cosine_lr(step: u64, total: u64, lr_max: f64, lr_min: f64) -> Result<f64, TrainError> {
    if total == 0 {
        return Err(TrainError::InvalidConfig {
            reason: "cosine schedule needs at least one step".to_string(),
        });
    }
    let t = step.min(total) as f64 / total as f64;
    Ok(lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (std::f64::consts::PI * t).cos()))
}

/// AdamW moment buffers, aligned with `Weights::trainable` order.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl OptimizerState {
    #[must_use]
    pub fn new<F: crate::Real>(weights: &Weights<F>) -> Self {
        let shapes: Vec<usize> = weights.trainable().iter().map(|t| t.numel()).collect();
        Self {
            step: 0,
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    #[must_use]
    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One AdamW update. Weight decay is decoupled: it scales the weight
    /// directly instead of entering the moment estimates.
    pub fn apply<F: crate::Real>(
        &mut self,
        weights: &mut Weights<F>,
        grads: &Gradients<F>,
        lr: f64,
        cfg: &OptimizerConfig,
    ) -> Result<(), TrainError> {
        self.step += 1;
        let t = self.step;
        let bc1 = 1.0 - cfg.beta1.powi(t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(t as i32);
        let names = weights.trainable_names();
        let mut tensors = weights.trainable_mut();
        let grad_tensors = grads.trainable();
        for (ti, (w_t, g_t)) in tensors.iter_mut().zip(grad_tensors).enumerate() {
            let m = &mut self.m[ti];
            let v = &mut self.v[ti];
            for (i, (w, g)) in w_t.data_mut().iter_mut().zip(g_t.data()).enumerate() {
                let g = g.to_f();
                if !g.is_finite() {
                    return Err(TrainError::NonFiniteGradient {
                        step: t,
                        tensor: names[ti].clone(),
                    });
                }
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                let wf = w.to_f();
                let update = m_hat / (v_hat.sqrt() + cfg.epsilon) + cfg.weight_decay * wf;
                *w = F::from_f(wf - lr * update);
            }
        }
        Ok(())
    }
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    /// Global step count at the end of the epoch.
    pub step: u64,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
    /// Mean batch loss over the epoch.
    pub loss: f64,
    /// Micro F1 on the held-out recordings at threshold 0.5; absent when
    /// the validation split is empty.
    pub val_micro_f1: Option<f64>,
}

/// Writes the training log as CSV.
pub fn write_train_stats(path: &Path, stats: &[EpochStats]) -> Result<(), TrainError> {
    let io_err = |source: std::io::Error| TrainError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut out = String::from("epoch,step,lr,loss,val_micro_f1\n");
    for s in stats {
        let val = s
            .val_micro_f1
            .map(|v| v.to_string())
            .unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            s.epoch, s.step, s.lr, s.loss, val
        ));
    }
    std::fs::write(path, out).map_err(io_err)
}

/// Splits recordings into train and validation index sets, deterministically
/// from the base seed.
fn split_indices(n: usize, val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    use rand::seq::SliceRandom;
    let mut indices: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, SPLIT_STREAM, 0));
    indices.shuffle(&mut rng);
    let n_val = (val_fraction * n as f64).floor() as usize;
    let val = indices[..n_val].to_vec();
    let train = indices[n_val..].to_vec();
    (train, val)
}

/// Trains a model from scratch and returns the weights plus the per-epoch
/// log. Identical inputs produce bitwise-identical weights.
pub fn train(
    recordings: &[Recording],
    table: &SpeciesTable,
    cfg: &TrainConfig,
) -> Result<(Weights<f32>, Vec<EpochStats>), TrainError> {
    cfg.validate()?;
    cfg.batch
        .validate()
        .map_err(|e| TrainError::Batch { source: Box::new(e.into()) })?;
    if cfg.model.n_classes != table.len() {
        return Err(TrainError::InvalidConfig {
            reason: format!(
                "model has {} classes but the species table has {}",
                cfg.model.n_classes,
                table.len()
            ),
        });
    }
    if recordings.is_empty() {
        return Err(TrainError::InvalidConfig {
            reason: "no recordings to train on".to_string(),
        });
    }

    let (train_idx, val_idx) = split_indices(recordings.len(), cfg.val_fraction, cfg.seed);
    if train_idx.is_empty() {
        return Err(TrainError::InvalidConfig {
            reason: "validation split leaves no training recordings".to_string(),
        });
    }
    let train_set: Vec<Recording> = train_idx.iter().map(|&i| recordings[i].clone()).collect();
    let val_set: Vec<&Recording> = val_idx.iter().map(|&i| &recordings[i]).collect();

    let engine = MelEngine::<f32>::new(cfg.batch.spectrogram)
        .map_err(|e| TrainError::Batch { source: Box::new(e.into()) })?;
    let store = ClipStore::new(cfg.batch.spectrogram.sample_rate);

    let mut init_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, INIT_STREAM, 0));
    let mut weights = Weights::<f32>::init(&cfg.model, &mut init_rng)?;
    let mut opt = OptimizerState::new(&weights);
    let batch_base = derive_seed(cfg.seed, BATCH_STREAM, 0);
    let total_steps = (cfg.epochs * cfg.steps_per_epoch) as u64;

    let mut stats = Vec::with_capacity(cfg.epochs);
    let mut global_step = 0u64;
    for epoch in 0..cfg.epochs {
        let mut epoch_loss = 0.0f64;
        let mut last_lr = 0.0f64;
        for _ in 0..cfg.steps_per_epoch {
            let batch = sample_batch(
                &train_set,
                table,
                &cfg.batch,
                &engine,
                &store,
                batch_base,
                global_step,
            )
            .map_err(|e| TrainError::Batch { source: Box::new(e) })?;

            let mut specs = Vec::with_capacity(batch.items.len() * cfg.batch.n_chunks);
            for item in &batch.items {
                specs.extend(item.chunks.iter().cloned());
            }
            let input = stack_spectrograms(&specs)?;
            let mut dropout_rng =
                ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, DROPOUT_STREAM, global_step));
            let (output, cache) = forward(&weights, &input, Mode::Train, Some(&mut dropout_rng))?;
            let (preds, winners) = clip_predictions(&output.clipwise, cfg.batch.n_chunks)?;

            let k = cfg.model.n_classes;
            let mut batch_loss = 0.0f64;
            let mut d_items = Tensor::<f32>::zeros(&[batch.items.len(), k]);
            for (i, item) in batch.items.iter().enumerate() {
                let row: Vec<f64> = preds.data()[i * k..(i + 1) * k]
                    .iter()
                    .map(|&p| f64::from(p))
                    .collect();
                let (loss, grad) = weighted_clip_loss(&row, &item.targets, item.rating, &cfg.loss)?;
                batch_loss += loss;
                for (ki, g) in grad.into_iter().enumerate() {
                    d_items.data_mut()[i * k + ki] = g as f32;
                }
            }
            if !batch_loss.is_finite() {
                return Err(TrainError::NonFiniteLoss {
                    step: global_step,
                    loss: batch_loss,
                });
            }

            let d_clipwise = route_clip_gradient(&d_items, &winners, output.clipwise.shape()[0])?;
            let grads = backward(&weights, &output, &cache, &d_clipwise)?;
            let lr = cosine_lr(global_step, total_steps, cfg.optimizer.lr_max, cfg.optimizer.lr_min)?;
            opt.apply(&mut weights, &grads, lr, &cfg.optimizer)?;
            commit_running_stats(&mut weights, &cache, BN_MOMENTUM)?;

            epoch_loss += batch_loss;
            last_lr = lr;
            global_step += 1;
        }

        let val_micro_f1 = if val_set.is_empty() {
            None
        } else {
            Some(validation_micro_f1(&val_set, &weights, &engine, &store, cfg)?)
        };
        stats.push(EpochStats {
            epoch,
            step: global_step,
            lr: last_lr,
            loss: epoch_loss / cfg.steps_per_epoch as f64,
            val_micro_f1,
        });
    }
    Ok((weights, stats))
}

/// Micro F1 of thresholded clip predictions against the recordings' label
/// sets, at threshold 0.5. Empty truth with empty predictions scores 1.
fn validation_micro_f1(
    val_set: &[&Recording],
    weights: &Weights<f32>,
    engine: &MelEngine<f32>,
    store: &ClipStore,
    cfg: &TrainConfig,
) -> Result<f64, TrainError> {
    let wrap = |e: crate::Error| TrainError::Validation { source: Box::new(e) };
    let k = cfg.model.n_classes;
    let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
    for rec in val_set {
        let clip = store.get(&rec.audio_path).map_err(wrap)?;
        let segments = segment_clip(&clip, cfg.batch.chunk_seconds).map_err(|e| wrap(e.into()))?;
        let specs: Vec<_> = segments
            .iter()
            .map(|s| engine.mel_spectrogram(s))
            .collect::<Result<_, _>>()
            .map_err(|e| wrap(e.into()))?;
        let input = stack_spectrograms(&specs)?;
        let (output, _) = forward(weights, &input, Mode::Eval, None)?;
        let (preds, _) = clip_predictions(&output.clipwise, segments.len())?;
        let truth = rec.multi_hot(k);
        for (&p, &y) in preds.data().iter().zip(&truth) {
            let hit = p >= 0.5;
            let pos = y > 0.5;
            match (hit, pos) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                (false, false) => {}
            }
        }
    }
    let denom = 2 * tp + fp + fn_;
    Ok(if denom == 0 {
        1.0
    } else {
        2.0 * tp as f64 / denom as f64
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::{write_wav_pcm16, AudioClip};
    use crate::dsp::SpectrogramParams;
    use crate::model::check::{finite_difference, max_relative_error};

    #[test]
    fn smoothing_is_one_sided() {
        let s = smooth_labels(&[0.0, 1.0, 0.0], 0.01).unwrap();
        assert_eq!(s, vec![0.01, 1.0, 0.01]);
        assert!(matches!(
            smooth_labels(&[0.5], 0.01),
            Err(TrainError::NonBinaryTarget { .. })
        ));
    }

    #[test]
    fn focal_loss_matches_hand_computed_values() {
        // gamma 2, p 0.5, y 1: pt = 0.5, loss = 0.25 * ln 2.
        let (loss, _) = focal_bce(&[0.5], &[1.0], 2.0).unwrap();
        assert!((loss - 0.25 * std::f64::consts::LN_2).abs() < 1e-12);

        // gamma 0 recovers plain binary cross entropy.
        let (loss, _) = focal_bce(&[0.8], &[1.0], 0.0).unwrap();
        assert!((loss + 0.8f64.ln()).abs() < 1e-12);

        // Mean over classes: two identical classes keep the same loss.
        let (loss2, _) = focal_bce(&[0.5, 0.5], &[1.0, 1.0], 2.0).unwrap();
        assert!((loss2 - 0.25 * std::f64::consts::LN_2).abs() < 1e-12);

        assert!(focal_bce(&[1.5], &[1.0], 2.0).is_err());
        assert!(focal_bce(&[], &[], 2.0).is_err());
    }

    #[test]
    fn focal_gradient_matches_finite_differences() {
        let targets = [1.0, 0.0, 0.01, 1.0];
        let probs = [0.3, 0.7, 0.2, 0.9];
        for gamma in [0.0, 1.0, 2.0] {
            let (_, grad) = focal_bce(&probs, &targets, gamma).unwrap();
            let numeric = finite_difference(&probs, 1e-6, |p| {
                focal_bce(p, &targets, gamma).unwrap().0
            });
            let err = max_relative_error(&grad, &numeric, 1e-9);
            assert!(err < 1e-6, "gamma {gamma}: relative error {err}");
        }
    }

    #[test]
    fn rating_weight_scales_loss_and_gradient() {
        let cfg = LossConfig::default();
        let probs = [0.3, 0.6];
        let targets = [1.0f32, 0.0];
        let (l5, g5) = weighted_clip_loss(&probs, &targets, 5.0, &cfg).unwrap();
        let (l25, g25) = weighted_clip_loss(&probs, &targets, 2.5, &cfg).unwrap();
        assert!((l25 - 0.5 * l5).abs() < 1e-12);
        for (a, b) in g25.iter().zip(&g5) {
            assert!((a - 0.5 * b).abs() < 1e-12);
        }

        // Unrated clips fall back to the configured weight.
        let (l0, _) = weighted_clip_loss(&probs, &targets, 0.0, &cfg).unwrap();
        assert!((l0 - cfg.unrated_weight * l5).abs() < 1e-12);

        let flat = LossConfig {
            rating_weighting: false,
            ..LossConfig::default()
        };
        let (lf, _) = weighted_clip_loss(&probs, &targets, 1.0, &flat).unwrap();
        assert!((lf - l5).abs() < 1e-12);
    }

    #[test]
    fn cosine_schedule_hits_both_endpoints() {
        let lr0 = cosine_lr(0, 100, 1e-3, 1e-6).unwrap();
        assert!((lr0 - 1e-3).abs() < 1e-15);
        let lr_end = cosine_lr(100, 100, 1e-3, 1e-6).unwrap();
        assert!((lr_end - 1e-6).abs() < 1e-15);
        let lr_mid = cosine_lr(50, 100, 1e-3, 1e-6).unwrap();
        assert!((lr_mid - (1e-3 + 1e-6) / 2.0).abs() < 1e-12);
        // Steps past the horizon stay at the floor.
        let lr_past = cosine_lr(150, 100, 1e-3, 1e-6).unwrap();
        assert!((lr_past - 1e-6).abs() < 1e-15);
        assert!(cosine_lr(0, 0, 1e-3, 1e-6).is_err());
    }

    fn one_param_weights(value: f64) -> Weights<f64> {
        let cfg = ModelConfig {
            blocks: vec![1],
            n_classes: 1,
            attention_temperature: 1.0,
            dropout_rate: 0.0,
        };
        let mut w = Weights::<f64>::zeros(&cfg).unwrap();
        w.head.class_b.data_mut()[0] = value;
        w
    }

    #[test]
    fn adamw_first_step_is_a_signed_unit_step() {
        let mut w = one_param_weights(0.0);
        let mut g = Gradients::zeros_like(&w);
        g.head.class_b.data_mut()[0] = 100.0;

        let cfg = OptimizerConfig {
            weight_decay: 0.0,
            ..OptimizerConfig::default()
        };
        let mut opt = OptimizerState::new(&w);
        opt.apply(&mut w, &g, 0.1, &cfg).unwrap();
        // First step: m_hat / (sqrt(v_hat) + eps) = g / (|g| + eps), so the
        // update is a unit step times the learning rate.
        assert!((w.head.class_b.data()[0] + 0.1).abs() < 1e-8);
        assert_eq!(opt.step_count(), 1);
    }

    #[test]
    fn weight_decay_is_decoupled_from_the_gradient() {
        let mut w = one_param_weights(1.0);
        let zero_grads = Gradients::zeros_like(&w);
        let cfg = OptimizerConfig::default();
        let mut opt = OptimizerState::new(&w);
        opt.apply(&mut w, &zero_grads, 0.1, &cfg).unwrap();
        // Zero gradient leaves the moments at zero; only decay acts.
        let expect = 1.0 - 0.1 * cfg.weight_decay;
        assert!((w.head.class_b.data()[0] - expect).abs() < 1e-12);

        let mut bad = zero_grads;
        bad.head.class_b.data_mut()[0] = f64::NAN;
        assert!(matches!(
            opt.apply(&mut w, &bad, 0.1, &cfg),
            Err(TrainError::NonFiniteGradient { .. })
        ));
    }

    #[test]
    fn split_is_deterministic_and_disjoint() {
        let (t1, v1) = split_indices(10, 0.3, 99);
        let (t2, v2) = split_indices(10, 0.3, 99);
        assert_eq!(t1, t2);
        assert_eq!(v1, v2);
        assert_eq!(v1.len(), 3);
        let mut all: Vec<usize> = t1.iter().chain(&v1).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());

        let (t3, _) = split_indices(10, 0.3, 100);
        assert_ne!(t1, t3);
    }

    fn tone_clip(freq: f64, seconds: f64, rate: u32) -> AudioClip {
        let n = (seconds * f64::from(rate)).round() as usize;
        let samples = (0..n)
            .map(|i| {
                0.4 * (2.0 * std::f64::consts::PI * freq * i as f64 / f64::from(rate)).sin() as f32
            })
            .collect();
        AudioClip::new(samples, rate)
    }

    fn tiny_train_setup(dir: &Path) -> (Vec<Recording>, SpeciesTable, TrainConfig) {
        let rate = 8000;
        let mut recordings = Vec::new();
        for (i, freq) in [500.0, 900.0, 1400.0, 2100.0].iter().enumerate() {
            let path = dir.join(format!("rec{i}.wav"));
            write_wav_pcm16(&path, &tone_clip(*freq, 3.0, rate)).unwrap();
            recordings.push(Recording {
                audio_path: path,
                labels: vec![i % 2],
                rating: 4.0,
            });
        }
        let table = SpeciesTable::new(vec![("sp01".into(), true), ("sp02".into(), true)]).unwrap();
        let spectrogram = SpectrogramParams {
            sample_rate: rate,
            n_fft: 256,
            hop_size: 128,
            n_mels: 16,
            fmin: 100.0,
            fmax: 3500.0,
            ..SpectrogramParams::default()
        };
        let cfg = TrainConfig {
            model: ModelConfig {
                blocks: vec![2],
                n_classes: 2,
                attention_temperature: 1.0,
                dropout_rate: 0.2,
            },
            batch: BatchConfig {
                batch_size: 3,
                window_seconds: 2.0,
                chunk_seconds: 1.0,
                n_chunks: 2,
                spectrogram,
                ..BatchConfig::default()
            },
            loss: LossConfig::default(),
            optimizer: OptimizerConfig::default(),
            epochs: 2,
            steps_per_epoch: 2,
            val_fraction: 0.25,
            seed: 7,
        };
        (recordings, table, cfg)
    }

    #[test]
    fn training_runs_and_reruns_bitwise_identically() {
        let dir = tempfile::tempdir().unwrap();
        let (recordings, table, cfg) = tiny_train_setup(dir.path());

        let (w1, stats1) = train(&recordings, &table, &cfg).unwrap();
        let (w2, stats2) = train(&recordings, &table, &cfg).unwrap();
        assert_eq!(stats1.len(), 2);
        assert!(stats1.iter().all(|s| s.loss.is_finite()));
        assert!(stats1[0].val_micro_f1.is_some());
        assert_eq!(stats1, stats2);
        for (a, b) in w1.trainable().iter().zip(w2.trainable()) {
            assert_eq!(a.data(), b.data());
        }

        // The learning rate decays monotonically across epochs.
        assert!(stats1[1].lr < stats1[0].lr);

        let csv = dir.path().join("stats.csv");
        write_train_stats(&csv, &stats1).unwrap();
        let text = std::fs::read_to_string(&csv).unwrap();
        assert!(text.starts_with("epoch,step,lr,loss,val_micro_f1\n"));
        assert_eq!(text.lines().count(), 3);
    }

    #[test]
    fn training_rejects_mismatched_class_counts() {
        let dir = tempfile::tempdir().unwrap();
        let (recordings, table, mut cfg) = tiny_train_setup(dir.path());
        cfg.model.n_classes = 5;
        assert!(matches!(
            train(&recordings, &table, &cfg),
            Err(TrainError::InvalidConfig { .. })
        ));
    }
}
