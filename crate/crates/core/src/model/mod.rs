//! Micro CNN with a sound event detection head.
//!
//! The network is conv blocks (3x3 conv, batch norm, ReLU, 2x2 average
//! pool), a frequency-axis reduction (mean plus max over mel rows), dropout,
//! and a head producing per-frame class and attention logits. Tempered
//! softmax attention over time pools sigmoid frame probabilities into one
//! clip probability per class; a clip of several chunks takes the chunkwise
//! maximum. Forward never mutates weights: train-mode batch statistics are
//! returned in the cache and committed explicitly, which keeps gradient
//! checks pure.

pub mod check;
pub mod layers;

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dsp::{MelSpectrogram, SpectrogramParams};
use crate::Real;
use layers::{
    avgpool2_backward, avgpool2_forward, batchnorm_backward, batchnorm_forward_eval,
    batchnorm_forward_train, conv3x3_backward, conv3x3_forward, dropout_backward, dropout_forward,
    freq_reduce_backward, freq_reduce_forward, head_backward, head_forward, relu_backward,
    relu_forward, BnCache,
};

/// Momentum of the running batch-norm statistics.
pub const BN_MOMENTUM: f64 = 0.1;

const WEIGHTS_MAGIC: &[u8; 4] = b"SEDW";
const WEIGHTS_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {reason}")]
    InvalidConfig { reason: String },
    #[error("shape mismatch: {context}")]
    ShapeMismatch { context: String },
    #[error("tensor {tensor} contains a non-finite value")]
    NonFinite { tensor: String },
    #[error("backward needs a cache from a train-mode forward pass")]
    MissingCache,
    #[error("class index {class} out of range for {n_classes} classes")]
    InvalidClass { class: usize, n_classes: usize },
    #[error("failed to access {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("{path}: not a weights file ({reason})")]
    BadFormat { path: String, reason: String },
}

/// Dense row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<F> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Real> Tensor<F> {
    #[must_use]
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![F::zero(); shape.iter().product()],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<F>) -> Result<Self, ModelError> {
        let expect: usize = shape.iter().product();
        if data.len() != expect {
            return Err(ModelError::ShapeMismatch {
                context: format!("{} values cannot fill shape {shape:?}", data.len()),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    #[must_use]
    pub fn from_f64(shape: &[usize], data: &[f64]) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self {
            shape: shape.to_vec(),
            data: data.iter().map(|&v| F::from_f(v)).collect(),
        }
    }

    #[must_use]
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    #[must_use]
    pub fn numel(&self) -> usize {
        self.data.len()
    }

    #[must_use]
    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Output channels of each conv block, in order.
    pub blocks: Vec<usize>,
    pub n_classes: usize,
    pub attention_temperature: f64,
    pub dropout_rate: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            blocks: vec![16, 32],
            n_classes: 0,
            attention_temperature: 1.0,
            dropout_rate: 0.2,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |reason: String| Err(ModelError::InvalidConfig { reason });
        if self.blocks.is_empty() {
            return fail("need at least one conv block".into());
        }
        if self.blocks.contains(&0) {
            return fail("conv blocks need at least one channel".into());
        }
        if self.n_classes == 0 {
            return fail("need at least one class".into());
        }
        if !(self.attention_temperature.is_finite() && self.attention_temperature > 0.0) {
            return fail(format!(
                "attention_temperature must be positive, got {}",
                self.attention_temperature
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return fail(format!(
                "dropout_rate must be in [0, 1), got {}",
                self.dropout_rate
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvBlockParams<F> {
    pub conv_w: Tensor<F>,
    pub conv_b: Tensor<F>,
    pub bn_gamma: Tensor<F>,
    pub bn_beta: Tensor<F>,
    pub bn_running_mean: Tensor<F>,
    pub bn_running_var: Tensor<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams<F> {
    pub class_w: Tensor<F>,
    pub class_b: Tensor<F>,
    pub att_w: Tensor<F>,
    pub att_b: Tensor<F>,
}

/// All network parameters plus the config that shapes them.
#[derive(Debug, Clone, PartialEq)]
pub struct Weights<F> {
    pub config: ModelConfig,
    pub blocks: Vec<ConvBlockParams<F>>,
    pub head: HeadParams<F>,
}

impl<F: Real> Weights<F> {
    /// Fresh weights: He-normal conv kernels, unit batch norm, small-normal
    /// head maps, zero biases. Draws f64 normals in declaration order, so
    /// f32 and f64 builds share one stream.
    pub fn init(config: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self, ModelError> {
        config.validate()?;
        let mut blocks = Vec::with_capacity(config.blocks.len());
        let mut cin = 1usize;
        for &cout in &config.blocks {
            let std = (2.0 / (cin as f64 * 9.0)).sqrt();
            blocks.push(ConvBlockParams {
                conv_w: normal_tensor(&[cout, cin, 3, 3], std, rng),
                conv_b: Tensor::zeros(&[cout]),
                bn_gamma: Tensor::from_f64(&[cout], &vec![1.0; cout]),
                bn_beta: Tensor::zeros(&[cout]),
                bn_running_mean: Tensor::zeros(&[cout]),
                bn_running_var: Tensor::from_f64(&[cout], &vec![1.0; cout]),
            });
            cin = cout;
        }
        let k = config.n_classes;
        let std = (1.0 / cin as f64).sqrt();
        let head = HeadParams {
            class_w: normal_tensor(&[k, cin], std, rng),
            class_b: Tensor::zeros(&[k]),
            att_w: normal_tensor(&[k, cin], std, rng),
            att_b: Tensor::zeros(&[k]),
        };
        Ok(Self {
            config: config.clone(),
            blocks,
            head,
        })
    }

    /// All-zero weights with the right shapes (useful as a gradient shell).
    pub fn zeros(config: &ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut w = Self::init(config, &mut rng)?;
        for t in w.all_tensors_mut() {
            for v in t.data_mut() {
                *v = F::zero();
            }
        }
        Ok(w)
    }

    #[must_use]
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<F>)> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("conv{i}.weight"), &b.conv_w));
            out.push((format!("conv{i}.bias"), &b.conv_b));
            out.push((format!("bn{i}.gamma"), &b.bn_gamma));
            out.push((format!("bn{i}.beta"), &b.bn_beta));
            out.push((format!("bn{i}.running_mean"), &b.bn_running_mean));
            out.push((format!("bn{i}.running_var"), &b.bn_running_var));
        }
        out.push(("head.class_w".into(), &self.head.class_w));
        out.push(("head.class_b".into(), &self.head.class_b));
        out.push(("head.att_w".into(), &self.head.att_w));
        out.push(("head.att_b".into(), &self.head.att_b));
        out
    }

    fn all_tensors_mut(&mut self) -> Vec<&mut Tensor<F>> {
        let mut out = Vec::new();
        for b in &mut self.blocks {
            out.push(&mut b.conv_w);
            out.push(&mut b.conv_b);
            out.push(&mut b.bn_gamma);
            out.push(&mut b.bn_beta);
            out.push(&mut b.bn_running_mean);
            out.push(&mut b.bn_running_var);
        }
        out.push(&mut self.head.class_w);
        out.push(&mut self.head.class_b);
        out.push(&mut self.head.att_w);
        out.push(&mut self.head.att_b);
        out
    }

    /// Names of the trainable tensors, aligned with `trainable` order.
    #[must_use]
    pub fn trainable_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        for i in 0..self.blocks.len() {
            out.push(format!("conv{i}.weight"));
            out.push(format!("conv{i}.bias"));
            out.push(format!("bn{i}.gamma"));
            out.push(format!("bn{i}.beta"));
        }
        out.extend(
            ["head.class_w", "head.class_b", "head.att_w", "head.att_b"]
                .map(str::to_string),
        );
        out
    }

    /// Trainable tensors in optimizer order; running statistics excluded.
    #[must_use]
    pub fn trainable(&self) -> Vec<&Tensor<F>> {
        let mut out = Vec::new();
        for b in &self.blocks {
            out.extend([&b.conv_w, &b.conv_b, &b.bn_gamma, &b.bn_beta]);
        }
        out.extend([
            &self.head.class_w,
            &self.head.class_b,
            &self.head.att_w,
            &self.head.att_b,
        ]);
        out
    }

    pub fn trainable_mut(&mut self) -> Vec<&mut Tensor<F>> {
        let mut out = Vec::new();
        for b in &mut self.blocks {
            out.push(&mut b.conv_w);
            out.push(&mut b.conv_b);
            out.push(&mut b.bn_gamma);
            out.push(&mut b.bn_beta);
        }
        out.push(&mut self.head.class_w);
        out.push(&mut self.head.class_b);
        out.push(&mut self.head.att_w);
        out.push(&mut self.head.att_b);
        out
    }

    /// Checks shape consistency against the config and rejects non-finite
    /// values anywhere.
    pub fn validate(&self) -> Result<(), ModelError> {
        self.config.validate()?;
        if self.blocks.len() != self.config.blocks.len() {
            return Err(ModelError::ShapeMismatch {
                context: format!(
                    "{} parameter blocks for {} configured blocks",
                    self.blocks.len(),
                    self.config.blocks.len()
                ),
            });
        }
        let mut cin = 1usize;
        for (i, (b, &cout)) in self.blocks.iter().zip(&self.config.blocks).enumerate() {
            if b.conv_w.shape() != [cout, cin, 3, 3] || b.conv_b.shape() != [cout] {
                return Err(ModelError::ShapeMismatch {
                    context: format!("conv{i} parameters do not match {cin}->{cout} channels"),
                });
            }
            for t in [&b.bn_gamma, &b.bn_beta, &b.bn_running_mean, &b.bn_running_var] {
                if t.shape() != [cout] {
                    return Err(ModelError::ShapeMismatch {
                        context: format!("bn{i} parameters do not match {cout} channels"),
                    });
                }
            }
            cin = cout;
        }
        let k = self.config.n_classes;
        if self.head.class_w.shape() != [k, cin]
            || self.head.class_b.shape() != [k]
            || self.head.att_w.shape() != [k, cin]
            || self.head.att_b.shape() != [k]
        {
            return Err(ModelError::ShapeMismatch {
                context: format!("head parameters do not match {k} classes x {cin} features"),
            });
        }
        for (name, t) in self.named_tensors() {
            if t.data().iter().any(|v| !v.is_finite()) {
                return Err(ModelError::NonFinite { tensor: name });
            }
        }
        Ok(())
    }
}

fn normal_tensor<F: Real>(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Tensor<F> {
    let n: usize = shape.iter().product();
    let data: Vec<F> = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            F::from_f(z * std)
        })
        .collect();
    Tensor {
        shape: shape.to_vec(),
        data,
    }
}

/// Gradients of every trainable tensor, mirroring `Weights` order.
#[derive(Debug, Clone)]
pub struct Gradients<F> {
    pub blocks: Vec<BlockGrads<F>>,
    pub head: HeadGrads<F>,
}

#[derive(Debug, Clone)]
pub struct BlockGrads<F> {
    pub conv_w: Tensor<F>,
    pub conv_b: Tensor<F>,
    pub bn_gamma: Tensor<F>,
    pub bn_beta: Tensor<F>,
}

#[derive(Debug, Clone)]
pub struct HeadGrads<F> {
    pub class_w: Tensor<F>,
    pub class_b: Tensor<F>,
    pub att_w: Tensor<F>,
    pub att_b: Tensor<F>,
}

impl<F: Real> Gradients<F> {
    /// All-zero gradients shaped like the given weights.
    #[must_use]
    pub fn zeros_like(weights: &Weights<F>) -> Self {
        Self {
            blocks: weights
                .blocks
                .iter()
                .map(|b| BlockGrads {
                    conv_w: Tensor::zeros(b.conv_w.shape()),
                    conv_b: Tensor::zeros(b.conv_b.shape()),
                    bn_gamma: Tensor::zeros(b.bn_gamma.shape()),
                    bn_beta: Tensor::zeros(b.bn_beta.shape()),
                })
                .collect(),
            head: HeadGrads {
                class_w: Tensor::zeros(weights.head.class_w.shape()),
                class_b: Tensor::zeros(weights.head.class_b.shape()),
                att_w: Tensor::zeros(weights.head.att_w.shape()),
                att_b: Tensor::zeros(weights.head.att_b.shape()),
            },
        }
    }

    /// Trainable gradient tensors, aligned with `Weights::trainable`.
    #[must_use]
    pub fn trainable(&self) -> Vec<&Tensor<F>> {
        let mut out = Vec::new();
        for b in &self.blocks {
            out.extend([&b.conv_w, &b.conv_b, &b.bn_gamma, &b.bn_beta]);
        }
        out.extend([
            &self.head.class_w,
            &self.head.class_b,
            &self.head.att_w,
            &self.head.att_b,
        ]);
        out
    }

    /// Elementwise sum, for accumulating over loss terms.
    pub fn add(&mut self, other: &Gradients<F>) {
        let mut mine = Vec::new();
        for b in &mut self.blocks {
            mine.extend([&mut b.conv_w, &mut b.conv_b, &mut b.bn_gamma, &mut b.bn_beta]);
        }
        mine.extend([
            &mut self.head.class_w,
            &mut self.head.class_b,
            &mut self.head.att_w,
            &mut self.head.att_b,
        ]);
        let theirs = other.trainable();
        for (m, t) in mine.into_iter().zip(theirs) {
            for (a, b) in m.data_mut().iter_mut().zip(t.data()) {
                *a += *b;
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Per-chunk network outputs.
#[derive(Debug, Clone)]
pub struct ModelOutput<F> {
    /// (N, K) attention-pooled clip probabilities.
    pub clipwise: Tensor<F>,
    /// (N, K, T) per-frame sigmoid probabilities.
    pub segmentwise: Tensor<F>,
    /// (N, K, T) attention weights; each (n, k) row sums to 1.
    pub attention: Tensor<F>,
}

/// Activation cache from a forward pass. Train mode fills the per-block
/// caches needed by `backward`; eval mode keeps only the tail the Grad-CAM
/// path uses.
pub struct Cache<F> {
    mode: Mode,
    blocks: Vec<BlockCacheEntry<F>>,
    /// Last conv block output (N, C, H', T); Grad-CAM's feature map.
    pub feature_map: Tensor<F>,
    freq_argmax: Vec<usize>,
    reduce_h: usize,
    dropout_mask: Option<Vec<bool>>,
    features: Tensor<F>,
}

struct BlockCacheEntry<F> {
    conv_input: Tensor<F>,
    xhat: Tensor<F>,
    bn: BnCache,
    relu_mask: Vec<bool>,
    pre_pool: (usize, usize),
}

/// Stacks per-chunk spectrograms into an (N, 1, n_mels, n_frames) batch.
pub fn stack_spectrograms<F: Real>(specs: &[MelSpectrogram<F>]) -> Result<Tensor<F>, ModelError> {
    let first = specs.first().ok_or_else(|| ModelError::ShapeMismatch {
        context: "cannot stack zero spectrograms".to_string(),
    })?;
    let h = first.n_mels();
    let w = first.n_frames;
    let mut data = Vec::with_capacity(specs.len() * h * w);
    for s in specs {
        if s.n_mels() != h || s.n_frames != w {
            return Err(ModelError::ShapeMismatch {
                context: format!(
                    "spectrogram {}x{} differs from first {h}x{w}",
                    s.n_mels(),
                    s.n_frames
                ),
            });
        }
        data.extend(s.values.iter().copied());
    }
    Tensor::from_vec(&[specs.len(), 1, h, w], data)
}

/// Runs the network on a chunk batch shaped (N, 1, n_mels, n_frames).
///
/// Train mode normalizes with batch statistics, applies dropout (the rng is
/// required when the rate is positive), and caches activations for
/// `backward`; running statistics are not touched here, commit them with
/// `commit_running_stats`. Eval mode uses running statistics, skips dropout,
/// and is deterministic.
pub fn forward<F: Real>(
    weights: &Weights<F>,
    input: &Tensor<F>,
    mode: Mode,
    mut dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<(ModelOutput<F>, Cache<F>), ModelError> {
    weights.validate()?;
    let shape = input.shape();
    if shape.len() != 4 || shape[1] != 1 {
        return Err(ModelError::ShapeMismatch {
            context: format!("expected input (N, 1, mels, frames), got {shape:?}"),
        });
    }
    let rate = weights.config.dropout_rate;
    if mode == Mode::Train && rate > 0.0 && dropout_rng.is_none() {
        return Err(ModelError::InvalidConfig {
            reason: "train-mode forward with dropout needs an rng".to_string(),
        });
    }

    let mut block_caches = Vec::new();
    let mut current = input.clone();
    for params in &weights.blocks {
        let conv_input = current;
        let mut y = conv3x3_forward(&conv_input, &params.conv_w, &params.conv_b)?;
        let pre_pool = (y.shape()[2], y.shape()[3]);
        match mode {
            Mode::Train => {
                let (out, xhat, bn) =
                    batchnorm_forward_train(&y, &params.bn_gamma, &params.bn_beta)?;
                y = out;
                let relu_mask = relu_forward(&mut y);
                current = avgpool2_forward(&y)?;
                block_caches.push(BlockCacheEntry {
                    conv_input,
                    xhat,
                    bn,
                    relu_mask,
                    pre_pool,
                });
            }
            Mode::Eval => {
                y = batchnorm_forward_eval(
                    &y,
                    &params.bn_gamma,
                    &params.bn_beta,
                    &params.bn_running_mean,
                    &params.bn_running_var,
                )?;
                relu_forward(&mut y);
                current = avgpool2_forward(&y)?;
            }
        }
    }

    let feature_map = current;
    let reduce_h = feature_map.shape()[2];
    let (mut features, freq_argmax) = freq_reduce_forward(&feature_map)?;
    let dropout_mask = if mode == Mode::Train && rate > 0.0 {
        let rng = dropout_rng.as_mut().expect("checked above");
        Some(dropout_forward(&mut features, rate, *rng))
    } else {
        None
    };
    let (segmentwise, attention, clipwise) = head_forward(
        &features,
        &weights.head.class_w,
        &weights.head.class_b,
        &weights.head.att_w,
        &weights.head.att_b,
        weights.config.attention_temperature,
    )?;

    Ok((
        ModelOutput {
            clipwise,
            segmentwise,
            attention,
        },
        Cache {
            mode,
            blocks: block_caches,
            feature_map,
            freq_argmax,
            reduce_h,
            dropout_mask,
            features,
        },
    ))
}

/// Exact gradients of a scalar loss w.r.t. every trainable tensor, given
/// the loss gradient on the clip probabilities. Linear in `d_clipwise`, so
/// batch contributions add.
pub fn backward<F: Real>(
    weights: &Weights<F>,
    output: &ModelOutput<F>,
    cache: &Cache<F>,
    d_clipwise: &Tensor<F>,
) -> Result<Gradients<F>, ModelError> {
    if cache.mode != Mode::Train || cache.blocks.len() != weights.blocks.len() {
        return Err(ModelError::MissingCache);
    }
    let (mut d_features, d_cw, d_cb, d_aw, d_ab) = head_backward(
        d_clipwise,
        &cache.features,
        &weights.head.class_w,
        &weights.head.att_w,
        &output.segmentwise,
        &output.attention,
        &output.clipwise,
        weights.config.attention_temperature,
    )?;
    if let Some(mask) = &cache.dropout_mask {
        dropout_backward(&mut d_features, mask, weights.config.dropout_rate);
    }
    let mut d = freq_reduce_backward(&d_features, &cache.freq_argmax, cache.reduce_h)?;

    let mut block_grads: Vec<Option<BlockGrads<F>>> = (0..weights.blocks.len()).map(|_| None).collect();
    for (i, params) in weights.blocks.iter().enumerate().rev() {
        let bc = &cache.blocks[i];
        let mut dy = avgpool2_backward(&d, bc.pre_pool.0, bc.pre_pool.1)?;
        relu_backward(&mut dy, &bc.relu_mask);
        let (dx, d_gamma, d_beta) = batchnorm_backward(&dy, &bc.xhat, &params.bn_gamma, &bc.bn)?;
        let (d_in, d_w, d_b) = conv3x3_backward(&bc.conv_input, &params.conv_w, &dx)?;
        block_grads[i] = Some(BlockGrads {
            conv_w: d_w,
            conv_b: d_b,
            bn_gamma: d_gamma,
            bn_beta: d_beta,
        });
        d = d_in;
    }
    Ok(Gradients {
        blocks: block_grads.into_iter().map(|g| g.expect("all blocks visited")).collect(),
        head: HeadGrads {
            class_w: d_cw,
            class_b: d_cb,
            att_w: d_aw,
            att_b: d_ab,
        },
    })
}

/// Folds the cached batch statistics into the running statistics.
pub fn commit_running_stats<F: Real>(
    weights: &mut Weights<F>,
    cache: &Cache<F>,
    momentum: f64,
) -> Result<(), ModelError> {
    if cache.mode != Mode::Train || cache.blocks.len() != weights.blocks.len() {
        return Err(ModelError::MissingCache);
    }
    for (params, bc) in weights.blocks.iter_mut().zip(&cache.blocks) {
        for (slot, &stat) in params
            .bn_running_mean
            .data_mut()
            .iter_mut()
            .zip(&bc.bn.mean)
        {
            *slot = F::from_f((1.0 - momentum) * slot.to_f() + momentum * stat);
        }
        for (slot, &stat) in params.bn_running_var.data_mut().iter_mut().zip(&bc.bn.var) {
            *slot = F::from_f((1.0 - momentum) * slot.to_f() + momentum * stat);
        }
    }
    Ok(())
}

/// Reduces per-chunk clip probabilities to per-item predictions by the
/// chunkwise maximum. Returns the predictions (items, K) and, per (item,
/// class), the flat chunk row that won (first row on ties), which is where
/// the loss gradient routes back.
pub fn clip_predictions<F: Real>(
    clipwise: &Tensor<F>,
    n_chunks: usize,
) -> Result<(Tensor<F>, Vec<usize>), ModelError> {
    let shape = clipwise.shape();
    if shape.len() != 2 || n_chunks == 0 || !shape[0].is_multiple_of(n_chunks) {
        return Err(ModelError::ShapeMismatch {
            context: format!(
                "clipwise {shape:?} does not divide into chunks of {n_chunks}"
            ),
        });
    }
    let k = shape[1];
    let items = shape[0] / n_chunks;
    let mut preds = Tensor::zeros(&[items, k]);
    let mut winners = vec![0usize; items * k];
    let data = clipwise.data();
    for item in 0..items {
        for ki in 0..k {
            let mut best_row = item * n_chunks;
            let mut best = data[best_row * k + ki];
            for chunk in 1..n_chunks {
                let row = item * n_chunks + chunk;
                let v = data[row * k + ki];
                if v > best {
                    best = v;
                    best_row = row;
                }
            }
            preds.data_mut()[item * k + ki] = best;
            winners[item * k + ki] = best_row;
        }
    }
    Ok((preds, winners))
}

/// Scatters per-item prediction gradients back onto the winning chunk rows.
pub fn route_clip_gradient<F: Real>(
    d_items: &Tensor<F>,
    winners: &[usize],
    n_rows: usize,
) -> Result<Tensor<F>, ModelError> {
    let shape = d_items.shape();
    if shape.len() != 2 || winners.len() != shape[0] * shape[1] {
        return Err(ModelError::ShapeMismatch {
            context: "per-item gradient does not match winner map".to_string(),
        });
    }
    let k = shape[1];
    let mut out = Tensor::zeros(&[n_rows, k]);
    for (i, &row) in winners.iter().enumerate() {
        let ki = i % k;
        if row >= n_rows {
            return Err(ModelError::ShapeMismatch {
                context: "winner row out of range".to_string(),
            });
        }
        out.data_mut()[row * k + ki] = d_items.data()[i];
    }
    Ok(out)
}

/// Grad-CAM heatmap of `class` over the last conv feature map.
///
/// Channel weights are the spatial mean of the clip-probability gradient on
/// the feature map; the weighted channel sum is rectified and min-max
/// normalized (an all-constant map stays all zero).
pub fn grad_cam<F: Real>(
    weights: &Weights<F>,
    spec: &MelSpectrogram<F>,
    class: usize,
) -> Result<Tensor<F>, ModelError> {
    let k = weights.config.n_classes;
    if class >= k {
        return Err(ModelError::InvalidClass {
            class,
            n_classes: k,
        });
    }
    let input = stack_spectrograms(std::slice::from_ref(spec))?;
    let (output, cache) = forward(weights, &input, Mode::Eval, None)?;

    let mut d_clip = Tensor::zeros(&[1, k]);
    d_clip.data_mut()[class] = F::one();
    let (d_features, ..) = head_backward(
        &d_clip,
        &cache.features,
        &weights.head.class_w,
        &weights.head.att_w,
        &output.segmentwise,
        &output.attention,
        &output.clipwise,
        weights.config.attention_temperature,
    )?;
    let d_map = freq_reduce_backward(&d_features, &cache.freq_argmax, cache.reduce_h)?;

    let (_, c, h, t) = (
        d_map.shape()[0],
        d_map.shape()[1],
        d_map.shape()[2],
        d_map.shape()[3],
    );
    let plane = h * t;
    let mut heat = vec![0.0f64; plane];
    for ci in 0..c {
        let mut alpha = 0.0f64;
        for &g in &d_map.data()[ci * plane..(ci + 1) * plane] {
            alpha += g.to_f();
        }
        alpha /= plane as f64;
        let a_plane = &cache.feature_map.data()[ci * plane..(ci + 1) * plane];
        for (hv, &av) in heat.iter_mut().zip(a_plane) {
            *hv += alpha * av.to_f();
        }
    }
    for v in &mut heat {
        *v = v.max(0.0);
    }
    let max = heat.iter().copied().fold(0.0f64, f64::max);
    let min = heat.iter().copied().fold(f64::INFINITY, f64::min);
    if max > min {
        for v in &mut heat {
            *v = (*v - min) / (max - min);
        }
    } else {
        heat.iter_mut().for_each(|v| *v = 0.0);
    }
    Ok(Tensor::from_f64(&[h, t], &heat))
}

/// Metadata stored alongside the weights so inference is self-contained.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelMeta {
    /// Class names in output order.
    pub species: Vec<String>,
    pub spectrogram: SpectrogramParams,
    pub chunk_seconds: f64,
}

/// Writes config, metadata, and all tensors as little-endian float32.
/// Save and load round-trip to byte-identical files.
pub fn save_weights<F: Real>(
    weights: &Weights<F>,
    meta: &ModelMeta,
    path: &Path,
) -> Result<(), ModelError> {
    weights.validate()?;
    if meta.species.len() != weights.config.n_classes {
        return Err(ModelError::InvalidConfig {
            reason: format!(
                "{} species names for {} classes",
                meta.species.len(),
                weights.config.n_classes
            ),
        });
    }
    let mut header = String::new();
    let blocks: Vec<String> = weights.config.blocks.iter().map(|c| c.to_string()).collect();
    let _ = writeln!(header, "blocks={}", blocks.join(","));
    let _ = writeln!(header, "n_classes={}", weights.config.n_classes);
    let _ = writeln!(
        header,
        "attention_temperature={}",
        weights.config.attention_temperature
    );
    let _ = writeln!(header, "dropout_rate={}", weights.config.dropout_rate);
    let _ = writeln!(header, "species={}", meta.species.join(" "));
    let sp = &meta.spectrogram;
    let _ = writeln!(header, "sample_rate={}", sp.sample_rate);
    let _ = writeln!(header, "n_fft={}", sp.n_fft);
    let _ = writeln!(header, "hop_size={}", sp.hop_size);
    let _ = writeln!(header, "n_mels={}", sp.n_mels);
    let _ = writeln!(header, "fmin={}", sp.fmin);
    let _ = writeln!(header, "fmax={}", sp.fmax);
    let _ = writeln!(header, "power={}", sp.power);
    let _ = writeln!(header, "power_floor={}", sp.power_floor);
    let _ = writeln!(header, "chunk_seconds={}", meta.chunk_seconds);

    let named = weights.named_tensors();
    let mut bytes = Vec::new();
    bytes.extend_from_slice(WEIGHTS_MAGIC);
    bytes.extend_from_slice(&WEIGHTS_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(header.len() as u32).to_le_bytes());
    bytes.extend_from_slice(header.as_bytes());
    bytes.extend_from_slice(&(named.len() as u32).to_le_bytes());
    for (name, t) in named {
        bytes.extend_from_slice(&(name.len() as u16).to_le_bytes());
        bytes.extend_from_slice(name.as_bytes());
        bytes.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            bytes.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            bytes.extend_from_slice(&(v.to_f() as f32).to_le_bytes());
        }
    }
    fs::write(path, &bytes).map_err(|source| ModelError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Byte cursor over a weights file; every read failure names the file.
struct WeightsReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a str,
}

impl<'a> WeightsReader<'a> {
    fn bad(&self, reason: impl Into<String>) -> ModelError {
        ModelError::BadFormat {
            path: self.path.to_string(),
            reason: reason.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| self.bad("truncated"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn take_u16(&mut self) -> Result<u16, ModelError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn take_u32(&mut self) -> Result<u32, ModelError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn take_str(&mut self, n: usize) -> Result<&'a str, ModelError> {
        let s = self.take(n)?;
        std::str::from_utf8(s).map_err(|_| self.bad("not UTF-8"))
    }
}

pub fn load_weights<F: Real>(path: &Path) -> Result<(Weights<F>, ModelMeta), ModelError> {
    let display = path.display().to_string();
    let bytes = fs::read(path).map_err(|source| ModelError::Io {
        path: display.clone(),
        source,
    })?;
    let mut r = WeightsReader {
        bytes: &bytes,
        pos: 0,
        path: &display,
    };

    if r.take(4)? != WEIGHTS_MAGIC {
        return Err(r.bad("wrong magic"));
    }
    let version = r.take_u32()?;
    if version != WEIGHTS_VERSION {
        return Err(r.bad(format!("unsupported version {version}")));
    }
    let header_len = r.take_u32()? as usize;
    let header = r.take_str(header_len)?.to_string();

    let mut fields = std::collections::HashMap::new();
    for line in header.lines() {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| r.bad("malformed header line"))?;
        fields.insert(k.to_string(), v.to_string());
    }
    let field = |k: &str| -> Result<&str, ModelError> {
        fields
            .get(k)
            .map(String::as_str)
            .ok_or_else(|| ModelError::BadFormat {
                path: display.clone(),
                reason: format!("missing header field {k}"),
            })
    };
    let parse_f64 = |k: &str| -> Result<f64, ModelError> {
        field(k)?.parse().map_err(|_| ModelError::BadFormat {
            path: display.clone(),
            reason: format!("unparseable header field {k}"),
        })
    };
    let parse_usize = |k: &str| -> Result<usize, ModelError> {
        field(k)?.parse().map_err(|_| ModelError::BadFormat {
            path: display.clone(),
            reason: format!("unparseable header field {k}"),
        })
    };

    let blocks: Vec<usize> = field("blocks")?
        .split(',')
        .map(|s| s.trim().parse::<usize>())
        .collect::<Result<_, _>>()
        .map_err(|_| ModelError::BadFormat {
            path: display.clone(),
            reason: "unparseable blocks list".to_string(),
        })?;
    let config = ModelConfig {
        blocks,
        n_classes: parse_usize("n_classes")?,
        attention_temperature: parse_f64("attention_temperature")?,
        dropout_rate: parse_f64("dropout_rate")?,
    };
    let species: Vec<String> = field("species")?
        .split_whitespace()
        .map(str::to_string)
        .collect();
    let spectrogram = SpectrogramParams {
        sample_rate: parse_usize("sample_rate")? as u32,
        n_fft: parse_usize("n_fft")?,
        hop_size: parse_usize("hop_size")?,
        n_mels: parse_usize("n_mels")?,
        fmin: parse_f64("fmin")?,
        fmax: parse_f64("fmax")?,
        power: parse_f64("power")?,
        power_floor: parse_f64("power_floor")?,
    };
    let meta = ModelMeta {
        species,
        spectrogram,
        chunk_seconds: parse_f64("chunk_seconds")?,
    };

    let count = r.take_u32()? as usize;
    let mut tensors = std::collections::HashMap::new();
    for _ in 0..count {
        let name_len = r.take_u16()? as usize;
        let name = r.take_str(name_len)?.to_string();
        let rank = r.take_u32()? as usize;
        if rank > 8 {
            return Err(r.bad(format!("implausible tensor rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.take_u32()? as usize);
        }
        let byte_len = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| r.bad("tensor size overflow"))?;
        let raw = r.take(byte_len)?;
        let data: Vec<F> = raw
            .chunks_exact(4)
            .map(|b| F::from_f(f64::from(f32::from_le_bytes(b.try_into().expect("4 bytes")))))
            .collect();
        tensors.insert(name, Tensor { shape, data });
    }
    if r.pos != bytes.len() {
        return Err(r.bad("trailing bytes"));
    }
    let mut grab = |name: String| -> Result<Tensor<F>, ModelError> {
        tensors.remove(&name).ok_or_else(|| ModelError::BadFormat {
            path: display.clone(),
            reason: format!("missing tensor {name}"),
        })
    };
    let mut block_params = Vec::with_capacity(config.blocks.len());
    for i in 0..config.blocks.len() {
        block_params.push(ConvBlockParams {
            conv_w: grab(format!("conv{i}.weight"))?,
            conv_b: grab(format!("conv{i}.bias"))?,
            bn_gamma: grab(format!("bn{i}.gamma"))?,
            bn_beta: grab(format!("bn{i}.beta"))?,
            bn_running_mean: grab(format!("bn{i}.running_mean"))?,
            bn_running_var: grab(format!("bn{i}.running_var"))?,
        });
    }
    let head = HeadParams {
        class_w: grab("head.class_w".into())?,
        class_b: grab("head.class_b".into())?,
        att_w: grab("head.att_w".into())?,
        att_b: grab("head.att_b".into())?,
    };
    if !tensors.is_empty() {
        let mut extra: Vec<String> = tensors.into_keys().collect();
        extra.sort();
        return Err(ModelError::BadFormat {
            path: display,
            reason: format!("unexpected tensors: {}", extra.join(", ")),
        });
    }
    let weights = Weights {
        config,
        blocks: block_params,
        head,
    };
    weights.validate()?;
    if meta.species.len() != weights.config.n_classes {
        return Err(ModelError::BadFormat {
            path: display,
            reason: format!(
                "{} species names for {} classes",
                meta.species.len(),
                weights.config.n_classes
            ),
        });
    }
    Ok((weights, meta))
}
