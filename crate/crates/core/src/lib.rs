//! Few-shot birdcall recognition for long-tailed species distributions.
//!
//! The crate implements the full pipeline: WAV decoding and windowing
//! ([`audio`]), a log-mel spectrogram frontend ([`dsp`]), training-time
//! augmentations ([`augment`]), weak-label dataset handling and synthetic
//! data generation ([`dataset`]), a small attention-pooled sound event
//! detection network with exact backward passes ([`model`]), the training
//! loop ([`train`]), probability post-processing ([`calibrate`]), and
//! evaluation metrics ([`metrics`]).
//!
//! Everything downstream of a seed is deterministic: batch composition,
//! augmentation draws, weight initialisation, and optimizer updates are all
//! driven by counter-derived ChaCha streams, so a run can be reproduced
//! bit-for-bit from its config.

pub mod audio;
pub mod augment;
pub mod calibrate;
pub mod config;
pub mod dataset;
pub mod dsp;
pub mod metrics;
pub mod model;
pub mod tensorfile;
pub mod train;

use num_traits::{Float, FromPrimitive, NumAssign};
use rustfft::FftNum;

/// Floating-point scalar used throughout the numeric pipeline.
///
/// The DSP frontend and the network are generic over this so that precision
/// checks (Parseval, finite-difference gradients) can run in `f64` while
/// training runs in `f32`.
pub trait Real: Float + FromPrimitive + NumAssign + FftNum + std::iter::Sum {
    /// Converts from `f64`, panicking only on NaN-free impossible cases.
    fn from_f(v: f64) -> Self {
        Self::from_f64(v).expect("f64 value representable in Real type")
    }

    /// Widens to `f64` for accumulation and reporting.
    fn to_f(self) -> f64 {
        self.to_f64().expect("Real type widens to f64")
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Crate-wide error wrapping each module's failure modes.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Audio(#[from] audio::AudioError),
    #[error(transparent)]
    Dsp(#[from] dsp::DspError),
    #[error(transparent)]
    Augment(#[from] augment::AugmentError),
    #[error(transparent)]
    Dataset(#[from] dataset::DatasetError),
    #[error(transparent)]
    Model(#[from] model::ModelError),
    #[error(transparent)]
    Train(#[from] train::TrainError),
    #[error(transparent)]
    Calibrate(#[from] calibrate::CalibrateError),
    #[error(transparent)]
    Metrics(#[from] metrics::MetricsError),
    #[error(transparent)]
    Config(#[from] config::ConfigError),
    #[error(transparent)]
    Tensor(#[from] tensorfile::TensorFileError),
}

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
