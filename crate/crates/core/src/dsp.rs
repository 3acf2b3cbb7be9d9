//! Log-mel spectrogram frontend.
//!
//! The transform chain is: centered STFT with a periodic Hann window and
//! reflect padding, power spectrum, triangular mel filterbank on the HTK
//! scale, then decibel conversion with a power floor and no top clamp.
//!
//! Real input frames are transformed through a half-size complex FFT and
//! unpacked, which halves the per-frame cost; the split-spectrum algebra is
//! checked against a naive DFT in the tests.

use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::AudioClip;
use crate::Real;

/// Errors from spectrogram construction.
#[derive(Debug, Error)]
pub enum DspError {
    #[error("invalid spectrogram params: {reason}")]
    InvalidParams { reason: String },
    #[error("clip sample rate {clip} does not match configured rate {expected}")]
    SampleRateMismatch { clip: u32, expected: u32 },
    #[error("clip of {samples} samples is shorter than one frame after padding (needs {required})")]
    ClipTooShort { samples: usize, required: usize },
    #[error("mel filter {index} is empty; n_mels is too fine for the FFT resolution")]
    EmptyMelFilter { index: usize },
}

/// Spectrogram configuration shared by every pipeline stage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SpectrogramParams {
    pub sample_rate: u32,
    pub n_fft: usize,
    pub hop_size: usize,
    pub n_mels: usize,
    pub fmin: f64,
    pub fmax: f64,
    /// Spectrum exponent; 2.0 is the power spectrum.
    pub power: f64,
    /// Floor applied to power values before the log, 10*log10(floor) is the
    /// lowest representable level (-100 dB at the default).
    pub power_floor: f64,
}

impl Default for SpectrogramParams {
    fn default() -> Self {
        Self {
            sample_rate: 32000,
            n_fft: 2048,
            hop_size: 512,
            n_mels: 128,
            fmin: 50.0,
            fmax: 14000.0,
            power: 2.0,
            power_floor: 1e-10,
        }
    }
}

impl SpectrogramParams {
    pub fn validate(&self) -> Result<(), DspError> {
        let fail = |reason: &str| {
            Err(DspError::InvalidParams {
                reason: reason.to_string(),
            })
        };
        if self.sample_rate == 0 {
            return fail("sample_rate must be positive");
        }
        if self.n_fft < 2 || !self.n_fft.is_multiple_of(2) {
            return fail("n_fft must be an even number of samples");
        }
        if self.hop_size == 0 {
            return fail("hop_size must be positive");
        }
        if self.n_mels == 0 {
            return fail("n_mels must be positive");
        }
        if !(self.fmin >= 0.0 && self.fmin < self.fmax) {
            return fail("need 0 <= fmin < fmax");
        }
        if self.fmax > f64::from(self.sample_rate) / 2.0 {
            return fail("fmax exceeds the Nyquist frequency");
        }
        if !(self.power.is_finite() && self.power > 0.0) {
            return fail("power must be positive");
        }
        if !(self.power_floor.is_finite() && self.power_floor > 0.0) {
            return fail("power_floor must be positive");
        }
        Ok(())
    }

    /// Number of STFT frames for a clip of `samples` with centered padding.
    #[must_use]
    pub fn frame_count(&self, samples: usize) -> usize {
        samples / self.hop_size + 1
    }

    /// Number of frequency bins up to and including Nyquist.
    #[must_use]
    pub fn n_bins(&self) -> usize {
        self.n_fft / 2 + 1
    }
}

/// HTK mel scale.
#[must_use]
pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

/// Inverse of [`hz_to_mel`].
#[must_use]
pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// One triangular filter stored as its contiguous nonzero span.
#[derive(Debug, Clone)]
pub struct FilterRow {
    pub start_bin: usize,
    pub weights: Vec<f64>,
}

/// Unnormalised triangular mel filterbank.
///
/// Peaks sit at `n_mels + 2` points equally spaced on the mel scale between
/// `fmin` and `fmax`, quantised to FFT bins, so each filter's peak weight is
/// exactly 1.0 at its center bin.
#[derive(Debug, Clone)]
pub struct MelFilterbank {
    pub n_mels: usize,
    pub n_bins: usize,
    rows: Vec<FilterRow>,
    center_bins: Vec<usize>,
}

impl MelFilterbank {
    #[must_use]
    pub fn rows(&self) -> &[FilterRow] {
        &self.rows
    }

    /// Center FFT bin of each filter.
    #[must_use]
    pub fn center_bins(&self) -> &[usize] {
        &self.center_bins
    }

    /// Dense `n_mels x n_bins` weight matrix, for tests and inspection.
    #[must_use]
    pub fn dense(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.n_mels * self.n_bins];
        for (m, row) in self.rows.iter().enumerate() {
            for (i, &w) in row.weights.iter().enumerate() {
                out[m * self.n_bins + row.start_bin + i] = w;
            }
        }
        out
    }
}

/// Builds the triangular filterbank for `params`.
pub fn mel_filterbank(params: &SpectrogramParams) -> Result<MelFilterbank, DspError> {
    params.validate()?;
    let n_bins = params.n_bins();
    let sr = f64::from(params.sample_rate);
    let mel_lo = hz_to_mel(params.fmin);
    let mel_hi = hz_to_mel(params.fmax);
    let n_points = params.n_mels + 2;

    let bin_points: Vec<usize> = (0..n_points)
        .map(|i| {
            let mel = mel_lo + (mel_hi - mel_lo) * i as f64 / (n_points - 1) as f64;
            let hz = mel_to_hz(mel);
            (((params.n_fft + 1) as f64 * hz / sr).floor() as usize).min(n_bins - 1)
        })
        .collect();

    let mut rows = Vec::with_capacity(params.n_mels);
    for m in 1..=params.n_mels {
        let (lo, c, hi) = (bin_points[m - 1], bin_points[m], bin_points[m + 1]);
        let mut weights = vec![0.0f64; n_bins];
        if c > lo {
            let rise = (c - lo) as f64;
            for (i, w) in weights[lo..c].iter_mut().enumerate() {
                *w = i as f64 / rise;
            }
        }
        if hi > c {
            let fall = (hi - c) as f64;
            for (i, w) in weights[c..hi].iter_mut().enumerate() {
                *w = (hi - c - i) as f64 / fall;
            }
        }
        let start = weights.iter().position(|&w| w > 0.0);
        let end = weights.iter().rposition(|&w| w > 0.0);
        match (start, end) {
            (Some(s), Some(e)) => rows.push(FilterRow {
                start_bin: s,
                weights: weights[s..=e].to_vec(),
            }),
            _ => return Err(DspError::EmptyMelFilter { index: m - 1 }),
        }
    }

    Ok(MelFilterbank {
        n_mels: params.n_mels,
        n_bins,
        rows,
        center_bins: bin_points[1..=params.n_mels].to_vec(),
    })
}

/// Power spectrogram stored frame-major: `values[frame * n_bins + bin]`.
#[derive(Debug, Clone)]
pub struct PowerSpectrogram<F> {
    pub n_bins: usize,
    pub n_frames: usize,
    pub values: Vec<F>,
}

/// Log-mel spectrogram stored mel-major: `values[mel * n_frames + frame]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram<F = f64> {
    pub params: SpectrogramParams,
    pub n_frames: usize,
    pub values: Vec<F>,
}

impl<F: Real> MelSpectrogram<F> {
    #[must_use]
    pub fn n_mels(&self) -> usize {
        self.params.n_mels
    }

    #[must_use]
    pub fn value(&self, mel: usize, frame: usize) -> F {
        self.values[mel * self.n_frames + frame]
    }

    /// Flattens to `f32` in (n_mels, n_frames) order for tensor dumps.
    #[must_use]
    pub fn to_f32(&self) -> Vec<f32> {
        self.values.iter().map(|v| v.to_f() as f32).collect()
    }
}

/// Converts one power value to decibels with the configured floor.
#[must_use]
pub fn power_to_db<F: Real>(power: F, floor: F) -> F {
    F::from_f(10.0) * power.max(floor).log10()
}

/// Windowing and FFT state shared across frames.
struct FftCore<F: Real> {
    params: SpectrogramParams,
    fft: Arc<dyn Fft<F>>,
    window: Vec<F>,
    twiddle: Vec<Complex<F>>,
}

impl<F: Real> FftCore<F> {
    fn new(params: SpectrogramParams) -> Result<Self, DspError> {
        params.validate()?;
        let n = params.n_fft;
        let half = n / 2;
        let mut planner = FftPlanner::new();
        let fft = planner.plan_fft_forward(half);
        let window = (0..n)
            .map(|i| F::from_f(0.5 * (1.0 - (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())))
            .collect();
        let twiddle = (0..half)
            .map(|k| {
                let angle = -std::f64::consts::PI * k as f64 / half as f64;
                Complex::new(F::from_f(angle.cos()), F::from_f(angle.sin()))
            })
            .collect();
        Ok(Self {
            params,
            fft,
            window,
            twiddle,
        })
    }

    /// Reflect-padded signal (no edge duplication), `n_fft / 2` each side.
    fn padded(&self, clip: &AudioClip) -> Result<Vec<F>, DspError> {
        let pad = self.params.n_fft / 2;
        let len = clip.len();
        if len < pad + 1 {
            return Err(DspError::ClipTooShort {
                samples: len,
                required: pad + 1,
            });
        }
        let mut padded = Vec::with_capacity(len + 2 * pad);
        for i in 0..pad {
            padded.push(F::from_f(f64::from(clip.samples[pad - i])));
        }
        padded.extend(clip.samples.iter().map(|&s| F::from_f(f64::from(s))));
        for j in 0..pad {
            padded.push(F::from_f(f64::from(clip.samples[len - 2 - j])));
        }
        Ok(padded)
    }

    fn power(&self, clip: &AudioClip) -> Result<PowerSpectrogram<F>, DspError> {
        if clip.sample_rate != self.params.sample_rate {
            return Err(DspError::SampleRateMismatch {
                clip: clip.sample_rate,
                expected: self.params.sample_rate,
            });
        }
        let padded = self.padded(clip)?;
        let n = self.params.n_fft;
        let half = n / 2;
        let n_bins = self.params.n_bins();
        let n_frames = self.params.frame_count(clip.len());
        let exponent = self.params.power;

        let mut values = vec![F::zero(); n_frames * n_bins];
        let mut packed = vec![Complex::new(F::zero(), F::zero()); half];
        let mut scratch = vec![Complex::new(F::zero(), F::zero()); self.fft.get_inplace_scratch_len()];
        let half_f = F::from_f(0.5);

        for frame in 0..n_frames {
            let start = frame * self.params.hop_size;
            let src = &padded[start..start + n];
            for m in 0..half {
                packed[m] = Complex::new(
                    src[2 * m] * self.window[2 * m],
                    src[2 * m + 1] * self.window[2 * m + 1],
                );
            }
            self.fft.process_with_scratch(&mut packed, &mut scratch);

            let out = &mut values[frame * n_bins..(frame + 1) * n_bins];
            let z0 = packed[0];
            out[0] = spectrum_value((z0.re + z0.im) * (z0.re + z0.im), exponent);
            out[half] = spectrum_value((z0.re - z0.im) * (z0.re - z0.im), exponent);
            for k in 1..half {
                let zk = packed[k];
                let zm = packed[half - k].conj();
                let even = (zk + zm) * half_f;
                let odd_t = (zk - zm) * half_f;
                // odd = odd_t / i = -i * odd_t
                let odd = Complex::new(odd_t.im, -odd_t.re);
                let x = even + self.twiddle[k] * odd;
                out[k] = spectrum_value(x.re * x.re + x.im * x.im, exponent);
            }
        }

        Ok(PowerSpectrogram {
            n_bins,
            n_frames,
            values,
        })
    }
}

fn spectrum_value<F: Real>(norm_sqr: F, exponent: f64) -> F {
    if exponent == 2.0 {
        norm_sqr
    } else {
        norm_sqr.powf(F::from_f(exponent / 2.0))
    }
}

/// Reusable spectrogram computer; builds the FFT plan and filterbank once.
pub struct MelEngine<F: Real> {
    core: FftCore<F>,
    rows: Vec<(usize, Vec<F>)>,
    filterbank: MelFilterbank,
}

impl<F: Real> MelEngine<F> {
    pub fn new(params: SpectrogramParams) -> Result<Self, DspError> {
        let filterbank = mel_filterbank(&params)?;
        let rows = filterbank
            .rows()
            .iter()
            .map(|r| (r.start_bin, r.weights.iter().map(|&w| F::from_f(w)).collect()))
            .collect();
        Ok(Self {
            core: FftCore::new(params)?,
            rows,
            filterbank,
        })
    }

    #[must_use]
    pub fn params(&self) -> &SpectrogramParams {
        &self.core.params
    }

    #[must_use]
    pub fn filterbank(&self) -> &MelFilterbank {
        &self.filterbank
    }

    pub fn power_spectrogram(&self, clip: &AudioClip) -> Result<PowerSpectrogram<F>, DspError> {
        self.core.power(clip)
    }

    /// Full chain: STFT power, mel filterbank, then dB with the power floor.
    pub fn mel_spectrogram(&self, clip: &AudioClip) -> Result<MelSpectrogram<F>, DspError> {
        let power = self.core.power(clip)?;
        let params = self.core.params;
        let n_mels = params.n_mels;
        let n_frames = power.n_frames;
        let floor = F::from_f(params.power_floor);

        let mut values = vec![F::zero(); n_mels * n_frames];
        for frame in 0..n_frames {
            let spectrum = &power.values[frame * power.n_bins..(frame + 1) * power.n_bins];
            for (m, (start, weights)) in self.rows.iter().enumerate() {
                let mut acc = F::zero();
                for (i, &w) in weights.iter().enumerate() {
                    acc += w * spectrum[start + i];
                }
                values[m * n_frames + frame] = power_to_db(acc, floor);
            }
        }

        Ok(MelSpectrogram {
            params,
            n_frames,
            values,
        })
    }
}

/// One-shot STFT power spectrum.
pub fn stft_power<F: Real>(
    clip: &AudioClip,
    params: &SpectrogramParams,
) -> Result<PowerSpectrogram<F>, DspError> {
    FftCore::new(*params)?.power(clip)
}

/// One-shot log-mel spectrogram. Training reuses a [`MelEngine`] instead.
pub fn melspectrogram<F: Real>(
    clip: &AudioClip,
    params: &SpectrogramParams,
) -> Result<MelSpectrogram<F>, DspError> {
    MelEngine::new(*params)?.mel_spectrogram(clip)
}
