//! WAV decoding, resampling, and clip windowing.
//!
//! Clips are mono `f32` buffers in [-1, 1] tagged with a sample rate.
//! Stereo input is averaged down; PCM16 samples are scaled by 1/32768 so
//! that the most negative code maps exactly to -1.0.

use std::fs;
use std::io;
use std::path::Path;

use rand::Rng;
use thiserror::Error;

/// Errors produced while decoding or transforming audio.
#[derive(Debug, Error)]
pub enum AudioError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("{path}: not a RIFF/WAVE file")]
    NotWave { path: String },
    #[error("{path}: truncated file ({context})")]
    Truncated { path: String, context: &'static str },
    #[error("{path}: unsupported encoding (format tag {format_tag}, {bits_per_sample} bits per sample)")]
    UnsupportedEncoding {
        path: String,
        format_tag: u16,
        bits_per_sample: u16,
    },
    #[error("{path}: unsupported channel count {channels} (expected 1 or 2)")]
    UnsupportedChannels { path: String, channels: u16 },
    #[error("{path}: sample rate must be positive")]
    ZeroSampleRate { path: String },
    #[error("{path}: non-finite float sample at index {index}")]
    NonFiniteSample { path: String, index: usize },
    #[error("clip contains no samples")]
    EmptyClip,
    #[error("target sample rate must be positive")]
    InvalidTargetRate,
    #[error("window length must be positive (got {seconds} s)")]
    InvalidWindow { seconds: f64 },
    #[error("chunk length and chunk count must both be positive")]
    InvalidSplit,
    #[error("exact split needs {expected} samples, clip has {actual}")]
    SplitLengthMismatch { expected: usize, actual: usize },
}

/// A mono audio buffer with its sample rate.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl AudioClip {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Self {
        Self {
            samples,
            sample_rate,
        }
    }

    #[must_use]
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    #[must_use]
    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    #[must_use]
    pub fn duration_seconds(&self) -> f64 {
        self.samples.len() as f64 / f64::from(self.sample_rate)
    }

    /// Root-mean-square amplitude, accumulated in `f64`.
    #[must_use]
    pub fn rms(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        let energy: f64 = self.samples.iter().map(|&s| f64::from(s) * f64::from(s)).sum();
        (energy / self.samples.len() as f64).sqrt()
    }
}

const FORMAT_PCM: u16 = 1;
const FORMAT_IEEE_FLOAT: u16 = 3;

/// Decodes a RIFF/WAVE file. Accepts PCM16 and IEEE float32 payloads with
/// one or two channels; stereo is averaged to mono.
pub fn load_wav(path: &Path) -> Result<AudioClip, AudioError> {
    let display = path.display().to_string();
    let bytes = fs::read(path).map_err(|source| AudioError::Io {
        path: display.clone(),
        source,
    })?;
    parse_wav(&bytes, &display)
}

fn parse_wav(bytes: &[u8], path: &str) -> Result<AudioClip, AudioError> {
    if bytes.len() < 12 {
        return Err(AudioError::Truncated {
            path: path.to_string(),
            context: "missing RIFF header",
        });
    }
    if &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(AudioError::NotWave {
            path: path.to_string(),
        });
    }

    let mut fmt: Option<(u16, u16, u32, u16)> = None;
    let mut data: Option<&[u8]> = None;
    let mut offset = 12usize;
    while offset + 8 <= bytes.len() {
        let id = &bytes[offset..offset + 4];
        let size = u32::from_le_bytes(bytes[offset + 4..offset + 8].try_into().unwrap()) as usize;
        let payload_start = offset + 8;
        if id == b"data" {
            if payload_start + size > bytes.len() {
                return Err(AudioError::Truncated {
                    path: path.to_string(),
                    context: "data chunk shorter than declared",
                });
            }
            data = Some(&bytes[payload_start..payload_start + size]);
        } else if id == b"fmt " {
            if size < 16 || payload_start + 16 > bytes.len() {
                return Err(AudioError::Truncated {
                    path: path.to_string(),
                    context: "fmt chunk shorter than declared",
                });
            }
            let f = &bytes[payload_start..];
            let format_tag = u16::from_le_bytes(f[0..2].try_into().unwrap());
            let channels = u16::from_le_bytes(f[2..4].try_into().unwrap());
            let sample_rate = u32::from_le_bytes(f[4..8].try_into().unwrap());
            let bits = u16::from_le_bytes(f[14..16].try_into().unwrap());
            fmt = Some((format_tag, channels, sample_rate, bits));
        }
        // Chunk payloads are word-aligned; odd sizes carry a pad byte.
        offset = payload_start + size + (size & 1);
    }

    let (format_tag, channels, sample_rate, bits) = fmt.ok_or(AudioError::Truncated {
        path: path.to_string(),
        context: "missing fmt chunk",
    })?;
    let data = data.ok_or(AudioError::Truncated {
        path: path.to_string(),
        context: "missing data chunk",
    })?;

    if sample_rate == 0 {
        return Err(AudioError::ZeroSampleRate {
            path: path.to_string(),
        });
    }
    if channels == 0 || channels > 2 {
        return Err(AudioError::UnsupportedChannels {
            path: path.to_string(),
            channels,
        });
    }
    let bytes_per_sample = match (format_tag, bits) {
        (FORMAT_PCM, 16) => 2,
        (FORMAT_IEEE_FLOAT, 32) => 4,
        _ => {
            return Err(AudioError::UnsupportedEncoding {
                path: path.to_string(),
                format_tag,
                bits_per_sample: bits,
            })
        }
    };

    let frame_bytes = bytes_per_sample * channels as usize;
    let n_frames = data.len() / frame_bytes;
    if n_frames == 0 {
        return Err(AudioError::EmptyClip);
    }

    let mut samples = Vec::with_capacity(n_frames);
    for frame in 0..n_frames {
        let mut acc = 0.0f32;
        for ch in 0..channels as usize {
            let at = frame * frame_bytes + ch * bytes_per_sample;
            let v = match format_tag {
                FORMAT_PCM => {
                    let code = i16::from_le_bytes(data[at..at + 2].try_into().unwrap());
                    f32::from(code) / 32768.0
                }
                _ => {
                    let raw = f32::from_le_bytes(data[at..at + 4].try_into().unwrap());
                    if !raw.is_finite() {
                        return Err(AudioError::NonFiniteSample {
                            path: path.to_string(),
                            index: frame * channels as usize + ch,
                        });
                    }
                    raw.clamp(-1.0, 1.0)
                }
            };
            acc += v;
        }
        samples.push(acc / f32::from(channels));
    }

    Ok(AudioClip::new(samples, sample_rate))
}

/// Writes a mono PCM16 WAV file. Samples are clamped to [-1, 1] and scaled
/// by 32768 with rounding, so the output is byte-deterministic.
pub fn write_wav_pcm16(path: &Path, clip: &AudioClip) -> Result<(), AudioError> {
    if clip.is_empty() {
        return Err(AudioError::EmptyClip);
    }
    let display = path.display().to_string();
    let data_len = clip.len() * 2;
    let mut out = Vec::with_capacity(44 + data_len);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len as u32).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&FORMAT_PCM.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&clip.sample_rate.to_le_bytes());
    out.extend_from_slice(&(clip.sample_rate * 2).to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&(data_len as u32).to_le_bytes());
    for &s in &clip.samples {
        let code = (f64::from(s.clamp(-1.0, 1.0)) * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        out.extend_from_slice(&code.to_le_bytes());
    }
    fs::write(path, out).map_err(|source| AudioError::Io {
        path: display,
        source,
    })
}

const RESAMPLE_HALF_TAPS: f64 = 32.0;
const KAISER_BETA: f64 = 8.6;

/// Zeroth-order modified Bessel function of the first kind, by power series.
fn bessel_i0(x: f64) -> f64 {
    let q = x * x / 4.0;
    let mut term = 1.0;
    let mut sum = 1.0;
    let mut m = 1.0;
    while term > sum * 1e-16 {
        term *= q / (m * m);
        sum += term;
        m += 1.0;
    }
    sum
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        (std::f64::consts::PI * x).sin() / (std::f64::consts::PI * x)
    }
}

/// Sample-rate conversion with a Kaiser-windowed sinc kernel (64 taps per
/// output phase, widened by the decimation factor when downsampling). The
/// kernel gain is normalised per output sample, so converting at the input
/// rate is exact and DC level is preserved.
pub fn resample(clip: &AudioClip, target_rate: u32) -> Result<AudioClip, AudioError> {
    if target_rate == 0 {
        return Err(AudioError::InvalidTargetRate);
    }
    if clip.is_empty() {
        return Err(AudioError::EmptyClip);
    }
    if target_rate == clip.sample_rate {
        return Ok(clip.clone());
    }

    let src = f64::from(clip.sample_rate);
    let dst = f64::from(target_rate);
    let ratio = dst / src;
    // Rounded length keeps duration within half an output sample.
    let out_len = ((clip.len() as u64 * u64::from(target_rate) + u64::from(clip.sample_rate) / 2)
        / u64::from(clip.sample_rate)) as usize;
    let out_len = out_len.max(1);

    // Anti-aliasing cutoff at the lower Nyquist; stretch the kernel when
    // decimating so it still spans 64 output-rate taps.
    let cutoff = 0.5 * ratio.min(1.0);
    let stretch = (1.0 / ratio).max(1.0);
    let half_width = RESAMPLE_HALF_TAPS * stretch;
    let i0_beta = bessel_i0(KAISER_BETA);

    let x = &clip.samples;
    let mut out = Vec::with_capacity(out_len);
    for j in 0..out_len {
        let center = j as f64 / ratio;
        let lo = (center - half_width).ceil() as isize;
        let hi = (center + half_width).floor() as isize;
        let mut acc = 0.0f64;
        let mut gain = 0.0f64;
        for k in lo..=hi {
            let u = center - k as f64;
            let frac = u / half_width;
            let w = bessel_i0(KAISER_BETA * (1.0 - frac * frac).max(0.0).sqrt()) / i0_beta;
            let h = 2.0 * cutoff * sinc(2.0 * cutoff * u) * w;
            gain += h;
            if k >= 0 && (k as usize) < x.len() {
                acc += h * f64::from(x[k as usize]);
            }
        }
        out.push(if gain.abs() > 1e-12 { (acc / gain) as f32 } else { 0.0 });
    }

    Ok(AudioClip::new(out, target_rate))
}

/// Cuts a window of `window_seconds` at a uniformly random offset. Clips
/// shorter than the window are extended periodically before the cut, so a
/// 12 s clip cropped to 30 s repeats with period 12 s.
pub fn crop_window<R: Rng>(
    clip: &AudioClip,
    window_seconds: f64,
    rng: &mut R,
) -> Result<AudioClip, AudioError> {
    if clip.is_empty() {
        return Err(AudioError::EmptyClip);
    }
    let window = (window_seconds * f64::from(clip.sample_rate)).round() as i64;
    if window < 1 {
        return Err(AudioError::InvalidWindow {
            seconds: window_seconds,
        });
    }
    let window = window as usize;
    let len = clip.len();

    let samples = if len >= window {
        let offset = rng.random_range(0..=len - window);
        clip.samples[offset..offset + window].to_vec()
    } else {
        let offset = rng.random_range(0..len);
        (0..window).map(|i| clip.samples[(offset + i) % len]).collect()
    };

    Ok(AudioClip::new(samples, clip.sample_rate))
}

/// Splits a clip into exactly `n_parts` chunks of `chunk_seconds`. The clip
/// length must equal the partition exactly; there is no tail padding here,
/// callers arrange the window first.
pub fn split_chunks(
    clip: &AudioClip,
    chunk_seconds: f64,
    n_parts: usize,
) -> Result<Vec<AudioClip>, AudioError> {
    let chunk = (chunk_seconds * f64::from(clip.sample_rate)).round() as i64;
    if chunk < 1 || n_parts == 0 {
        return Err(AudioError::InvalidSplit);
    }
    let chunk = chunk as usize;
    let expected = chunk * n_parts;
    if clip.len() != expected {
        return Err(AudioError::SplitLengthMismatch {
            expected,
            actual: clip.len(),
        });
    }
    Ok((0..n_parts)
        .map(|i| AudioClip::new(clip.samples[i * chunk..(i + 1) * chunk].to_vec(), clip.sample_rate))
        .collect())
}

/// Splits an arbitrary-length clip into consecutive `chunk_seconds` segments
/// for inference. A partial tail segment is extended by repeating its own
/// samples, deterministically, so every recorded second is scored.
pub fn segment_clip(clip: &AudioClip, chunk_seconds: f64) -> Result<Vec<AudioClip>, AudioError> {
    if clip.is_empty() {
        return Err(AudioError::EmptyClip);
    }
    let chunk = (chunk_seconds * f64::from(clip.sample_rate)).round() as i64;
    if chunk < 1 {
        return Err(AudioError::InvalidSplit);
    }
    let chunk = chunk as usize;
    let mut segments = Vec::new();
    let mut start = 0usize;
    while start < clip.len() {
        let end = (start + chunk).min(clip.len());
        let tail = &clip.samples[start..end];
        let samples = if tail.len() == chunk {
            tail.to_vec()
        } else {
            (0..chunk).map(|i| tail[i % tail.len()]).collect()
        };
        segments.push(AudioClip::new(samples, clip.sample_rate));
        start += chunk;
    }
    Ok(segments)
}
