//! Grad-CAM inspection command.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use birdsed::audio::{load_wav, resample, segment_clip};
use birdsed::dsp::MelEngine;
use birdsed::model::{forward, grad_cam, load_weights, stack_spectrograms, Mode};

use super::{domain, require_exists, usage, CliError, Context};

pub fn run(
    ctx: &Context,
    weights_path: &Path,
    audio_path: &Path,
    species: &str,
    chunk: Option<usize>,
) -> Result<(), CliError> {
    require_exists(weights_path, "weights file")?;
    require_exists(audio_path, "audio file")?;
    let (weights, meta) = load_weights::<f32>(weights_path).map_err(domain)?;

    let class = meta
        .species
        .iter()
        .position(|s| s == species)
        .ok_or_else(|| {
            usage(format!(
                "species {species} not in model (available: {})",
                meta.species.join(" ")
            ))
        })?;

    let engine: MelEngine<f32> = MelEngine::new(meta.spectrogram).map_err(domain)?;
    let clip = load_wav(audio_path).map_err(domain)?;
    let clip = resample(&clip, meta.spectrogram.sample_rate).map_err(domain)?;
    let segments = segment_clip(&clip, meta.chunk_seconds).map_err(domain)?;
    let mut specs = Vec::with_capacity(segments.len());
    for segment in &segments {
        specs.push(engine.mel_spectrogram(segment).map_err(domain)?);
    }

    // Without --chunk, inspect the segment where the species scores
    // highest; ties go to the earliest segment.
    let index = match chunk {
        Some(i) => {
            if i >= specs.len() {
                return Err(usage(format!(
                    "--chunk {i} out of range; file has {} segments",
                    specs.len()
                )));
            }
            i
        }
        None => {
            let input = stack_spectrograms(&specs).map_err(domain)?;
            let (output, _) = forward(&weights, &input, Mode::Eval, None).map_err(domain)?;
            let probs = output.clipwise.data();
            let k = meta.species.len();
            let mut best = 0;
            for i in 1..specs.len() {
                if probs[i * k + class] > probs[best * k + class] {
                    best = i;
                }
            }
            best
        }
    };

    let heat = grad_cam(&weights, &specs[index], class).map_err(domain)?;
    let shape = heat.shape().to_vec();
    let mut out = String::from("mel_bin,time_bin,value\n");
    for m in 0..shape[0] {
        for t in 0..shape[1] {
            let v = heat.data()[m * shape[1] + t];
            let _ = writeln!(out, "{m},{t},{v}");
        }
    }
    let out_path = ctx.out.join("gradcam.csv");
    fs::write(&out_path, out).map_err(|e| domain(format!("{}: {e}", out_path.display())))?;

    println!(
        "gradcam for {species} on segment {index} ({}x{}) written to {}",
        shape[0],
        shape[1],
        out_path.display()
    );
    Ok(())
}
