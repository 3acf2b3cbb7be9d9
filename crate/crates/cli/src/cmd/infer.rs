//! Batch inference command.
//!
//! Scores every segment of every WAV file in a directory. Files are
//! processed in parallel but emitted in sorted path order, so reruns
//! produce byte-identical outputs. A file that cannot be decoded is
//! skipped with a warning and an error row in the report; it never aborts
//! the batch.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rayon::prelude::*;

use birdsed::audio::{load_wav, resample, segment_clip};
use birdsed::calibrate::PredictionTable;
use birdsed::dsp::MelEngine;
use birdsed::model::{forward, load_weights, stack_spectrograms, Mode, ModelMeta, Weights};

use super::{domain, recording_id, sorted_wavs, CliError, Context};

/// Per-file outcome: segment probabilities on success, a message on
/// failure. `elapsed` covers only the forward pass.
struct FileResult {
    path: PathBuf,
    outcome: Result<Vec<Vec<f64>>, String>,
    elapsed: Duration,
}

pub fn run(ctx: &Context, weights_path: &Path, audio_dir: &Path) -> Result<(), CliError> {
    super::require_exists(weights_path, "weights file")?;
    let (weights, meta) = load_weights::<f32>(weights_path).map_err(domain)?;
    let engine: MelEngine<f32> = MelEngine::new(meta.spectrogram).map_err(domain)?;

    let files = sorted_wavs(audio_dir)?;
    let results: Vec<FileResult> = files
        .par_iter()
        .map(|path| score_file(path, &weights, &meta, &engine))
        .collect();

    let mut keys = Vec::new();
    let mut rows = Vec::new();
    let mut report = String::from("file,status,chunks\n");
    let mut n_chunks = 0usize;
    let mut forward_time = Duration::ZERO;
    for r in &results {
        // Report rows carry the bare file name so the CSV stays comparable
        // across runs rooted in different directories.
        let name = r
            .path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| r.path.display().to_string());
        match &r.outcome {
            Ok(segments) => {
                let id = recording_id(&r.path);
                for (i, row) in segments.iter().enumerate() {
                    keys.push((id.clone(), i));
                    rows.push(row.clone());
                }
                let _ = writeln!(report, "{name},ok,{}", segments.len());
                n_chunks += segments.len();
                forward_time += r.elapsed;
            }
            Err(message) => {
                eprintln!("warning: skipping {}: {message}", r.path.display());
                let _ = writeln!(report, "{name},error,0");
            }
        }
    }

    let predictions_path = ctx.out.join("predictions.csv");
    let table = PredictionTable::new(keys, meta.species.clone(), rows).map_err(domain)?;
    table.write_csv(&predictions_path).map_err(domain)?;

    let report_path = ctx.out.join("infer_report.csv");
    fs::write(&report_path, report)
        .map_err(|e| domain(format!("{}: {e}", report_path.display())))?;

    if n_chunks > 0 {
        println!(
            "per-chunk latency seconds: {}",
            forward_time.as_secs_f64() / n_chunks as f64
        );
    }
    println!(
        "scored {n_chunks} segments from {} files ({} skipped)",
        files.len(),
        results.iter().filter(|r| r.outcome.is_err()).count()
    );
    println!("predictions written to {}", predictions_path.display());
    println!("report written to {}", report_path.display());
    Ok(())
}

fn score_file(
    path: &Path,
    weights: &Weights<f32>,
    meta: &ModelMeta,
    engine: &MelEngine<f32>,
) -> FileResult {
    let fail = |message: String| FileResult {
        path: path.to_path_buf(),
        outcome: Err(message),
        elapsed: Duration::ZERO,
    };
    let clip = match load_wav(path) {
        Ok(c) => c,
        Err(e) => return fail(e.to_string()),
    };
    let run = || -> Result<(Vec<Vec<f64>>, Duration), String> {
        let clip = resample(&clip, meta.spectrogram.sample_rate).map_err(|e| e.to_string())?;
        let segments = segment_clip(&clip, meta.chunk_seconds).map_err(|e| e.to_string())?;
        let mut specs = Vec::with_capacity(segments.len());
        for segment in &segments {
            specs.push(engine.mel_spectrogram(segment).map_err(|e| e.to_string())?);
        }
        let input = stack_spectrograms(&specs).map_err(|e| e.to_string())?;
        let start = Instant::now();
        let (output, _) = forward(weights, &input, Mode::Eval, None).map_err(|e| e.to_string())?;
        let elapsed = start.elapsed();
        let k = meta.species.len();
        let probs = output.clipwise.data();
        let rows = (0..specs.len())
            .map(|s| probs[s * k..(s + 1) * k].iter().map(|&p| f64::from(p)).collect())
            .collect();
        Ok((rows, elapsed))
    };
    match run() {
        Ok((rows, elapsed)) => FileResult {
            path: path.to_path_buf(),
            outcome: Ok(rows),
            elapsed,
        },
        Err(message) => fail(message),
    }
}
