//! Spectrogram preprocessing command.

use std::path::Path;

use birdsed::audio::{load_wav, resample, segment_clip};
use birdsed::dsp::MelEngine;
use birdsed::tensorfile::write_tensor;

use super::{domain, recording_id, sorted_wavs, CliError, Context};

pub fn run(ctx: &Context, audio_dir: &Path) -> Result<(), CliError> {
    let params = ctx.config.spectrogram;
    let engine: MelEngine<f32> = MelEngine::new(params).map_err(domain)?;
    let chunk_seconds = ctx.config.batch.chunk_seconds;

    let files = sorted_wavs(audio_dir)?;
    for path in &files {
        let clip = load_wav(path).map_err(domain)?;
        let clip = resample(&clip, params.sample_rate).map_err(domain)?;
        let segments = segment_clip(&clip, chunk_seconds).map_err(domain)?;

        // One tensor per recording: segments stack along the leading axis
        // so shape is (n_segments, n_mels, n_frames).
        let mut dims = vec![0, params.n_mels, 0];
        let mut values = Vec::new();
        for segment in &segments {
            let spec = engine.mel_spectrogram(segment).map_err(domain)?;
            dims = vec![segments.len(), spec.n_mels(), spec.n_frames];
            values.extend_from_slice(&spec.values);
        }

        let name = format!("{}.tns", recording_id(path));
        let out_path = ctx.out.join(name);
        write_tensor(&out_path, &dims, &values).map_err(domain)?;
        println!(
            "{} segments {} shape {}x{}x{}",
            path.display(),
            dims[0],
            dims[0],
            dims[1],
            dims[2]
        );
    }
    println!("preprocessed {} files", files.len());
    Ok(())
}
