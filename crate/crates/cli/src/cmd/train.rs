//! Model training command.

use std::path::Path;

use birdsed::dataset::{parse_metadata, SpeciesTable};
use birdsed::model::{save_weights, ModelMeta};
use birdsed::train::{train, write_train_stats};

use super::{domain, require_exists, usage, CliError, Context};

pub fn run(
    ctx: &Context,
    metadata_path: &Path,
    species_path: &Path,
    dry_run: bool,
) -> Result<(), CliError> {
    require_exists(metadata_path, "metadata file")?;
    require_exists(species_path, "species file")?;

    let table = SpeciesTable::read_csv(species_path).map_err(|e| usage(e.to_string()))?;
    let recordings =
        parse_metadata(metadata_path, &table).map_err(|e| usage(e.to_string()))?;

    // Every referenced recording must exist before any work starts, so a
    // bad manifest fails fast instead of partway through an epoch.
    let missing: Vec<String> = recordings
        .iter()
        .filter(|r| !r.audio_path.exists())
        .map(|r| r.audio_path.display().to_string())
        .collect();
    if !missing.is_empty() {
        return Err(usage(format!(
            "metadata references missing audio: {}",
            missing.join(" ")
        )));
    }

    let seed = ctx.seed()?;
    let cfg = ctx.config.train_config(table.len(), seed)?;
    cfg.validate().map_err(|e| usage(e.to_string()))?;

    if dry_run {
        println!(
            "dry run ok: {} recordings, {} classes, {} epochs x {} steps",
            recordings.len(),
            table.len(),
            cfg.epochs,
            cfg.steps_per_epoch
        );
        return Ok(());
    }

    let (weights, stats) = train(&recordings, &table, &cfg).map_err(domain)?;

    let meta = ModelMeta {
        species: table.ids(),
        spectrogram: ctx.config.spectrogram,
        chunk_seconds: cfg.batch.chunk_seconds,
    };
    let weights_path = ctx.out.join("model.sedw");
    save_weights(&weights, &meta, &weights_path).map_err(domain)?;

    let stats_path = ctx.out.join("train_stats.csv");
    write_train_stats(&stats_path, &stats).map_err(domain)?;

    if let Some(last) = stats.last() {
        println!(
            "trained {} steps, final loss {}, val micro F1 {}",
            last.step,
            last.loss,
            last.val_micro_f1.map_or("n/a".to_string(), |v| v.to_string())
        );
    }
    println!("weights written to {}", weights_path.display());
    println!("stats written to {}", stats_path.display());
    Ok(())
}
