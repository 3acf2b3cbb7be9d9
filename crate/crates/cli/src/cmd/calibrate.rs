//! Threshold calibration command.
//!
//! The default mode fits class-wise quantile thresholds against segment
//! truth and also dumps per-species probability histograms. Three
//! alternative modes reuse the same prediction table: `--penalize`
//! rescales probabilities by training-set class shares, `--apply` turns
//! predictions into label decisions with a fitted threshold table, and
//! `--global-threshold` does the same with one fixed threshold.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use birdsed::calibrate::{
    apply_thresholds, fit_class_thresholds, global_thresholds, penalize, PredictionTable,
    ThresholdTable,
};
use birdsed::dataset::synth::read_class_counts;
use birdsed::dataset::{read_truth_csv, truth_label_map, write_truth_csv, SpeciesTable};

use super::{domain, require_exists, usage, CliError, Context};

const HIST_BINS: usize = 20;

#[allow(clippy::too_many_arguments)]
pub fn run(
    ctx: &Context,
    predictions_path: &Path,
    truth_path: Option<&Path>,
    species_path: Option<&Path>,
    penalize_factor: Option<f64>,
    counts_path: Option<&Path>,
    apply_path: Option<&Path>,
    global_threshold: Option<f64>,
) -> Result<(), CliError> {
    require_exists(predictions_path, "predictions file")?;
    let table = PredictionTable::read_csv(predictions_path).map_err(domain)?;

    if let Some(factor) = penalize_factor {
        let counts_path =
            counts_path.ok_or_else(|| usage("--penalize requires --counts"))?;
        require_exists(counts_path, "counts file")?;
        let counts: BTreeMap<String, u64> = read_class_counts(counts_path)
            .map_err(domain)?
            .into_iter()
            .collect();
        let penalized = penalize(&table, factor, &counts).map_err(domain)?;
        let out_path = ctx.out.join("penalized.csv");
        penalized.write_csv(&out_path).map_err(domain)?;
        println!("penalized predictions written to {}", out_path.display());
        return Ok(());
    }

    if let Some(apply_path) = apply_path {
        require_exists(apply_path, "threshold file")?;
        let thresholds = ThresholdTable::read_csv(apply_path).map_err(domain)?;
        return write_decisions(ctx, &table, &thresholds);
    }

    if let Some(threshold) = global_threshold {
        let scored = scored_species(species_path)?;
        let thresholds = global_thresholds(&scored, threshold);
        return write_decisions(ctx, &table, &thresholds);
    }

    // Default mode: fit one threshold per scored species.
    let truth_path = truth_path.ok_or_else(|| usage("fitting thresholds requires --truth"))?;
    require_exists(truth_path, "truth file")?;
    let scored = scored_species(species_path)?;
    let truth = truth_label_map(&read_truth_csv(truth_path).map_err(domain)?);

    let grid = &ctx.config.calibration.quantile_grid;
    let fitted = fit_class_thresholds(&table, &truth, grid, &scored).map_err(domain)?;

    let thresholds_path = ctx.out.join("thresholds.csv");
    fitted.write_csv(&thresholds_path).map_err(domain)?;

    let hist_path = ctx.out.join("calibrate_hist.csv");
    let hist = histogram_csv(&table, &scored)?;
    fs::write(&hist_path, hist).map_err(|e| domain(format!("{}: {e}", hist_path.display())))?;

    for row in &fitted.rows {
        println!(
            "{} quantile {} threshold {} score {}",
            row.species, row.quantile, row.threshold, row.score
        );
    }
    println!("thresholds written to {}", thresholds_path.display());
    println!("histograms written to {}", hist_path.display());
    Ok(())
}

/// Scored species ids in table order.
fn scored_species(species_path: Option<&Path>) -> Result<Vec<String>, CliError> {
    let path = species_path.ok_or_else(|| usage("this mode requires --species"))?;
    require_exists(path, "species file")?;
    let table = SpeciesTable::read_csv(path).map_err(domain)?;
    Ok(table
        .entries()
        .iter()
        .filter(|e| e.scored)
        .map(|e| e.id.clone())
        .collect())
}

fn write_decisions(
    ctx: &Context,
    table: &PredictionTable,
    thresholds: &ThresholdTable,
) -> Result<(), CliError> {
    let decisions = apply_thresholds(table, thresholds).map_err(domain)?;
    let out_path = ctx.out.join("decisions.csv");
    write_truth_csv(&out_path, &decisions).map_err(domain)?;
    println!(
        "{} segment decisions written to {}",
        decisions.len(),
        out_path.display()
    );
    Ok(())
}

/// Per-species probability histogram over uniform bins of [0, 1].
///
/// Bin `i` covers `[i/20, (i+1)/20)` with the final bin closed at 1.0, so
/// every probability lands in exactly one bin and each species' counts sum
/// to the segment count.
fn histogram_csv(table: &PredictionTable, species: &[String]) -> Result<String, CliError> {
    let mut out = String::from("species,bin_low,bin_high,count\n");
    for id in species {
        let column = table.column(id).map_err(domain)?;
        let mut bins = [0u64; HIST_BINS];
        for p in column {
            let i = ((p * HIST_BINS as f64) as usize).min(HIST_BINS - 1);
            bins[i] += 1;
        }
        for (i, count) in bins.iter().enumerate() {
            let low = i as f64 / HIST_BINS as f64;
            let high = (i + 1) as f64 / HIST_BINS as f64;
            let _ = writeln!(out, "{id},{low},{high},{count}");
        }
    }
    Ok(out)
}
