//! Corpus synthesis command.

use birdsed::dataset::synth;

use super::{domain, CliError, Context};

pub fn run(ctx: &Context) -> Result<(), CliError> {
    let seed = ctx.seed()?;
    let summary = synth::generate(&ctx.config.synth, seed, &ctx.out).map_err(domain)?;

    // Class counts print most frequent first so the long tail reads from
    // the bottom up.
    let mut counts: Vec<_> = summary
        .table
        .entries()
        .iter()
        .map(|e| (e.id.clone(), e.count))
        .collect();
    counts.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));

    println!("species recordings");
    for (species, count) in &counts {
        println!("{species} {count}");
    }
    println!(
        "train {} calibration {} evaluation {}",
        summary.n_train, summary.n_calibration, summary.n_evaluation
    );
    println!("corpus written to {}", summary.out_dir.display());
    Ok(())
}
