//! Decision scoring command.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use birdsed::dataset::{read_truth_csv, truth_label_map};
use birdsed::metrics::{confusion_counts, macro_f1, micro_f1};

use super::{domain, require_exists, CliError, Context};

pub fn run(ctx: &Context, decisions_path: &Path, truth_path: &Path) -> Result<(), CliError> {
    require_exists(decisions_path, "decisions file")?;
    require_exists(truth_path, "truth file")?;

    let decisions = read_truth_csv(decisions_path).map_err(domain)?;
    let truth = read_truth_csv(truth_path).map_err(domain)?;
    let decisions = truth_label_map(&decisions);
    let truth = truth_label_map(&truth);

    let counts = confusion_counts(&decisions, &truth).map_err(domain)?;
    let micro = micro_f1(&counts);
    let macro_ = macro_f1(&counts);

    // Per-class rows come first in class order, then pooled micro counts,
    // then the macro average with no counts of its own.
    let mut report = String::from("class,hits,false_alarms,misses,precision,recall,f1\n");
    let mut pooled = birdsed::metrics::ConfusionCounts::default();
    for (class, c) in &counts {
        pooled.hits += c.hits;
        pooled.false_alarms += c.false_alarms;
        pooled.misses += c.misses;
        let _ = writeln!(
            report,
            "{class},{},{},{},{},{},{}",
            c.hits,
            c.false_alarms,
            c.misses,
            c.precision(),
            c.recall(),
            c.f1()
        );
    }
    let _ = writeln!(
        report,
        "micro,{},{},{},{},{},{micro}",
        pooled.hits,
        pooled.false_alarms,
        pooled.misses,
        pooled.precision(),
        pooled.recall()
    );
    let _ = writeln!(report, "macro,,,,,,{macro_}");

    let out_path = ctx.out.join("evaluation.csv");
    fs::write(&out_path, report).map_err(|e| domain(format!("{}: {e}", out_path.display())))?;

    println!("micro F1 {micro}");
    println!("macro F1 {macro_}");
    println!("report written to {}", out_path.display());
    Ok(())
}
