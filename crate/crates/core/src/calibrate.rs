//! Post-processing calibration.
//!
//! Two independent corrections sit between raw clip probabilities and final
//! decisions. Penalization subtracts a fraction of each class's training
//! share, countering the head-class bias a long-tailed training set leaves
//! in the scores. Class-wise thresholds replace one global cutoff: per
//! species, candidate cutoffs are taken at quantiles of that species' score
//! distribution and scored as call/nocall detectors on held-out soundscape
//! truth, and the best quantile wins. Both read and write plain CSV so runs
//! stay inspectable and reproducible.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::SegmentLabels;
use crate::metrics::{binarized_auc, LabelMap, MetricsError};

#[derive(Debug, Error)]
pub enum CalibrateError {
    #[error("invalid calibration input: {reason}")]
    InvalidInput { reason: String },
    #[error("prediction tables do not align: {reason}")]
    Misaligned { reason: String },
    #[error("no threshold fitted for species {species}")]
    MissingThreshold { species: String },
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("failed to access {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path} row {line}: {reason}")]
    MalformedRow {
        path: String,
        line: u64,
        reason: String,
    },
}

/// Per-segment class probabilities for a set of recordings.
///
/// Keys are (recording, segment index) pairs; every key carries one
/// probability per species, all within [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionTable {
    keys: Vec<(String, usize)>,
    species: Vec<String>,
    rows: Vec<Vec<f64>>,
}

impl PredictionTable {
    pub fn new(
        keys: Vec<(String, usize)>,
        species: Vec<String>,
        rows: Vec<Vec<f64>>,
    ) -> Result<Self, CalibrateError> {
        let fail = |reason: String| Err(CalibrateError::InvalidInput { reason });
        if species.is_empty() {
            return fail("prediction table needs at least one species".to_string());
        }
        let mut seen_species = std::collections::HashSet::new();
        for s in &species {
            if !seen_species.insert(s.clone()) {
                return fail(format!("duplicate species {s}"));
            }
        }
        if rows.len() != keys.len() {
            return fail(format!("{} rows for {} keys", rows.len(), keys.len()));
        }
        let mut seen_keys = std::collections::HashSet::new();
        for key in &keys {
            if !seen_keys.insert(key.clone()) {
                return fail(format!("duplicate segment {}:{}", key.0, key.1));
            }
        }
        for (key, row) in keys.iter().zip(&rows) {
            if row.len() != species.len() {
                return fail(format!(
                    "segment {}:{} has {} probabilities for {} species",
                    key.0,
                    key.1,
                    row.len(),
                    species.len()
                ));
            }
            for &p in row {
                if !(p.is_finite() && (0.0..=1.0).contains(&p)) {
                    return fail(format!("probability {p} outside [0, 1]"));
                }
            }
        }
        Ok(Self {
            keys,
            species,
            rows,
        })
    }

    #[must_use]
    pub fn keys(&self) -> &[(String, usize)] {
        &self.keys
    }

    #[must_use]
    pub fn species(&self) -> &[String] {
        &self.species
    }

    #[must_use]
    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    /// Probability column of one species across all segments.
    pub fn column(&self, species: &str) -> Result<Vec<f64>, CalibrateError> {
        let idx = self
            .species
            .iter()
            .position(|s| s == species)
            .ok_or_else(|| CalibrateError::InvalidInput {
                reason: format!("species {species} not in prediction table"),
            })?;
        Ok(self.rows.iter().map(|r| r[idx]).collect())
    }

    /// Reads the long-format CSV written by `write_csv`, canonicalizing keys
    /// and species to sorted order. Every segment must list every species.
    pub fn read_csv(path: &Path) -> Result<Self, CalibrateError> {
        let display = path.display().to_string();
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_path(path)
            .map_err(|e| csv_open_error(&display, e))?;
        check_header(
            &mut reader,
            &display,
            &["recording", "segment_index", "species", "probability"],
        )?;

        let mut cells: BTreeMap<(String, usize), BTreeMap<String, f64>> = BTreeMap::new();
        for (i, record) in reader.records().enumerate() {
            let line = i as u64 + 2;
            let bad = |reason: String| CalibrateError::MalformedRow {
                path: display.clone(),
                line,
                reason,
            };
            let record = record.map_err(|e| bad(e.to_string()))?;
            if record.len() != 4 {
                return Err(bad(format!("expected 4 fields, got {}", record.len())));
            }
            let segment: usize = record[1]
                .parse()
                .map_err(|_| bad(format!("bad segment index {:?}", &record[1])))?;
            let prob: f64 = record[3]
                .parse()
                .map_err(|_| bad(format!("bad probability {:?}", &record[3])))?;
            let key = (record[0].to_string(), segment);
            let species = record[2].to_string();
            if cells
                .entry(key.clone())
                .or_default()
                .insert(species.clone(), prob)
                .is_some()
            {
                return Err(bad(format!(
                    "duplicate probability for {}:{} {species}",
                    key.0, key.1
                )));
            }
        }
        if cells.is_empty() {
            return Err(CalibrateError::InvalidInput {
                reason: format!("{display} holds no predictions"),
            });
        }

        let species: Vec<String> = cells.values().next().unwrap().keys().cloned().collect();
        let mut keys = Vec::with_capacity(cells.len());
        let mut rows = Vec::with_capacity(cells.len());
        for (key, by_species) in cells {
            let this: Vec<String> = by_species.keys().cloned().collect();
            if this != species {
                return Err(CalibrateError::InvalidInput {
                    reason: format!(
                        "segment {}:{} lists different species than the first segment",
                        key.0, key.1
                    ),
                });
            }
            rows.push(by_species.into_values().collect());
            keys.push(key);
        }
        Self::new(keys, species, rows)
    }

    /// Writes the table in long format, one row per (segment, species).
    pub fn write_csv(&self, path: &Path) -> Result<(), CalibrateError> {
        let mut out = String::from("recording,segment_index,species,probability\n");
        for (key, row) in self.keys.iter().zip(&self.rows) {
            for (s, p) in self.species.iter().zip(row) {
                out.push_str(&format!("{},{},{},{}\n", key.0, key.1, s, p));
            }
        }
        std::fs::write(path, out).map_err(|source| CalibrateError::Io {
            path: path.display().to_string(),
            source,
        })
    }
}

fn csv_open_error(path: &str, e: csv::Error) -> CalibrateError {
    match e.into_kind() {
        csv::ErrorKind::Io(source) => CalibrateError::Io {
            path: path.to_string(),
            source,
        },
        other => CalibrateError::InvalidInput {
            reason: format!("{path}: {other:?}"),
        },
    }
}

fn check_header<R: std::io::Read>(
    reader: &mut csv::Reader<R>,
    path: &str,
    expected: &[&str],
) -> Result<(), CalibrateError> {
    let headers = reader.headers().map_err(|e| CalibrateError::InvalidInput {
        reason: format!("{path}: {e}"),
    })?;
    let got: Vec<&str> = headers.iter().collect();
    if got != expected {
        return Err(CalibrateError::InvalidInput {
            reason: format!("{path}: expected header {expected:?}, got {got:?}"),
        });
    }
    Ok(())
}

/// Subtracts `factor * count_i / total` from every probability of species i
/// and clamps back to [0, 1]. Counts are training-set recording counts; the
/// total is taken over the table's species only.
pub fn penalize(
    table: &PredictionTable,
    factor: f64,
    counts: &BTreeMap<String, u64>,
) -> Result<PredictionTable, CalibrateError> {
    if !(factor.is_finite() && factor >= 0.0) {
        return Err(CalibrateError::InvalidInput {
            reason: format!("penalization factor must be >= 0, got {factor}"),
        });
    }
    let shares: Vec<u64> = table
        .species
        .iter()
        .map(|s| {
            counts.get(s).copied().ok_or_else(|| CalibrateError::InvalidInput {
                reason: format!("no training count for species {s}"),
            })
        })
        .collect::<Result<_, _>>()?;
    let total: u64 = shares.iter().sum();
    if total == 0 {
        return Err(CalibrateError::InvalidInput {
            reason: "training counts sum to zero".to_string(),
        });
    }
    let rows = table
        .rows
        .iter()
        .map(|row| {
            row.iter()
                .zip(&shares)
                .map(|(&p, &x)| (p - factor * x as f64 / total as f64).clamp(0.0, 1.0))
                .collect()
        })
        .collect();
    PredictionTable::new(table.keys.clone(), table.species.clone(), rows)
}

/// Linearly interpolated quantile of an ascending slice: rank q * (n - 1).
#[must_use]
pub fn linear_quantile(sorted: &[f64], q: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    debug_assert!((0.0..=1.0).contains(&q));
    let rank = q * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = rank - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

/// The evenly spaced candidate quantiles 0.05, 0.10, ..., 0.95.
#[must_use]
pub fn default_quantile_grid() -> Vec<f64> {
    (1..=19).map(|i| f64::from(i) / 20.0).collect()
}

/// One fitted decision threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdRow {
    pub species: String,
    /// Quantile the threshold was taken at; NaN for a fixed global cutoff.
    pub quantile: f64,
    pub threshold: f64,
    /// Balanced call/nocall accuracy of the thresholded detector on the
    /// calibration set; NaN for a fixed global cutoff.
    pub score: f64,
}

/// Fitted thresholds, one row per calibrated species.
#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdTable {
    pub rows: Vec<ThresholdRow>,
}

impl ThresholdTable {
    pub fn read_csv(path: &Path) -> Result<Self, CalibrateError> {
        let display = path.display().to_string();
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_path(path)
            .map_err(|e| csv_open_error(&display, e))?;
        check_header(
            &mut reader,
            &display,
            &["species", "quantile", "threshold", "score"],
        )?;
        let mut rows = Vec::new();
        let mut seen = std::collections::HashSet::new();
        for (i, record) in reader.records().enumerate() {
            let line = i as u64 + 2;
            let bad = |reason: String| CalibrateError::MalformedRow {
                path: display.clone(),
                line,
                reason,
            };
            let record = record.map_err(|e| bad(e.to_string()))?;
            if record.len() != 4 {
                return Err(bad(format!("expected 4 fields, got {}", record.len())));
            }
            let species = record[0].to_string();
            if !seen.insert(species.clone()) {
                return Err(bad(format!("duplicate species {species}")));
            }
            let parse = |field: usize, name: &str| -> Result<f64, CalibrateError> {
                record[field]
                    .parse()
                    .map_err(|_| bad(format!("bad {name} {:?}", &record[field])))
            };
            let threshold = parse(2, "threshold")?;
            if !threshold.is_finite() {
                return Err(bad(format!("threshold {threshold} is not finite")));
            }
            rows.push(ThresholdRow {
                species,
                quantile: parse(1, "quantile")?,
                threshold,
                score: parse(3, "score")?,
            });
        }
        if rows.is_empty() {
            return Err(CalibrateError::InvalidInput {
                reason: format!("{display} holds no thresholds"),
            });
        }
        Ok(Self { rows })
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), CalibrateError> {
        let mut out = String::from("species,quantile,threshold,score\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{}\n",
                r.species, r.quantile, r.threshold, r.score
            ));
        }
        std::fs::write(path, out).map_err(|source| CalibrateError::Io {
            path: path.display().to_string(),
            source,
        })
    }
}

/// Converts segment truth to species-agnostic call flags aligned with the
/// table's keys. A segment counts as a call when its label set holds
/// anything besides "nocall".
fn call_flags(table: &PredictionTable, truth: &LabelMap) -> Result<Vec<bool>, CalibrateError> {
    table
        .keys
        .iter()
        .map(|key| {
            truth
                .get(key)
                .map(|labels| labels.iter().any(|l| l != "nocall"))
                .ok_or_else(|| CalibrateError::InvalidInput {
                    reason: format!("no truth for segment {}:{}", key.0, key.1),
                })
        })
        .collect()
}

/// Fits one decision threshold per requested species.
///
/// Candidates are quantiles of the species' own probability column. Each
/// candidate is scored as a call/nocall detector by balanced accuracy
/// (mean of true positive and true negative rate) against the truth, and
/// the best-scoring candidate wins; ties keep the smallest quantile. The
/// grid must be ascending and the truth must contain both calls and
/// nocalls.
pub fn fit_class_thresholds(
    table: &PredictionTable,
    truth: &LabelMap,
    grid: &[f64],
    species: &[String],
) -> Result<ThresholdTable, CalibrateError> {
    if grid.is_empty() {
        return Err(CalibrateError::InvalidInput {
            reason: "quantile grid is empty".to_string(),
        });
    }
    if grid.iter().any(|&q| !(0.0..=1.0).contains(&q)) {
        return Err(CalibrateError::InvalidInput {
            reason: "quantiles must lie in [0, 1]".to_string(),
        });
    }
    for pair in grid.windows(2) {
        if pair[0] >= pair[1] {
            return Err(CalibrateError::InvalidInput {
                reason: "quantile grid must be strictly ascending".to_string(),
            });
        }
    }
    if species.is_empty() {
        return Err(CalibrateError::InvalidInput {
            reason: "no species to calibrate".to_string(),
        });
    }
    let calls = call_flags(table, truth)?;
    if calls.iter().all(|&c| c) || calls.iter().all(|&c| !c) {
        return Err(CalibrateError::InvalidInput {
            reason: "calibration truth needs both call and nocall segments".to_string(),
        });
    }

    let mut rows = Vec::with_capacity(species.len());
    for s in species {
        let column = table.column(s)?;
        let mut sorted = column.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).expect("probabilities are finite"));
        let mut best: Option<ThresholdRow> = None;
        for &q in grid {
            let threshold = linear_quantile(&sorted, q);
            let decisions: Vec<bool> = column.iter().map(|&p| p >= threshold).collect();
            let score = binarized_auc(&decisions, &calls)?;
            if best.as_ref().is_none_or(|b| score > b.score) {
                best = Some(ThresholdRow {
                    species: s.clone(),
                    quantile: q,
                    threshold,
                    score,
                });
            }
        }
        rows.push(best.expect("grid is non-empty"));
    }
    Ok(ThresholdTable { rows })
}

/// A fixed cutoff for every species, as a threshold table. Quantile and
/// score are NaN because nothing was fitted.
#[must_use]
pub fn global_thresholds(species: &[String], threshold: f64) -> ThresholdTable {
    ThresholdTable {
        rows: species
            .iter()
            .map(|s| ThresholdRow {
                species: s.clone(),
                quantile: f64::NAN,
                threshold,
                score: f64::NAN,
            })
            .collect(),
    }
}

/// Thresholds every segment into a label set. A species is emitted when its
/// probability reaches its threshold; a segment with no species becomes
/// "nocall". Species without a threshold row are left out of the decisions.
pub fn apply_thresholds(
    table: &PredictionTable,
    thresholds: &ThresholdTable,
) -> Result<Vec<SegmentLabels>, CalibrateError> {
    let mut columns = Vec::with_capacity(thresholds.rows.len());
    for row in &thresholds.rows {
        columns.push((row.species.as_str(), row.threshold, table.column(&row.species)?));
    }
    let mut out = Vec::with_capacity(table.keys.len());
    for (i, key) in table.keys.iter().enumerate() {
        let mut labels = std::collections::BTreeSet::new();
        for (species, threshold, column) in &columns {
            if column[i] >= *threshold {
                labels.insert((*species).to_string());
            }
        }
        if labels.is_empty() {
            labels.insert("nocall".to_string());
        }
        out.push(SegmentLabels {
            recording: key.0.clone(),
            segment_index: key.1,
            labels,
        });
    }
    Ok(out)
}

/// Cellwise mean of several aligned prediction tables.
pub fn ensemble_mean(tables: &[PredictionTable]) -> Result<PredictionTable, CalibrateError> {
    let first = tables.first().ok_or_else(|| CalibrateError::InvalidInput {
        reason: "ensemble needs at least one table".to_string(),
    })?;
    for (i, t) in tables.iter().enumerate().skip(1) {
        if t.keys != first.keys {
            return Err(CalibrateError::Misaligned {
                reason: format!("table {i} covers different segments"),
            });
        }
        if t.species != first.species {
            return Err(CalibrateError::Misaligned {
                reason: format!("table {i} covers different species"),
            });
        }
    }
    let n = tables.len() as f64;
    let rows: Vec<Vec<f64>> = (0..first.rows.len())
        .map(|r| {
            (0..first.species.len())
                .map(|c| tables.iter().map(|t| t.rows[r][c]).sum::<f64>() / n)
                .collect()
        })
        .collect();
    PredictionTable::new(first.keys.clone(), first.species.clone(), rows)
}
