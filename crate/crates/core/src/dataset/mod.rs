//! Weak-label dataset handling: species tables, recording metadata,
//! segment-level truth, clip caching, and training batch assembly.
//!
//! Batch composition is counter-seeded: every item derives its own ChaCha
//! stream from `(base_seed, batch_index, item_index)`, so any batch can be
//! reproduced in isolation and parallel assembly cannot reorder draws.

pub mod synth;

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::audio::{self, AudioClip};
use crate::augment::{
    mix_background, sample_lambda, selective_mixup, spec_augment, BackgroundPolicy, MixupPolicy,
    SpecAugmentPolicy,
};
use crate::dsp::{MelEngine, MelSpectrogram, SpectrogramParams};
use crate::metrics::LabelMap;
use crate::Real;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("failed to access {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("{path}:{line}: malformed row: {reason}")]
    MalformedRow {
        path: String,
        line: u64,
        reason: String,
    },
    #[error("{path}: expected header {expected:?}, found {found:?}")]
    BadHeader {
        path: String,
        expected: &'static str,
        found: String,
    },
    #[error("{path}: no data rows")]
    EmptyFile { path: String },
    #[error("{path}:{line}: unknown species {species:?}")]
    UnknownSpecies {
        path: String,
        line: u64,
        species: String,
    },
    #[error("{path}:{line}: rating {value} outside [0, 5]")]
    BadRating { path: String, line: u64, value: f32 },
    #[error("{path}:{line}: recording has no labels")]
    NoLabels { path: String, line: u64 },
    #[error("duplicate species id {species:?}")]
    DuplicateSpecies { species: String },
    #[error("{path}:{line}: duplicate segment ({recording}, {segment})")]
    DuplicateSegment {
        path: String,
        line: u64,
        recording: String,
        segment: usize,
    },
    #[error("invalid batch config: {reason}")]
    InvalidBatchConfig { reason: String },
    #[error("cannot sample a batch from zero recordings")]
    NoRecordings,
    #[error("invalid synth config: {reason}")]
    InvalidSynthConfig { reason: String },
}

/// One species with its scored flag and (optional) training-set count.
#[derive(Debug, Clone)]
pub struct SpeciesEntry {
    pub id: String,
    pub scored: bool,
    pub count: u64,
}

/// Ordered species vocabulary. Order is load order and binds class indices
/// across training, inference, and calibration.
#[derive(Debug, Clone)]
pub struct SpeciesTable {
    entries: Vec<SpeciesEntry>,
    index: HashMap<String, usize>,
}

impl SpeciesTable {
    pub fn new(species: Vec<(String, bool)>) -> Result<Self, DatasetError> {
        let mut entries = Vec::with_capacity(species.len());
        let mut index = HashMap::new();
        for (id, scored) in species {
            if index.insert(id.clone(), entries.len()).is_some() {
                return Err(DatasetError::DuplicateSpecies { species: id });
            }
            entries.push(SpeciesEntry {
                id,
                scored,
                count: 0,
            });
        }
        Ok(Self { entries, index })
    }

    #[must_use]
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    #[must_use]
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    #[must_use]
    pub fn entries(&self) -> &[SpeciesEntry] {
        &self.entries
    }

    #[must_use]
    pub fn id(&self, index: usize) -> &str {
        &self.entries[index].id
    }

    #[must_use]
    pub fn lookup(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    #[must_use]
    pub fn ids(&self) -> Vec<String> {
        self.entries.iter().map(|e| e.id.clone()).collect()
    }

    #[must_use]
    pub fn scored_mask(&self) -> Vec<bool> {
        self.entries.iter().map(|e| e.scored).collect()
    }

    #[must_use]
    pub fn counts(&self) -> Vec<u64> {
        self.entries.iter().map(|e| e.count).collect()
    }

    /// Reads a `species,scored` table; scored is `1` or `0`.
    pub fn read_csv(path: &Path) -> Result<Self, DatasetError> {
        let display = path.display().to_string();
        let mut reader = open_csv(path, "species,scored")?;
        let mut species = Vec::new();
        for record in reader.records() {
            let (record, line) = unwrap_record(record, &display)?;
            if record.len() != 2 {
                return Err(DatasetError::MalformedRow {
                    path: display,
                    line,
                    reason: format!("expected 2 fields, found {}", record.len()),
                });
            }
            let scored = match &record[1] {
                "1" => true,
                "0" => false,
                other => {
                    return Err(DatasetError::MalformedRow {
                        path: display,
                        line,
                        reason: format!("scored flag must be 0 or 1, found {other:?}"),
                    })
                }
            };
            species.push((record[0].to_string(), scored));
        }
        if species.is_empty() {
            return Err(DatasetError::EmptyFile { path: display });
        }
        Self::new(species)
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), DatasetError> {
        let mut out = String::from("species,scored\n");
        for e in &self.entries {
            out.push_str(&format!("{},{}\n", e.id, u8::from(e.scored)));
        }
        fs::write(path, out).map_err(|source| DatasetError::Io {
            path: path.display().to_string(),
            source,
        })
    }
}

/// One weakly labelled recording. `labels[0]` is the primary label.
#[derive(Debug, Clone)]
pub struct Recording {
    pub audio_path: PathBuf,
    pub labels: Vec<usize>,
    pub rating: f32,
}

impl Recording {
    #[must_use]
    pub fn primary(&self) -> usize {
        self.labels[0]
    }

    /// Multi-hot target vector over `n_classes`.
    #[must_use]
    pub fn multi_hot(&self, n_classes: usize) -> Vec<f32> {
        let mut out = vec![0.0f32; n_classes];
        for &l in &self.labels {
            out[l] = 1.0;
        }
        out
    }
}

fn open_csv(path: &Path, expected_header: &'static str) -> Result<csv::Reader<fs::File>, DatasetError> {
    let display = path.display().to_string();
    let file = fs::File::open(path).map_err(|source| DatasetError::Io {
        path: display.clone(),
        source,
    })?;
    let mut reader = csv::ReaderBuilder::new().flexible(true).from_reader(file);
    let header = reader
        .headers()
        .map_err(|e| DatasetError::MalformedRow {
            path: display.clone(),
            line: 1,
            reason: e.to_string(),
        })?
        .iter()
        .collect::<Vec<_>>()
        .join(",");
    if header != expected_header {
        return Err(DatasetError::BadHeader {
            path: display,
            expected: expected_header,
            found: header,
        });
    }
    Ok(reader)
}

fn unwrap_record(
    record: Result<csv::StringRecord, csv::Error>,
    path: &str,
) -> Result<(csv::StringRecord, u64), DatasetError> {
    match record {
        Ok(r) => {
            let line = r.position().map_or(0, csv::Position::line);
            Ok((r, line))
        }
        Err(e) => Err(DatasetError::MalformedRow {
            path: path.to_string(),
            line: e
                .position()
                .map_or(0, csv::Position::line),
            reason: e.to_string(),
        }),
    }
}

/// Parses `filename,labels,rating` metadata. Labels are space-separated
/// species ids, primary first; audio paths resolve relative to the CSV's
/// directory; ratings are 0 (unrated) through 5.
pub fn parse_metadata(path: &Path, table: &SpeciesTable) -> Result<Vec<Recording>, DatasetError> {
    let display = path.display().to_string();
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let mut reader = open_csv(path, "filename,labels,rating")?;
    let mut recordings = Vec::new();
    for record in reader.records() {
        let (record, line) = unwrap_record(record, &display)?;
        if record.len() != 3 {
            return Err(DatasetError::MalformedRow {
                path: display,
                line,
                reason: format!("expected 3 fields, found {}", record.len()),
            });
        }
        let filename = record[0].trim();
        if filename.is_empty() {
            return Err(DatasetError::MalformedRow {
                path: display,
                line,
                reason: "empty filename".to_string(),
            });
        }
        let mut labels = Vec::new();
        for id in record[1].split_whitespace() {
            let idx = table.lookup(id).ok_or_else(|| DatasetError::UnknownSpecies {
                path: display.clone(),
                line,
                species: id.to_string(),
            })?;
            if !labels.contains(&idx) {
                labels.push(idx);
            }
        }
        if labels.is_empty() {
            return Err(DatasetError::NoLabels { path: display, line });
        }
        let rating: f32 = record[2].trim().parse().map_err(|_| DatasetError::MalformedRow {
            path: display.clone(),
            line,
            reason: format!("unparseable rating {:?}", &record[2]),
        })?;
        if !rating.is_finite() || !(0.0..=5.0).contains(&rating) {
            return Err(DatasetError::BadRating {
                path: display,
                line,
                value: rating,
            });
        }
        recordings.push(Recording {
            audio_path: base.join(filename),
            labels,
            rating,
        });
    }
    if recordings.is_empty() {
        return Err(DatasetError::EmptyFile { path: display });
    }
    Ok(recordings)
}

/// Returns a copy of `table` with per-class recording counts filled in.
/// A recording contributes once to every species in its label set.
#[must_use]
pub fn class_distribution(recordings: &[Recording], table: &SpeciesTable) -> SpeciesTable {
    let mut out = table.clone();
    for e in &mut out.entries {
        e.count = 0;
    }
    for rec in recordings {
        for &l in &rec.labels {
            out.entries[l].count += 1;
        }
    }
    out
}

/// Labels of one soundscape segment. An empty detection is encoded as the
/// literal class `nocall`, so the set is never empty.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentLabels {
    pub recording: String,
    pub segment_index: usize,
    pub labels: BTreeSet<String>,
}

impl SegmentLabels {
    #[must_use]
    pub fn is_nocall(&self) -> bool {
        self.labels.len() == 1 && self.labels.contains("nocall")
    }
}

/// Reads `recording,segment_index,labels` truth/decision rows.
pub fn read_truth_csv(path: &Path) -> Result<Vec<SegmentLabels>, DatasetError> {
    let display = path.display().to_string();
    let mut reader = open_csv(path, "recording,segment_index,labels")?;
    let mut rows: Vec<SegmentLabels> = Vec::new();
    let mut seen = BTreeSet::new();
    for record in reader.records() {
        let (record, line) = unwrap_record(record, &display)?;
        if record.len() != 3 {
            return Err(DatasetError::MalformedRow {
                path: display,
                line,
                reason: format!("expected 3 fields, found {}", record.len()),
            });
        }
        let segment_index: usize = record[1].trim().parse().map_err(|_| DatasetError::MalformedRow {
            path: display.clone(),
            line,
            reason: format!("unparseable segment index {:?}", &record[1]),
        })?;
        let labels: BTreeSet<String> = record[2]
            .split_whitespace()
            .map(str::to_string)
            .collect();
        if labels.is_empty() {
            return Err(DatasetError::MalformedRow {
                path: display,
                line,
                reason: "empty label set (use the nocall literal)".to_string(),
            });
        }
        let recording = record[0].to_string();
        if !seen.insert((recording.clone(), segment_index)) {
            return Err(DatasetError::DuplicateSegment {
                path: display,
                line,
                recording,
                segment: segment_index,
            });
        }
        rows.push(SegmentLabels {
            recording,
            segment_index,
            labels,
        });
    }
    if rows.is_empty() {
        return Err(DatasetError::EmptyFile { path: display });
    }
    Ok(rows)
}

pub fn write_truth_csv(path: &Path, rows: &[SegmentLabels]) -> Result<(), DatasetError> {
    let mut out = String::from("recording,segment_index,labels\n");
    for row in rows {
        let labels: Vec<&str> = row.labels.iter().map(String::as_str).collect();
        out.push_str(&format!(
            "{},{},{}\n",
            row.recording,
            row.segment_index,
            labels.join(" ")
        ));
    }
    fs::write(path, out).map_err(|source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Converts truth rows into the keyed map the metrics consume.
#[must_use]
pub fn truth_label_map(rows: &[SegmentLabels]) -> LabelMap {
    rows.iter()
        .map(|r| ((r.recording.clone(), r.segment_index), r.labels.clone()))
        .collect()
}

/// Decoded-clip cache. Clips are loaded once, resampled to the target rate,
/// and shared; repeated epochs over the same recordings stay I/O free.
pub struct ClipStore {
    target_rate: u32,
    cache: Mutex<HashMap<PathBuf, Arc<AudioClip>>>,
}

impl ClipStore {
    #[must_use]
    pub fn new(target_rate: u32) -> Self {
        Self {
            target_rate,
            cache: Mutex::new(HashMap::new()),
        }
    }

    #[must_use]
    pub fn target_rate(&self) -> u32 {
        self.target_rate
    }

    pub fn get(&self, path: &Path) -> Result<Arc<AudioClip>, crate::Error> {
        if let Some(hit) = self.cache.lock().unwrap().get(path) {
            return Ok(Arc::clone(hit));
        }
        let clip = audio::load_wav(path)?;
        let clip = audio::resample(&clip, self.target_rate)?;
        let clip = Arc::new(clip);
        self.cache
            .lock()
            .unwrap()
            .entry(path.to_path_buf())
            .or_insert_with(|| Arc::clone(&clip));
        Ok(clip)
    }
}

/// SplitMix64 step, the mixing core of the seed derivation.
fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives an independent stream seed from `(base, stream, index)`.
///
/// Used for batch items `(seed, batch_index, item)`, train/val splits, and
/// dropout, so that no two consumers share a ChaCha stream. The mapping is
/// fixed; changing it changes every seeded run.
#[must_use]
pub fn derive_seed(base: u64, stream: u64, index: u64) -> u64 {
    let a = splitmix64(base ^ 0xA076_1D64_78BD_642F);
    let b = splitmix64(a ^ stream.wrapping_mul(0xE703_7ED1_A0B4_28DB));
    splitmix64(b ^ index.wrapping_mul(0x8EBC_6AF0_9C88_C6E3))
}

/// Noise source for background mixing: a policy plus the pool of noise
/// recordings it draws from.
#[derive(Debug, Clone)]
pub struct BackgroundMix {
    pub policy: BackgroundPolicy,
    pub noise_paths: Vec<PathBuf>,
}

/// Batch assembly configuration.
#[derive(Debug, Clone)]
pub struct BatchConfig {
    pub batch_size: usize,
    pub window_seconds: f64,
    pub chunk_seconds: f64,
    pub n_chunks: usize,
    pub spectrogram: SpectrogramParams,
    pub background: Option<BackgroundMix>,
    pub mixup: Option<MixupPolicy>,
    pub spec_augment: Option<SpecAugmentPolicy>,
}

impl Default for BatchConfig {
    fn default() -> Self {
        Self {
            batch_size: 24,
            window_seconds: 30.0,
            chunk_seconds: 5.0,
            n_chunks: 6,
            spectrogram: SpectrogramParams::default(),
            background: None,
            mixup: Some(MixupPolicy::default()),
            spec_augment: Some(SpecAugmentPolicy::default()),
        }
    }
}

impl BatchConfig {
    pub fn validate(&self) -> Result<(), DatasetError> {
        let fail = |reason: String| Err(DatasetError::InvalidBatchConfig { reason });
        if self.batch_size == 0 {
            return fail("batch_size must be positive".into());
        }
        if self.n_chunks == 0 {
            return fail("n_chunks must be positive".into());
        }
        let sr = f64::from(self.spectrogram.sample_rate);
        let window = (self.window_seconds * sr).round() as i64;
        let chunk = (self.chunk_seconds * sr).round() as i64;
        if window < 1 || chunk < 1 {
            return fail("window and chunk must be positive".into());
        }
        if window != chunk * self.n_chunks as i64 {
            return fail(format!(
                "window of {window} samples is not n_chunks ({}) times the chunk ({chunk})",
                self.n_chunks
            ));
        }
        if let Some(bg) = &self.background {
            bg.policy
                .validate()
                .map_err(|e| DatasetError::InvalidBatchConfig {
                    reason: e.to_string(),
                })?;
            if bg.noise_paths.is_empty() {
                return fail("background mixing configured without noise recordings".into());
            }
        }
        if let Some(mixup) = &self.mixup {
            mixup.validate().map_err(|e| DatasetError::InvalidBatchConfig {
                reason: e.to_string(),
            })?;
        }
        Ok(())
    }
}

/// One training item: the windowed chunk spectrograms plus its (possibly
/// mixup-unioned) targets and the source recording's rating.
#[derive(Debug, Clone)]
pub struct BatchItem<F> {
    pub chunks: Vec<MelSpectrogram<F>>,
    pub targets: Vec<f32>,
    pub rating: f32,
}

/// A sampled training batch.
#[derive(Debug, Clone)]
pub struct Batch<F> {
    pub items: Vec<BatchItem<F>>,
}

/// Samples one batch.
///
/// Per item, in fixed draw order: recording choice, crop offset, background
/// coin plus noise/SNR draws (only when a background source is configured),
/// mixup coin, then (when mixing) partner species, partner recording,
/// partner crop, and the Beta weight, then per-chunk masking draws. Mixup
/// partners are drawn species-uniformly over scored species that have at
/// least one recording with a scored primary label, then uniformly within
/// that species' pool, so head-class abundance does not bias partner choice.
/// Background noise is mixed into the primary window only, before chunking.
pub fn sample_batch<F: Real>(
    recordings: &[Recording],
    table: &SpeciesTable,
    cfg: &BatchConfig,
    engine: &MelEngine<F>,
    store: &ClipStore,
    base_seed: u64,
    batch_index: u64,
) -> Result<Batch<F>, crate::Error> {
    cfg.validate()?;
    if recordings.is_empty() {
        return Err(DatasetError::NoRecordings.into());
    }
    if *engine.params() != cfg.spectrogram {
        return Err(DatasetError::InvalidBatchConfig {
            reason: "engine params differ from batch config".to_string(),
        }
        .into());
    }
    if store.target_rate() != cfg.spectrogram.sample_rate {
        return Err(DatasetError::InvalidBatchConfig {
            reason: "clip store rate differs from spectrogram rate".to_string(),
        }
        .into());
    }

    // Species-uniform mixup pools: scored species -> recordings whose
    // primary label is that species.
    let mut pools: Vec<(usize, Vec<usize>)> = Vec::new();
    if cfg.mixup.is_some() {
        let mut by_species: HashMap<usize, Vec<usize>> = HashMap::new();
        for (i, rec) in recordings.iter().enumerate() {
            let primary = rec.primary();
            if table.entries()[primary].scored {
                by_species.entry(primary).or_default().push(i);
            }
        }
        pools = by_species.into_iter().collect();
        pools.sort_by_key(|(species, _)| *species);
    }

    let n_classes = table.len();
    let items: Result<Vec<BatchItem<F>>, crate::Error> = (0..cfg.batch_size)
        .into_par_iter()
        .map(|item_idx| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(base_seed, batch_index, item_idx as u64));

            let rec = &recordings[rng.random_range(0..recordings.len())];
            let clip = store.get(&rec.audio_path)?;
            let mut window = audio::crop_window(&clip, cfg.window_seconds, &mut rng)?;
            if let Some(bg) = &cfg.background {
                let apply = rng.random::<f64>() < bg.policy.apply_probability;
                if apply {
                    let noise = store.get(&bg.noise_paths[rng.random_range(0..bg.noise_paths.len())])?;
                    let snr = bg.policy.sample_snr(&mut rng)?;
                    window = mix_background(&window, &noise, snr)?;
                }
            }
            let mut specs = chunk_spectrograms(&window, cfg, engine)?;
            let mut targets = rec.multi_hot(n_classes);

            if let Some(policy) = &cfg.mixup {
                let apply = rng.random::<f64>() < policy.apply_probability && !pools.is_empty();
                if apply {
                    let (species, pool) = &pools[rng.random_range(0..pools.len())];
                    let partner = &recordings[pool[rng.random_range(0..pool.len())]];
                    let (partner_specs, partner_targets) =
                        windowed_spectrograms(partner, cfg, engine, store, n_classes, &mut rng)?;
                    let lambda = sample_lambda(policy, &mut rng)?;
                    let partner_scored = table.entries()[*species].scored;
                    let mut mixed_targets = Vec::new();
                    for (spec, partner_spec) in specs.iter_mut().zip(&partner_specs) {
                        let (mixed, labels) = selective_mixup(
                            spec,
                            &targets,
                            partner_spec,
                            &partner_targets,
                            partner_scored,
                            lambda,
                        )?;
                        *spec = mixed;
                        mixed_targets = labels;
                    }
                    targets = mixed_targets;
                }
            }

            if let Some(policy) = &cfg.spec_augment {
                for spec in &mut specs {
                    *spec = spec_augment(spec, policy, &mut rng)?;
                }
            }

            Ok(BatchItem {
                chunks: specs,
                targets,
                rating: rec.rating,
            })
        })
        .collect();

    Ok(Batch { items: items? })
}

fn chunk_spectrograms<F: Real>(
    window: &AudioClip,
    cfg: &BatchConfig,
    engine: &MelEngine<F>,
) -> Result<Vec<MelSpectrogram<F>>, crate::Error> {
    let chunks = audio::split_chunks(window, cfg.chunk_seconds, cfg.n_chunks)?;
    Ok(chunks
        .iter()
        .map(|c| engine.mel_spectrogram(c))
        .collect::<Result<Vec<_>, _>>()?)
}

fn windowed_spectrograms<F: Real>(
    rec: &Recording,
    cfg: &BatchConfig,
    engine: &MelEngine<F>,
    store: &ClipStore,
    n_classes: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<MelSpectrogram<F>>, Vec<f32>), crate::Error> {
    let clip = store.get(&rec.audio_path)?;
    let window = audio::crop_window(&clip, cfg.window_seconds, rng)?;
    let specs = chunk_spectrograms(&window, cfg, engine)?;
    Ok((specs, rec.multi_hot(n_classes)))
}
