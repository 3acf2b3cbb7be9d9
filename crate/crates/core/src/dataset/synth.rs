//! Deterministic synthetic soundscape generator.
//!
//! Every species is a frequency-modulated burst motif with a species-specific
//! carrier, rhythm, and modulation; carriers are spaced evenly on the mel
//! scale so spectrogram resolution separates them. Recordings are noise beds
//! with motifs placed into known 5 s segments, which yields weak clip labels
//! for training plus segment-level truth for calibration and evaluation.
//!
//! Scored species follow a Zipf-style long tail; a small set of unscored
//! background species also calls in the data. Calibration and evaluation
//! truth both keep only scored species and write `nocall` for segments
//! without any scored call, mirroring annotations that ignore species
//! outside the scored list no matter how audible they are.

use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{derive_seed, write_truth_csv, DatasetError, SegmentLabels, SpeciesTable};
use crate::audio::{self, AudioClip};
use crate::dsp::{hz_to_mel, mel_to_hz};

const SEED_STREAM_TRAIN: u64 = 1;
const SEED_STREAM_CALIBRATION: u64 = 2;
const SEED_STREAM_EVALUATION: u64 = 3;

/// Ratings assigned to synthetic train clips; 0 marks an unrated clip.
const RATING_CHOICES: [f32; 8] = [0.0, 2.0, 2.5, 3.0, 3.5, 4.0, 4.5, 5.0];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub sample_rate: u32,
    /// Number of scored species (the long-tailed head-to-tail run).
    pub n_species: usize,
    /// Recordings for the most common scored species; rank r gets head/r.
    pub zipf_head: u64,
    /// Unscored species that call in the data but are never evaluated.
    pub n_background_species: usize,
    pub background_head: u64,
    pub train_clip_seconds: f64,
    pub segment_seconds: f64,
    pub n_calibration: usize,
    pub n_evaluation: usize,
    pub soundscape_seconds: f64,
    /// Peak amplitude of the uniform noise bed.
    pub noise_level: f64,
    /// Peak amplitude of one motif burst.
    pub motif_gain: f64,
    /// Carrier band; all motifs stay strictly inside it.
    pub fmin: f64,
    pub fmax: f64,
    /// Chance that a train clip carries a second species.
    pub secondary_probability: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            sample_rate: 32000,
            n_species: 8,
            zipf_head: 64,
            n_background_species: 2,
            background_head: 12,
            train_clip_seconds: 20.0,
            segment_seconds: 5.0,
            n_calibration: 12,
            n_evaluation: 12,
            soundscape_seconds: 30.0,
            noise_level: 0.05,
            motif_gain: 0.25,
            fmin: 300.0,
            fmax: 10000.0,
            secondary_probability: 0.25,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), DatasetError> {
        let fail = |reason: String| Err(DatasetError::InvalidSynthConfig { reason });
        if self.sample_rate == 0 {
            return fail("sample_rate must be positive".into());
        }
        if self.n_species == 0 {
            return fail("need at least one scored species".into());
        }
        if self.zipf_head == 0 || (self.n_background_species > 0 && self.background_head == 0) {
            return fail("head counts must be positive".into());
        }
        if !(self.segment_seconds.is_finite() && self.segment_seconds > 0.0) {
            return fail("segment_seconds must be positive".into());
        }
        let seg = self.segment_samples();
        if seg == 0 {
            return fail("segment shorter than one sample".into());
        }
        for (name, seconds) in [
            ("train_clip_seconds", self.train_clip_seconds),
            ("soundscape_seconds", self.soundscape_seconds),
        ] {
            let samples = (seconds * f64::from(self.sample_rate)).round() as usize;
            if samples == 0 || !samples.is_multiple_of(seg) {
                return fail(format!(
                    "{name} must be a positive whole number of segments"
                ));
            }
        }
        if !(self.fmin.is_finite() && self.fmin > 0.0 && self.fmax > self.fmin) {
            return fail("need 0 < fmin < fmax".into());
        }
        if self.fmax >= 0.45 * f64::from(self.sample_rate) {
            return fail(format!(
                "fmax {} leaves no headroom below Nyquist of rate {}",
                self.fmax, self.sample_rate
            ));
        }
        if !(0.0..=1.0).contains(&self.secondary_probability) {
            return fail("secondary_probability must be in [0, 1]".into());
        }
        if !(self.noise_level > 0.0 && self.noise_level <= 1.0)
            || !(self.motif_gain > 0.0 && self.motif_gain <= 1.0)
        {
            return fail("noise_level and motif_gain must be in (0, 1]".into());
        }
        let longest = self
            .motifs()
            .iter()
            .map(Motif::duration_seconds)
            .fold(0.0, f64::max);
        if longest >= self.segment_seconds {
            return fail(format!(
                "longest motif ({longest:.2} s) does not fit one segment"
            ));
        }
        Ok(())
    }

    fn segment_samples(&self) -> usize {
        (self.segment_seconds * f64::from(self.sample_rate)).round() as usize
    }

    fn total_species(&self) -> usize {
        self.n_species + self.n_background_species
    }

    /// Species ids in table order: scored `spNN` first, then background
    /// `bgNN`, both 1-based.
    #[must_use]
    pub fn species_ids(&self) -> Vec<(String, bool)> {
        let mut ids = Vec::with_capacity(self.total_species());
        for i in 0..self.n_species {
            ids.push((format!("sp{:02}", i + 1), true));
        }
        for i in 0..self.n_background_species {
            ids.push((format!("bg{:02}", i + 1), false));
        }
        ids
    }

    /// One motif per species, in table order.
    #[must_use]
    pub fn motifs(&self) -> Vec<Motif> {
        (0..self.total_species())
            .map(|s| self.species_motif(s))
            .collect()
    }

    fn species_motif(&self, index: usize) -> Motif {
        let total = self.total_species();
        let mel_lo = hz_to_mel(self.fmin);
        let mel_hi = hz_to_mel(self.fmax);
        let mel = mel_lo + (index as f64 + 1.0) / (total as f64 + 1.0) * (mel_hi - mel_lo);
        let carrier_hz = mel_to_hz(mel);
        // Carrier position alone is invisible to frequency-pooled
        // features, so species differ along translation-invariant axes
        // instead: bandwidth (narrow whistle against wide buzz), burst
        // length with its duty cycle, and burst rhythm (even spacing
        // against tight pairs split by a long rest). Burst count stays
        // fixed within each group because a receptive field shorter
        // than the full call cannot resolve it. Background slots shadow
        // both textures and both burst lengths at modulation rates away
        // from every scored cell, with their own burst counts, so each
        // scored shape family has an unlabeled lookalike.
        let scored = index < self.n_species;
        let buzzy = index % 2 == 1;
        let long_bursts = (index / 2) % 2 == 1;
        let paired = scored && (index / 4) % 2 == 1;
        let n_bursts = match (scored, long_bursts) {
            (true, _) => 4,
            (false, false) => 6,
            (false, true) => 5,
        };
        let mod_rate_hz = match (scored, buzzy) {
            (false, false) => 12.0,
            (false, true) => 70.0,
            (true, false) => 5.0,
            (true, true) => 40.0,
        };
        let (burst_seconds, even_gap_seconds) = match (scored, long_bursts) {
            (_, false) => (0.12, 0.30),
            (true, true) => (0.45, 0.10),
            (false, true) => (0.45, 0.05),
        };
        let (gap_seconds, pair_rest_seconds) = if paired {
            (0.08, if long_bursts { 0.40 } else { 0.62 })
        } else {
            (even_gap_seconds, 0.0)
        };
        let depth_frac = if buzzy { 0.22 } else { 0.01 };
        let headroom = 0.85 * (self.fmax - carrier_hz).min(carrier_hz - self.fmin);
        Motif {
            carrier_hz,
            burst_seconds,
            gap_seconds,
            pair_rest_seconds,
            n_bursts,
            mod_rate_hz,
            mod_depth_hz: (depth_frac * carrier_hz).min(headroom),
        }
    }
}

/// A species call: a fixed rhythm of frequency-modulated, Hann-shaped bursts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Motif {
    pub carrier_hz: f64,
    pub burst_seconds: f64,
    pub gap_seconds: f64,
    /// Extra rest added after every second burst; zero keeps the rhythm even.
    pub pair_rest_seconds: f64,
    pub n_bursts: usize,
    pub mod_rate_hz: f64,
    pub mod_depth_hz: f64,
}

impl Motif {
    #[must_use]
    pub fn duration_seconds(&self) -> f64 {
        let gaps = self.n_bursts.saturating_sub(1);
        self.n_bursts as f64 * self.burst_seconds
            + gaps as f64 * self.gap_seconds
            + (gaps / 2) as f64 * self.pair_rest_seconds
    }
}

/// Zipf-style long-tail counts: rank r (1-based) gets `head / r`, floored,
/// with a minimum of one recording so every species exists.
#[must_use]
pub fn zipf_counts(head: u64, n_species: usize) -> Vec<u64> {
    (1..=n_species as u64).map(|r| (head / r).max(1)).collect()
}

/// What `generate` wrote, for reporting.
#[derive(Debug)]
pub struct SynthSummary {
    /// Species table with per-class training counts filled in.
    pub table: SpeciesTable,
    pub n_train: usize,
    pub n_calibration: usize,
    pub n_evaluation: usize,
    pub out_dir: PathBuf,
}

/// Generates the dataset under `out`:
/// `species.csv`, `train/*.wav`, `train_metadata.csv`, `train_truth.csv`,
/// `calib/*.wav`, `calib_truth.csv`, `eval/*.wav`, `eval_truth.csv`, and
/// `class_counts.csv` (descending by count).
///
/// Each recording draws from its own seed stream derived from
/// `(seed, purpose, ordinal)`, so outputs are byte-stable regardless of
/// generation order.
pub fn generate(cfg: &SynthConfig, seed: u64, out: &Path) -> Result<SynthSummary, crate::Error> {
    cfg.validate()?;
    let io_err = |path: &Path| {
        let path = path.display().to_string();
        move |source: std::io::Error| DatasetError::Io {
            path: path.clone(),
            source,
        }
    };
    for sub in ["train", "calib", "eval"] {
        let dir = out.join(sub);
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    }

    let ids = cfg.species_ids();
    let table = SpeciesTable::new(ids.clone())?;
    table.write_csv(&out.join("species.csv"))?;
    let motifs = cfg.motifs();

    let mut counts = zipf_counts(cfg.zipf_head, cfg.n_species);
    counts.extend(zipf_counts(cfg.background_head, cfg.n_background_species));

    // Train clips: noise bed, primary motif in two segments (one if the clip
    // is a single segment), optional secondary species in one segment.
    let seg_samples = cfg.segment_samples();
    let clip_samples = (cfg.train_clip_seconds * f64::from(cfg.sample_rate)).round() as usize;
    let n_segments = clip_samples / seg_samples;
    let mut metadata = String::from("filename,labels,rating\n");
    let mut train_truth = Vec::new();
    let mut ordinal = 0u64;
    let mut n_train = 0usize;
    for (species, &count) in counts.iter().enumerate() {
        for rep in 0..count {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, SEED_STREAM_TRAIN, ordinal));
            ordinal += 1;
            let mut samples = noise_bed(clip_samples, cfg.noise_level, &mut rng);
            let rating = RATING_CHOICES[rng.random_range(0..RATING_CHOICES.len())];

            let primary_segments = pick_segments(n_segments, 2.min(n_segments), &mut rng);
            let mut labels = vec![species];
            let mut by_segment: Vec<Vec<usize>> = vec![Vec::new(); n_segments];
            for &seg in &primary_segments {
                by_segment[seg].push(species);
            }
            if cfg.total_species() > 1 && rng.random::<f64>() < cfg.secondary_probability {
                let mut other = rng.random_range(0..cfg.total_species() - 1);
                if other >= species {
                    other += 1;
                }
                labels.push(other);
                by_segment[rng.random_range(0..n_segments)].push(other);
            }
            let mut segment_species: Vec<BTreeSet<usize>> =
                vec![BTreeSet::new(); n_segments];
            for (seg, list) in by_segment.iter().enumerate() {
                if list.is_empty() {
                    continue;
                }
                place_segment(
                    &mut samples,
                    cfg,
                    &motifs,
                    list,
                    seg * seg_samples,
                    seg_samples,
                    &mut rng,
                );
                segment_species[seg].extend(list.iter().copied());
            }

            let stem = format!("{}_{rep:03}", table.id(species));
            let path = out.join("train").join(format!("{stem}.wav"));
            audio::write_wav_pcm16(&path, &AudioClip::new(samples, cfg.sample_rate))?;
            let label_ids: Vec<&str> = labels.iter().map(|&l| table.id(l)).collect();
            metadata.push_str(&format!(
                "train/{stem}.wav,{},{rating}\n",
                label_ids.join(" ")
            ));
            for (seg, present) in segment_species.iter().enumerate() {
                train_truth.push(SegmentLabels {
                    recording: stem.clone(),
                    segment_index: seg,
                    labels: species_label_set(present, &table),
                });
            }
            n_train += 1;
        }
    }
    let metadata_path = out.join("train_metadata.csv");
    fs::write(&metadata_path, metadata).map_err(io_err(&metadata_path))?;
    write_truth_csv(&out.join("train_truth.csv"), &train_truth)?;

    // Soundscapes. Both truth files use the scored view, mirroring field
    // annotations that only mark the species of interest: segments holding
    // nothing but background species become nocall.
    let mut calib_truth = Vec::new();
    for i in 0..cfg.n_calibration {
        let mut rng =
            ChaCha8Rng::seed_from_u64(derive_seed(seed, SEED_STREAM_CALIBRATION, i as u64));
        let name = format!("cal{i:02}");
        let (samples, segments) = render_soundscape(cfg, &motifs, &mut rng);
        audio::write_wav_pcm16(
            &out.join("calib").join(format!("{name}.wav")),
            &AudioClip::new(samples, cfg.sample_rate),
        )?;
        for (seg, present) in segments.iter().enumerate() {
            calib_truth.push(SegmentLabels {
                recording: name.clone(),
                segment_index: seg,
                labels: scored_label_set(present, &table),
            });
        }
    }
    write_truth_csv(&out.join("calib_truth.csv"), &calib_truth)?;

    let mut eval_truth = Vec::new();
    for i in 0..cfg.n_evaluation {
        let mut rng =
            ChaCha8Rng::seed_from_u64(derive_seed(seed, SEED_STREAM_EVALUATION, i as u64));
        let name = format!("eva{i:02}");
        let (samples, segments) = render_soundscape(cfg, &motifs, &mut rng);
        audio::write_wav_pcm16(
            &out.join("eval").join(format!("{name}.wav")),
            &AudioClip::new(samples, cfg.sample_rate),
        )?;
        for (seg, present) in segments.iter().enumerate() {
            eval_truth.push(SegmentLabels {
                recording: name.clone(),
                segment_index: seg,
                labels: scored_label_set(present, &table),
            });
        }
    }
    write_truth_csv(&out.join("eval_truth.csv"), &eval_truth)?;

    // Per-class training counts, descending, ties broken by id.
    let mut counted: Vec<(String, u64)> = table
        .entries()
        .iter()
        .zip(&counts)
        .map(|(e, &c)| (e.id.clone(), c))
        .collect();
    counted.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let mut counts_csv = String::from("species,count\n");
    for (id, c) in &counted {
        counts_csv.push_str(&format!("{id},{c}\n"));
    }
    let counts_path = out.join("class_counts.csv");
    fs::write(&counts_path, counts_csv).map_err(io_err(&counts_path))?;

    // The summary table mirrors class_counts.csv: a recording counts toward
    // its primary species only, secondary labels do not inflate the tally.
    let mut table = table;
    for (entry, &count) in table.entries.iter_mut().zip(&counts) {
        entry.count = count;
    }
    Ok(SynthSummary {
        table,
        n_train,
        n_calibration: cfg.n_calibration,
        n_evaluation: cfg.n_evaluation,
        out_dir: out.to_path_buf(),
    })
}

/// Reads a `species,count` table as written to `class_counts.csv`.
pub fn read_class_counts(path: &Path) -> Result<Vec<(String, u64)>, DatasetError> {
    let display = path.display().to_string();
    let mut reader = super::open_csv(path, "species,count")?;
    let mut out = Vec::new();
    for record in reader.records() {
        let (record, line) = super::unwrap_record(record, &display)?;
        if record.len() != 2 {
            return Err(DatasetError::MalformedRow {
                path: display,
                line,
                reason: format!("expected 2 fields, found {}", record.len()),
            });
        }
        let count: u64 = record[1].trim().parse().map_err(|_| DatasetError::MalformedRow {
            path: display.clone(),
            line,
            reason: format!("unparseable count {:?}", &record[1]),
        })?;
        out.push((record[0].to_string(), count));
    }
    if out.is_empty() {
        return Err(DatasetError::EmptyFile { path: display });
    }
    Ok(out)
}

fn species_label_set(present: &BTreeSet<usize>, table: &SpeciesTable) -> BTreeSet<String> {
    if present.is_empty() {
        return std::iter::once("nocall".to_string()).collect();
    }
    present.iter().map(|&s| table.id(s).to_string()).collect()
}

/// The scored view of a segment: background species drop out, and a segment
/// with nothing left is nocall.
fn scored_label_set(present: &BTreeSet<usize>, table: &SpeciesTable) -> BTreeSet<String> {
    let scored: BTreeSet<usize> = present
        .iter()
        .copied()
        .filter(|&s| table.entries()[s].scored)
        .collect();
    species_label_set(&scored, table)
}

fn noise_bed(len: usize, level: f64, rng: &mut ChaCha8Rng) -> Vec<f32> {
    (0..len)
        .map(|_| (rng.random_range(-1.0..1.0) * level) as f32)
        .collect()
}

/// Draws `k` distinct segment indices, ascending.
fn pick_segments(n: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut indices: Vec<usize> = (0..n).collect();
    for i in 0..k {
        let j = rng.random_range(i..n);
        indices.swap(i, j);
    }
    let mut picked = indices[..k].to_vec();
    picked.sort_unstable();
    picked
}

/// Renders one motif call at a random offset inside the segment starting at
/// `seg_start`. Bursts add on top of whatever is already in the buffer.
fn place_call(
    samples: &mut [f32],
    cfg: &SynthConfig,
    motif: &Motif,
    seg_start: usize,
    seg_samples: usize,
    rng: &mut ChaCha8Rng,
) {
    let sr = f64::from(cfg.sample_rate);
    let call_samples = (motif.duration_seconds() * sr).ceil() as usize;
    let slack = seg_samples.saturating_sub(call_samples);
    let offset = if slack == 0 {
        0
    } else {
        rng.random_range(0..slack)
    };
    render_motif(samples, cfg, motif, seg_start + offset);
}

/// Renders every call of one segment, at disjoint offsets when they all fit.
/// Disjoint placement keeps each labeled call audible instead of letting a
/// louder overlapping call bury it; when the calls cannot fit side by side
/// they fall back to independent placement.
fn place_segment(
    samples: &mut [f32],
    cfg: &SynthConfig,
    motifs: &[Motif],
    species: &[usize],
    seg_start: usize,
    seg_samples: usize,
    rng: &mut ChaCha8Rng,
) {
    let sr = f64::from(cfg.sample_rate);
    let durations: Vec<usize> = species
        .iter()
        .map(|&s| (motifs[s].duration_seconds() * sr).ceil() as usize)
        .collect();
    let total: usize = durations.iter().sum();
    if species.len() > 1 && total <= seg_samples {
        // Sorted uniform cuts spread the calls over the free time in order.
        let slack = seg_samples - total;
        let mut cuts: Vec<usize> = species
            .iter()
            .map(|_| rng.random_range(0..=slack))
            .collect();
        cuts.sort_unstable();
        let mut consumed = 0usize;
        for ((&sp, &d), &cut) in species.iter().zip(&durations).zip(&cuts) {
            render_motif(samples, cfg, &motifs[sp], seg_start + cut + consumed);
            consumed += d;
        }
    } else {
        for &sp in species {
            place_call(samples, cfg, &motifs[sp], seg_start, seg_samples, rng);
        }
    }
}

/// Renders one motif starting at `start`. Bursts add on top of whatever is
/// already in the buffer and clip at the buffer end.
fn render_motif(samples: &mut [f32], cfg: &SynthConfig, motif: &Motif, start: usize) {
    let sr = f64::from(cfg.sample_rate);
    let burst_samples = (motif.burst_seconds * sr).round() as usize;
    let period = ((motif.burst_seconds + motif.gap_seconds) * sr).round() as usize;
    let pair_rest = (motif.pair_rest_seconds * sr).round() as usize;
    for b in 0..motif.n_bursts {
        let t0 = start + b * period + (b / 2) * pair_rest;
        for i in 0..burst_samples {
            let idx = t0 + i;
            if idx >= samples.len() {
                break;
            }
            let u = (i as f64 + 0.5) / burst_samples as f64;
            let env = (PI * u).sin().powi(2);
            let t = i as f64 / sr;
            let phase = 2.0 * PI * motif.carrier_hz * t
                - (motif.mod_depth_hz / motif.mod_rate_hz)
                    * (2.0 * PI * motif.mod_rate_hz * t).cos();
            samples[idx] += (cfg.motif_gain * env * phase.sin()) as f32;
        }
    }
}

/// Renders one soundscape and returns its samples plus per-segment species.
///
/// Per segment, in draw order: an occupancy roll (10% empty, 30% background
/// only, otherwise scored), then the species draws, then placement jitter.
/// Scored primaries come from a bag holding one copy of each scored species,
/// reshuffled when empty, so coverage stays balanced across segments. Most
/// callless segments carry a background call rather than bare noise, so
/// detectors that fire on generic call energy pay for it on the unlabeled
/// class.
fn render_soundscape(
    cfg: &SynthConfig,
    motifs: &[Motif],
    rng: &mut ChaCha8Rng,
) -> (Vec<f32>, Vec<BTreeSet<usize>>) {
    let seg_samples = cfg.segment_samples();
    let total = (cfg.soundscape_seconds * f64::from(cfg.sample_rate)).round() as usize;
    let n_segments = total / seg_samples;
    let mut samples = noise_bed(total, cfg.noise_level, rng);
    let mut segments = vec![BTreeSet::new(); n_segments];
    let mut bag: Vec<usize> = Vec::new();

    for (seg, labels) in segments.iter_mut().enumerate() {
        let roll: f64 = rng.random();
        let mut present: Vec<usize> = Vec::new();
        if roll < 0.10 {
            // nocall segment
        } else if roll < 0.40 && cfg.n_background_species > 0 {
            present.push(cfg.n_species + rng.random_range(0..cfg.n_background_species));
        } else {
            if bag.is_empty() {
                bag = (0..cfg.n_species).collect();
                bag.shuffle(rng);
            }
            let primary = bag.pop().expect("bag refilled above");
            present.push(primary);
            if cfg.n_species > 1 && rng.random::<f64>() < 0.3 {
                let mut other = rng.random_range(0..cfg.n_species - 1);
                if other >= primary {
                    other += 1;
                }
                present.push(other);
            }
        }
        place_segment(
            &mut samples,
            cfg,
            motifs,
            &present,
            seg * seg_samples,
            seg_samples,
            rng,
        );
        labels.extend(present.iter().copied());
    }
    (samples, segments)
}
