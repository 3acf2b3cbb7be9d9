//! Acceptance checks for the whole pipeline.
//!
//! Each test covers one release gate and prints a single `criterion NN:
//! PASS` or `FAIL` line, so a full run reads as a checklist. The expensive
//! end-to-end run (synthetic corpus, two full training runs, inference,
//! calibration, evaluation) happens once and is shared by the criteria that
//! inspect it.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::panic::{catch_unwind, resume_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::OnceLock;
use std::time::Instant;

use birdsed::audio::{load_wav, resample, segment_clip, AudioClip};
use birdsed::calibrate::{fit_class_thresholds, penalize, PredictionTable};
use birdsed::dataset::synth::{generate, SynthConfig};
use birdsed::dataset::{parse_metadata, read_truth_csv, truth_label_map, BatchConfig};
use birdsed::dsp::{mel_filterbank, melspectrogram, stft_power, MelEngine, SpectrogramParams};
use birdsed::metrics::{binarized_auc, confusion_counts, mann_whitney_auc, LabelMap};
use birdsed::model::check::{finite_difference, max_relative_error};
use birdsed::model::{
    backward, clip_predictions, forward, route_clip_gradient, stack_spectrograms, Mode,
    ModelConfig, Tensor, Weights,
};
use birdsed::train::{train, weighted_clip_loss, LossConfig, OptimizerConfig, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Runs `body`, prints the verdict line for criterion `n`, and re-raises
/// any panic so the harness still records the failure.
fn report<T>(n: usize, what: &str, body: impl FnOnce() -> T) -> T {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(value) => {
            println!("criterion {n:02}: PASS ({what})");
            value
        }
        Err(cause) => {
            println!("criterion {n:02}: FAIL ({what})");
            resume_unwind(cause);
        }
    }
}

fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// ---------------------------------------------------------------------------
// Criterion 1: analytic gradients of the full network and the composed
// training loss match central finite differences.
// ---------------------------------------------------------------------------

#[test]
fn criterion_01_training_gradients_match_finite_differences() {
    report(1, "loss gradients match finite differences", || {
        let started = Instant::now();
        let config = ModelConfig {
            blocks: vec![3, 4],
            n_classes: 2,
            attention_temperature: 1.0,
            dropout_rate: 0.0,
        };
        let targets: [Vec<f32>; 2] = [vec![1.0, 0.0], vec![0.0, 1.0]];
        let ratings = [5.0f32, 0.0];

        for seed in [101u64, 202, 303, 404, 505] {
            for gamma in [0.0f64, 2.0] {
                let loss_cfg = LossConfig {
                    focal_gamma: gamma,
                    smoothing: 0.01,
                    rating_weighting: true,
                    unrated_weight: 0.5,
                };
                let weights =
                    Weights::<f64>::init(&config, &mut seeded(seed)).expect("init weights");
                let mut rng = seeded(seed ^ 0xABCD);
                let data: Vec<f64> =
                    (0..2 * 9 * 11).map(|_| rng.random_range(-1.0..1.0)).collect();
                let input = Tensor::from_vec(&[2, 1, 9, 11], data).expect("input tensor");

                // One clip per chunk row, so routing is the identity map and
                // the composed loss is the sum of both weighted clip losses.
                let total_loss = |w: &Weights<f64>| -> f64 {
                    let (out, _) = forward(w, &input, Mode::Train, None).expect("forward");
                    let (preds, _) = clip_predictions(&out.clipwise, 1).expect("clip preds");
                    let mut loss = 0.0;
                    for item in 0..2 {
                        let row = &preds.data()[item * 2..(item + 1) * 2];
                        let (l, _) = weighted_clip_loss(row, &targets[item], ratings[item], &loss_cfg)
                            .expect("clip loss");
                        loss += l;
                    }
                    loss
                };

                let (out, cache) = forward(&weights, &input, Mode::Train, None).expect("forward");
                let (preds, winners) = clip_predictions(&out.clipwise, 1).expect("clip preds");
                let mut d_items = Tensor::zeros(&[2, 2]);
                for item in 0..2 {
                    let row = &preds.data()[item * 2..(item + 1) * 2];
                    let (_, grad) =
                        weighted_clip_loss(row, &targets[item], ratings[item], &loss_cfg)
                            .expect("clip loss");
                    d_items.data_mut()[item * 2..(item + 1) * 2].copy_from_slice(&grad);
                }
                let d_clipwise =
                    route_clip_gradient(&d_items, &winners, 2).expect("route gradient");
                let grads = backward(&weights, &out, &cache, &d_clipwise).expect("backward");

                let names = weights.trainable_names();
                for ti in 0..weights.trainable().len() {
                    let base = weights.trainable()[ti].data().to_vec();
                    let shape = weights.trainable()[ti].shape().to_vec();
                    let analytic = grads.trainable()[ti].data().to_vec();
                    let numeric = finite_difference(&base, 1e-5, |perturbed| {
                        let mut w2 = weights.clone();
                        *w2.trainable_mut()[ti] =
                            Tensor::from_vec(&shape, perturbed.to_vec()).expect("tensor");
                        total_loss(&w2)
                    });
                    let err = max_relative_error(&analytic, &numeric, 1e-6);
                    assert!(
                        err < 1e-4,
                        "seed {seed} gamma {gamma} tensor {}: relative error {err}",
                        names[ti]
                    );
                }
            }
        }
        let elapsed = started.elapsed();
        assert!(elapsed.as_secs() < 60, "gradient check took {elapsed:?}");
    });
}

// ---------------------------------------------------------------------------
// Criterion 2: the spectrogram frontend conserves windowed frame energy,
// places a pure tone in the nearest mel band, and produces the documented
// shape for a five second clip.
// ---------------------------------------------------------------------------

#[test]
fn criterion_02_frontend_energy_tone_and_shape() {
    report(2, "frontend energy, tone placement, and shape", || {
        let started = Instant::now();
        let params = SpectrogramParams::default();
        let n = params.n_fft;
        let pad = n / 2;
        let frame_idx = 4;

        // Windowed energy of one STFT frame equals the scaled bin sum for
        // white noise clips across twenty seeds.
        for seed in 0..20u64 {
            let mut rng = seeded(seed);
            let samples: Vec<f32> = (0..8192).map(|_| rng.random_range(-0.5..0.5)).collect();
            let clip = AudioClip::new(samples, params.sample_rate);
            let spec = stft_power::<f64>(&clip, &params).expect("stft");

            let start = frame_idx * params.hop_size;
            let mut energy = 0.0f64;
            for i in 0..n {
                let padded_pos = start + i;
                let sample = if padded_pos < pad {
                    f64::from(clip.samples[pad - padded_pos])
                } else {
                    f64::from(clip.samples[padded_pos - pad])
                };
                let w = 0.5 * (1.0 - (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos());
                energy += (sample * w) * (sample * w);
            }
            let row = &spec.values[frame_idx * spec.n_bins..(frame_idx + 1) * spec.n_bins];
            let mut bin_sum = row[0] + row[n / 2];
            for &v in &row[1..n / 2] {
                bin_sum += 2.0 * v;
            }
            let rhs = bin_sum / n as f64;
            assert!(
                (energy - rhs).abs() <= 1e-6 * energy.abs(),
                "seed {seed}: energy {energy} vs bin sum {rhs}"
            );
        }

        // A 1 kHz tone must peak in the mel band whose center bin is nearest
        // to 1 kHz.
        let hz_per_bin = f64::from(params.sample_rate) / n as f64;
        let tone: Vec<f32> = (0..32000)
            .map(|i| {
                let t = i as f64 / f64::from(params.sample_rate);
                (0.5 * (2.0 * std::f64::consts::PI * 1000.0 * t).sin()) as f32
            })
            .collect();
        let clip = AudioClip::new(tone, params.sample_rate);
        let spec = melspectrogram::<f64>(&clip, &params).expect("mel");
        let filterbank = mel_filterbank(&params).expect("filterbank");
        let centers = filterbank.center_bins();
        let expected_row = centers
            .iter()
            .enumerate()
            .min_by(|(_, &a), (_, &b)| {
                let da = (a as f64 * hz_per_bin - 1000.0).abs();
                let db = (b as f64 * hz_per_bin - 1000.0).abs();
                da.partial_cmp(&db).expect("finite distances")
            })
            .map(|(m, _)| m)
            .expect("nonempty filterbank");
        let mid = spec.n_frames / 2;
        let hot_row = (0..spec.n_mels())
            .max_by(|&a, &b| {
                spec.value(a, mid).partial_cmp(&spec.value(b, mid)).expect("finite values")
            })
            .expect("nonempty spectrogram");
        assert_eq!(hot_row, expected_row, "tone landed in the wrong mel band");

        // Shape contract for a five second clip at the default config.
        let mut rng = seeded(99);
        let five_s: Vec<f32> =
            (0..5 * params.sample_rate as usize).map(|_| rng.random_range(-0.1..0.1)).collect();
        let spec = melspectrogram::<f64>(&AudioClip::new(five_s, params.sample_rate), &params)
            .expect("mel");
        assert_eq!((spec.n_mels(), spec.n_frames), (128, 313));

        let elapsed = started.elapsed();
        assert!(elapsed.as_secs() < 30, "frontend checks took {elapsed:?}");
    });
}

// ---------------------------------------------------------------------------
// Criterion 3: frequency penalization reproduces the hand-worked examples
// and composes additively wherever the clamp stays inactive.
// ---------------------------------------------------------------------------

#[test]
fn criterion_03_penalization_examples_and_composition() {
    report(3, "penalization hand examples and composition", || {
        let keys = vec![("seg".to_string(), 0)];
        let species = vec!["a".to_string(), "b".to_string()];
        let table =
            PredictionTable::new(keys, species, vec![vec![0.9, 0.9]]).expect("prediction table");
        let counts =
            BTreeMap::from([("a".to_string(), 3u64), ("b".to_string(), 1u64)]);

        // Factor 0.8 with counts 3:1 takes [0.9, 0.9] to [0.3, 0.7]. The
        // comparison mirrors the arithmetic shape, so it is exact to the bit.
        let out = penalize(&table, 0.8, &counts).expect("penalize");
        assert_eq!(out.rows()[0][0], (0.9f64 - 0.8 * 3.0 / 4.0).clamp(0.0, 1.0));
        assert_eq!(out.rows()[0][1], (0.9f64 - 0.8 * 1.0 / 4.0).clamp(0.0, 1.0));
        assert!((out.rows()[0][0] - 0.3).abs() < 1e-15);
        assert!((out.rows()[0][1] - 0.7).abs() < 1e-15);

        // Factor 0 is the identity.
        let same = penalize(&table, 0.0, &counts).expect("penalize");
        assert_eq!(same.rows(), table.rows());

        // Heavy penalization clamps at zero instead of going negative.
        let clamped = penalize(&table, 2.0, &counts).expect("penalize");
        assert_eq!(clamped.rows()[0][0], 0.0);

        // Composition: factor f then g equals factor f + g on fifty random
        // instances built from dyadic values, where every intermediate is
        // exactly representable and the clamp cannot activate.
        for seed in 0..50u64 {
            let mut rng = seeded(seed);
            let n_species = rng.random_range(2..=4usize);
            let n_rows = rng.random_range(1..=3usize);
            let mut counts_raw: Vec<u64> =
                (0..n_species - 1).map(|_| rng.random_range(1..=8u64)).collect();
            let partial: u64 = counts_raw.iter().sum();
            let target = (partial + 1).next_power_of_two();
            counts_raw.push(target - partial);

            let ids: Vec<String> = (0..n_species).map(|i| format!("sp{i:02}")).collect();
            let counts: BTreeMap<String, u64> =
                ids.iter().cloned().zip(counts_raw.iter().copied()).collect();
            let keys: Vec<(String, usize)> =
                (0..n_rows).map(|i| ("seg".to_string(), i)).collect();
            let rows: Vec<Vec<f64>> = (0..n_rows)
                .map(|_| {
                    (0..n_species)
                        .map(|_| f64::from(rng.random_range(512..=1024u32)) / 1024.0)
                        .collect()
                })
                .collect();
            let table = PredictionTable::new(keys, ids, rows).expect("prediction table");

            let f = f64::from(rng.random_range(0..16u32)) / 64.0;
            let g = f64::from(rng.random_range(0..16u32)) / 64.0;
            let twice = penalize(&penalize(&table, f, &counts).expect("first"), g, &counts)
                .expect("second");
            let once = penalize(&table, f + g, &counts).expect("combined");
            assert_eq!(twice.rows(), once.rows(), "seed {seed}: composition differs");
        }
    });
}

// ---------------------------------------------------------------------------
// Criterion 4: the fitted quantile threshold attains the same balanced
// accuracy as an exhaustive search over every distinct probability value.
// ---------------------------------------------------------------------------

#[test]
fn criterion_04_threshold_fit_matches_exhaustive_search() {
    report(4, "threshold fit matches exhaustive search", || {
        let started = Instant::now();
        // Seventeen segments and the grid i/16: every quantile rank is an
        // integer, so the candidate set is exactly the set of order
        // statistics and both searches scan identical cut points.
        let n = 17usize;
        let grid: Vec<f64> = (0..=16).map(|i| f64::from(i) / 16.0).collect();
        let species = vec!["sp".to_string()];

        for seed in 0..50u64 {
            let mut rng = seeded(seed);
            let keys: Vec<(String, usize)> = (0..n).map(|i| ("r".to_string(), i)).collect();
            let probs: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
            let rows: Vec<Vec<f64>> = probs.iter().map(|&p| vec![p]).collect();
            let mut calls: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
            calls[0] = true;
            calls[1] = false;

            let truth: LabelMap = keys
                .iter()
                .zip(&calls)
                .map(|(key, &call)| {
                    let label = if call { "sp" } else { "nocall" };
                    (key.clone(), BTreeSet::from([label.to_string()]))
                })
                .collect();
            let table =
                PredictionTable::new(keys, species.clone(), rows).expect("prediction table");

            let fitted = fit_class_thresholds(&table, &truth, &grid, &species).expect("fit");
            let fitted_score = fitted.rows[0].score;

            let mut distinct = probs.clone();
            distinct.sort_by(|a, b| a.partial_cmp(b).expect("finite probabilities"));
            distinct.dedup();
            let exhaustive = distinct
                .iter()
                .map(|&cut| {
                    let decisions: Vec<bool> = probs.iter().map(|&p| p >= cut).collect();
                    binarized_auc(&decisions, &calls).expect("balanced accuracy")
                })
                .fold(f64::NEG_INFINITY, f64::max);

            assert_eq!(
                fitted_score, exhaustive,
                "seed {seed}: fitted {fitted_score} vs exhaustive {exhaustive}"
            );
        }
        let elapsed = started.elapsed();
        assert!(elapsed.as_secs() < 30, "threshold search took {elapsed:?}");
    });
}

// ---------------------------------------------------------------------------
// Criterion 5: ranked AUC equals quadratic pair counting and the F1 family
// equals brute-force confusion arithmetic, both exactly.
// ---------------------------------------------------------------------------

#[test]
fn criterion_05_metrics_match_brute_force_oracles() {
    report(5, "metrics match brute-force oracles", || {
        // AUC versus pair counting, with tied scores forced onto a lattice.
        for seed in 0..100u64 {
            let mut rng = seeded(seed);
            let n = rng.random_range(5..=40usize);
            let scores: Vec<f64> = (0..n)
                .map(|_| {
                    if rng.random_bool(0.5) {
                        f64::from(rng.random_range(0..=8u32)) / 8.0
                    } else {
                        rng.random::<f64>()
                    }
                })
                .collect();
            let mut labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
            labels[0] = true;
            labels[1] = false;

            let mut wins = 0u64;
            let mut ties = 0u64;
            let mut n_pos = 0u64;
            let mut n_neg = 0u64;
            for (i, &li) in labels.iter().enumerate() {
                if !li {
                    continue;
                }
                n_pos += 1;
                for (j, &lj) in labels.iter().enumerate() {
                    if lj {
                        continue;
                    }
                    if scores[i] > scores[j] {
                        wins += 1;
                    } else if scores[i] == scores[j] {
                        ties += 1;
                    }
                    if i == 0 {
                        n_neg += 1;
                    }
                }
            }
            let oracle =
                (wins as f64 + ties as f64 / 2.0) / (n_pos as f64 * n_neg as f64);
            let auc = mann_whitney_auc(&scores, &labels).expect("auc");
            assert_eq!(auc, oracle, "seed {seed}: auc {auc} vs pairs {oracle}");
        }

        // Micro and macro F1 versus independent confusion arithmetic.
        let classes = ["sp01", "sp02", "sp03", "nocall"];
        for seed in 0..100u64 {
            let mut rng = seeded(1000 + seed);
            let n_segments = rng.random_range(3..=10usize);
            let mut decisions: LabelMap = BTreeMap::new();
            let mut truth: LabelMap = BTreeMap::new();
            for s in 0..n_segments {
                let key = ("rec".to_string(), s);
                let draw = |rng: &mut ChaCha8Rng| -> BTreeSet<String> {
                    let mut set: BTreeSet<String> = classes
                        .iter()
                        .filter(|_| rng.random_bool(0.4))
                        .map(|c| c.to_string())
                        .collect();
                    if set.is_empty() {
                        set.insert("nocall".to_string());
                    }
                    set
                };
                decisions.insert(key.clone(), draw(&mut rng));
                truth.insert(key, draw(&mut rng));
            }

            let counts = confusion_counts(&decisions, &truth).expect("confusion counts");

            // Oracle recount: per class, hits and false alarms from the
            // decision side, misses from the truth side.
            let mut oracle: BTreeMap<String, (u64, u64, u64)> = BTreeMap::new();
            for (key, predicted) in &decisions {
                let actual = &truth[key];
                for class in predicted {
                    let e = oracle.entry(class.clone()).or_default();
                    if actual.contains(class) {
                        e.0 += 1;
                    } else {
                        e.1 += 1;
                    }
                }
                for class in actual {
                    if !predicted.contains(class) {
                        oracle.entry(class.clone()).or_default().2 += 1;
                    }
                }
            }
            assert_eq!(counts.len(), oracle.len(), "seed {seed}: class sets differ");
            let f1_of = |hits: u64, false_alarms: u64, misses: u64| -> f64 {
                let denom = 2 * hits + false_alarms + misses;
                if denom == 0 {
                    0.0
                } else {
                    2.0 * hits as f64 / denom as f64
                }
            };
            let mut pooled = (0u64, 0u64, 0u64);
            let mut macro_sum = 0.0f64;
            for (class, &(h, fa, mi)) in &oracle {
                let got = counts[class];
                assert_eq!(
                    (got.hits, got.false_alarms, got.misses),
                    (h, fa, mi),
                    "seed {seed} class {class}: counts differ"
                );
                pooled.0 += h;
                pooled.1 += fa;
                pooled.2 += mi;
                macro_sum += f1_of(h, fa, mi);
            }
            let micro_oracle = f1_of(pooled.0, pooled.1, pooled.2);
            let macro_oracle = macro_sum / oracle.len() as f64;
            assert_eq!(birdsed::metrics::micro_f1(&counts), micro_oracle, "seed {seed}");
            assert_eq!(birdsed::metrics::macro_f1(&counts), macro_oracle, "seed {seed}");
        }
    });
}

// ---------------------------------------------------------------------------
// Shared end-to-end pipeline run used by criteria 6, 9, and 10.
// ---------------------------------------------------------------------------

/// Pipeline config for the end-to-end run: 16 kHz audio keeps the DSP cost
/// down, the corpus is the default long-tailed layout with a widened
/// background roster so unlabeled calls shadow every scored shape family,
/// training clips run longer than the batch window so every epoch sees
/// fresh crops, and both augmentations stay off because the step budget is
/// sized for a single-core test machine.
const PIPELINE_CONFIG: &str = r#"
seed = 42

[spectrogram]
sample_rate = 16000
n_fft = 1024
hop_size = 512
n_mels = 64
fmin = 50.0
fmax = 7500.0

[batch]
batch_size = 16
window_seconds = 15.0
chunk_seconds = 5.0
n_chunks = 3

[model]
blocks = [8, 16]
attention_temperature = 1.0
dropout_rate = 0.1

[mixup]
enabled = false

[spec_augment]
enabled = false

[loss]
smoothing = 0.05

[optimizer]
lr_max = 0.006

[train]
epochs = 60
steps_per_epoch = 50
val_fraction = 0.15

[synth]
sample_rate = 16000
n_background_species = 4
background_head = 6
n_calibration = 24
n_evaluation = 12
fmax = 7000.0
"#;

struct Pipeline {
    micro_fitted: f64,
    macro_fitted: f64,
    macro_global: f64,
    infer_stdout: String,
    train_seconds: f64,
    files_compared: usize,
    mismatches: Vec<String>,
}

static PIPELINE: OnceLock<Result<Pipeline, String>> = OnceLock::new();

fn pipeline() -> &'static Pipeline {
    let result = PIPELINE.get_or_init(|| {
        catch_unwind(AssertUnwindSafe(build_pipeline)).map_err(|cause| {
            cause
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| cause.downcast_ref::<&str>().map(|s| (*s).to_string()))
                .unwrap_or_else(|| "pipeline run panicked".to_string())
        })
    });
    match result {
        Ok(p) => p,
        Err(message) => panic!("shared pipeline run failed: {message}"),
    }
}

fn run_cli(args: &[&str]) -> String {
    let output = Command::new(env!("CARGO_BIN_EXE_birdsed"))
        .args(args)
        .output()
        .expect("spawn the pipeline binary");
    assert!(
        output.status.success(),
        "birdsed {:?} exited with {:?}\nstdout:\n{}stderr:\n{}",
        args,
        output.status.code(),
        String::from_utf8_lossy(&output.stdout),
        String::from_utf8_lossy(&output.stderr),
    );
    String::from_utf8(output.stdout).expect("utf-8 stdout")
}

/// Every file under `root`, keyed by relative path.
fn tree_bytes(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).expect("read dir") {
            let path = entry.expect("dir entry").path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).expect("under root").to_string_lossy().into_owned();
                out.insert(rel, fs::read(&path).expect("read file"));
            }
        }
    }
    out
}

fn tree_mismatches(a: &BTreeMap<String, Vec<u8>>, b: &BTreeMap<String, Vec<u8>>) -> Vec<String> {
    let mut out = Vec::new();
    for key in a.keys() {
        if !b.contains_key(key) {
            out.push(format!("{key} missing from second run"));
        }
    }
    for key in b.keys() {
        if !a.contains_key(key) {
            out.push(format!("{key} missing from first run"));
        }
    }
    for (key, bytes) in a {
        if b.get(key).is_some_and(|other| other != bytes) {
            out.push(format!("{key} differs between runs"));
        }
    }
    out
}

/// The `micro` and `macro` summary rows of an evaluation report.
fn read_summary(path: &Path) -> (f64, f64) {
    let text = fs::read_to_string(path).expect("read evaluation report");
    let field = |prefix: &str| -> f64 {
        text.lines()
            .find(|l| l.starts_with(prefix))
            .and_then(|l| l.rsplit(',').next())
            .and_then(|v| v.parse().ok())
            .unwrap_or_else(|| panic!("no {prefix} row in {}", path.display()))
    };
    (field("micro,"), field("macro,"))
}

/// Runs every command of the pipeline once. All outputs land under `root`;
/// the corpus is read from `corpus`, which lets two runs share inputs.
fn run_pipeline_once(config: &str, corpus: &Path, root: &Path) -> (f64, String) {
    let path = |tail: &str| root.join(tail).to_string_lossy().into_owned();
    let input = |tail: &str| corpus.join(tail).to_string_lossy().into_owned();

    let started = Instant::now();
    run_cli(&[
        "--config", config, "--seed", "42", "--out", &path("model"),
        "train", "--metadata", &input("train_metadata.csv"), "--species", &input("species.csv"),
    ]);
    let train_seconds = started.elapsed().as_secs_f64();

    let weights = path("model/model.sedw");
    let infer_stdout = run_cli(&[
        "--out", &path("infer_eval"),
        "infer", "--weights", &weights, "--audio", &input("eval"),
    ]);
    run_cli(&[
        "--out", &path("infer_calib"),
        "infer", "--weights", &weights, "--audio", &input("calib"),
    ]);
    run_cli(&[
        "--config", config, "--out", &path("thresholds"),
        "calibrate", "--predictions", &path("infer_calib/predictions.csv"),
        "--truth", &input("calib_truth.csv"), "--species", &input("species.csv"),
    ]);
    run_cli(&[
        "--out", &path("decisions_fitted"),
        "calibrate", "--predictions", &path("infer_eval/predictions.csv"),
        "--apply", &path("thresholds/thresholds.csv"),
    ]);
    run_cli(&[
        "--out", &path("decisions_global"),
        "calibrate", "--predictions", &path("infer_eval/predictions.csv"),
        "--species", &input("species.csv"), "--global-threshold", "0.5",
    ]);
    run_cli(&[
        "--out", &path("penalized"),
        "calibrate", "--predictions", &path("infer_eval/predictions.csv"),
        "--penalize", "0.8", "--counts", &input("class_counts.csv"),
    ]);
    run_cli(&[
        "--out", &path("eval_fitted"),
        "evaluate", "--decisions", &path("decisions_fitted/decisions.csv"),
        "--truth", &input("eval_truth.csv"),
    ]);
    run_cli(&[
        "--out", &path("eval_global"),
        "evaluate", "--decisions", &path("decisions_global/decisions.csv"),
        "--truth", &input("eval_truth.csv"),
    ]);
    run_cli(&[
        "--config", config, "--out", &path("tensors"),
        "preprocess", "--audio", &input("calib"),
    ]);
    run_cli(&[
        "--out", &path("gradcam"),
        "gradcam", "--weights", &weights, "--audio", &input("eval/eva00.wav"),
        "--species", "sp01",
    ]);
    (train_seconds, infer_stdout)
}

fn build_pipeline() -> Pipeline {
    let root = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    let _ = fs::remove_dir_all(&root);
    fs::create_dir_all(&root).expect("create acceptance dir");
    let config_path = root.join("config.toml");
    fs::write(&config_path, PIPELINE_CONFIG).expect("write config");
    let config = config_path.to_string_lossy().into_owned();

    // The corpus generator must be byte-deterministic on its own; its files
    // reference audio by relative path, so two output roots are comparable.
    let corpus_a = root.join("corpus_a");
    let corpus_b = root.join("corpus_b");
    run_cli(&["--config", &config, "--seed", "42", "--out", corpus_a.to_str().expect("utf-8"), "synth"]);
    run_cli(&["--config", &config, "--seed", "42", "--out", corpus_b.to_str().expect("utf-8"), "synth"]);
    let corpus_bytes_a = tree_bytes(&corpus_a);
    let corpus_bytes_b = tree_bytes(&corpus_b);
    let mut mismatches = tree_mismatches(&corpus_bytes_a, &corpus_bytes_b);

    // Both downstream runs read corpus_a, so every derived file, reports
    // included, must come out byte-identical.
    let run_a = root.join("a");
    let run_b = root.join("b");
    let (train_seconds, infer_stdout) = run_pipeline_once(&config, &corpus_a, &run_a);
    let (_, _) = run_pipeline_once(&config, &corpus_a, &run_b);
    let bytes_a = tree_bytes(&run_a);
    let bytes_b = tree_bytes(&run_b);
    mismatches.extend(tree_mismatches(&bytes_a, &bytes_b));
    let files_compared = corpus_bytes_a.len() + bytes_a.len();

    let (micro_fitted, macro_fitted) = read_summary(&run_a.join("eval_fitted/evaluation.csv"));
    let (_, macro_global) = read_summary(&run_a.join("eval_global/evaluation.csv"));

    Pipeline {
        micro_fitted,
        macro_fitted,
        macro_global,
        infer_stdout,
        train_seconds,
        files_compared,
        mismatches,
    }
}

// ---------------------------------------------------------------------------
// Criterion 6: the full pipeline recovers the synthetic corpus with strong
// scores and class-wise thresholds beat a fixed global threshold.
// ---------------------------------------------------------------------------

#[test]
fn criterion_06_pipeline_recovers_the_synthetic_corpus() {
    report(6, "end-to-end scores on the synthetic corpus", || {
        let p = pipeline();
        assert!(
            p.train_seconds < 900.0,
            "training took {:.1} s, budget is 900 s",
            p.train_seconds
        );
        assert!(
            p.micro_fitted >= 0.90,
            "micro F1 {:.4} below the 0.90 bar",
            p.micro_fitted
        );
        assert!(
            p.macro_fitted >= 0.80,
            "macro F1 {:.4} below the 0.80 bar",
            p.macro_fitted
        );
        assert!(
            p.macro_fitted >= p.macro_global,
            "class-wise thresholds ({:.4}) lost to the global threshold ({:.4})",
            p.macro_fitted,
            p.macro_global
        );
    });
}

// ---------------------------------------------------------------------------
// Criterion 7: selective mixup improves mean recall on the rare half of the
// species list against an identical run without it.
// ---------------------------------------------------------------------------

#[test]
fn criterion_07_mixup_lifts_tail_recall() {
    report(7, "selective mixup lifts tail recall", || {
        let root = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("mixup_ablation");
        let _ = fs::remove_dir_all(&root);
        let spectrogram = SpectrogramParams {
            sample_rate: 16000,
            n_fft: 1024,
            hop_size: 512,
            n_mels: 64,
            fmin: 50.0,
            fmax: 7500.0,
            ..SpectrogramParams::default()
        };
        let synth = SynthConfig {
            sample_rate: 16000,
            n_species: 6,
            zipf_head: 24,
            n_background_species: 2,
            background_head: 4,
            train_clip_seconds: 10.0,
            segment_seconds: 5.0,
            n_calibration: 1,
            n_evaluation: 10,
            soundscape_seconds: 30.0,
            fmax: 7000.0,
            ..SynthConfig::default()
        };
        let summary = generate(&synth, 7, &root).expect("generate ablation corpus");
        let table = &summary.table;
        let recordings =
            parse_metadata(&root.join("train_metadata.csv"), table).expect("metadata");
        let truth = truth_label_map(
            &read_truth_csv(&root.join("eval_truth.csv")).expect("eval truth"),
        );

        // The tail is the rare half of the scored species by training count.
        let mut scored: Vec<(usize, u64)> = table
            .entries()
            .iter()
            .enumerate()
            .filter(|(_, e)| e.scored)
            .map(|(i, e)| (i, e.count))
            .collect();
        scored.sort_by_key(|&(_, count)| count);
        let tail: Vec<usize> = scored.iter().take(scored.len() / 2).map(|&(i, _)| i).collect();

        let engine = MelEngine::<f32>::new(spectrogram).expect("mel engine");
        let eval_wavs: Vec<PathBuf> = {
            let mut v: Vec<PathBuf> = fs::read_dir(root.join("eval"))
                .expect("eval dir")
                .map(|e| e.expect("entry").path())
                .collect();
            v.sort();
            v
        };

        let tail_recall = |weights: &Weights<f32>| -> f64 {
            let mut hits = 0usize;
            let mut total = 0usize;
            for wav in &eval_wavs {
                let clip = load_wav(wav).expect("load eval wav");
                let clip = resample(&clip, spectrogram.sample_rate).expect("resample");
                let segments = segment_clip(&clip, 5.0).expect("segment");
                let specs: Vec<_> = segments
                    .iter()
                    .map(|s| engine.mel_spectrogram(s).expect("mel"))
                    .collect();
                let input = stack_spectrograms(&specs).expect("stack");
                let (out, _) = forward(weights, &input, Mode::Eval, None).expect("forward");
                let k = table.len();
                let stem = wav.file_stem().expect("stem").to_string_lossy().into_owned();
                for (seg, _) in segments.iter().enumerate() {
                    let labels = &truth[&(stem.clone(), seg)];
                    for &class in &tail {
                        if labels.contains(table.id(class)) {
                            total += 1;
                            if out.clipwise.data()[seg * k + class] >= 0.5 {
                                hits += 1;
                            }
                        }
                    }
                }
            }
            assert!(total > 0, "no tail species in the evaluation truth");
            hits as f64 / total as f64
        };

        let train_once = |seed: u64, mixup: bool| -> f64 {
            let cfg = TrainConfig {
                model: ModelConfig {
                    blocks: vec![6, 12],
                    n_classes: table.len(),
                    attention_temperature: 1.0,
                    dropout_rate: 0.1,
                },
                batch: BatchConfig {
                    batch_size: 8,
                    window_seconds: 10.0,
                    chunk_seconds: 5.0,
                    n_chunks: 2,
                    spectrogram,
                    mixup: if mixup { BatchConfig::default().mixup } else { None },
                    ..BatchConfig::default()
                },
                loss: LossConfig::default(),
                optimizer: OptimizerConfig {
                    lr_max: 0.01,
                    ..Default::default()
                },
                epochs: 4,
                steps_per_epoch: 20,
                val_fraction: 0.15,
                seed,
            };
            let (weights, _) = train(&recordings, table, &cfg).expect("train");
            tail_recall(&weights)
        };

        let mut margins = Vec::new();
        for seed in [1u64, 2, 3] {
            let with = train_once(seed, true);
            let without = train_once(seed, false);
            println!("seed {seed}: tail recall with mixup {with:.4}, without {without:.4}");
            margins.push(with - without);
        }
        let mean = margins.iter().sum::<f64>() / margins.len() as f64;
        assert!(
            mean > 0.0,
            "mixup did not lift tail recall: margins {margins:?}, mean {mean:.4}"
        );
    });
}

// ---------------------------------------------------------------------------
// Criterion 8: attention pooling is a proper weighting of segment
// probabilities and chunk handling is order-invariant and repeatable.
// ---------------------------------------------------------------------------

#[test]
fn criterion_08_attention_pooling_identities_hold() {
    report(8, "attention pooling identities", || {
        let config = ModelConfig {
            blocks: vec![3, 4],
            n_classes: 3,
            attention_temperature: 1.0,
            dropout_rate: 0.0,
        };
        for net_seed in 0..10u64 {
            let weights =
                Weights::<f64>::init(&config, &mut seeded(net_seed)).expect("init weights");
            for input_seed in 0..10u64 {
                let mut rng = seeded(1000 + net_seed * 100 + input_seed);
                let data: Vec<f64> =
                    (0..4 * 16 * 21).map(|_| rng.random_range(-1.0..1.0)).collect();
                let input = Tensor::from_vec(&[4, 1, 16, 21], data.clone()).expect("input");

                let (out, _) = forward(&weights, &input, Mode::Eval, None).expect("forward");
                let shape = out.attention.shape().to_vec();
                let (n, k, t) = (shape[0], shape[1], shape[2]);
                for row in 0..n {
                    for class in 0..k {
                        let base = (row * k + class) * t;
                        let att = &out.attention.data()[base..base + t];
                        let seg = &out.segmentwise.data()[base..base + t];
                        let att_sum: f64 = att.iter().sum();
                        assert!(
                            (att_sum - 1.0).abs() < 1e-6,
                            "attention row sums to {att_sum}"
                        );
                        let pooled: f64 = att.iter().zip(seg).map(|(a, s)| a * s).sum();
                        let clip = out.clipwise.data()[row * k + class];
                        assert!(
                            (clip - pooled).abs() < 1e-6,
                            "clip probability {clip} vs pooled {pooled}"
                        );
                    }
                }

                // Swapping the chunks inside each two-chunk item must not
                // change the per-item predictions, bit for bit.
                let chunk = 16 * 21;
                let mut swapped = data.clone();
                for item in 0..2 {
                    let first = item * 2 * chunk;
                    let (a, b) = swapped[first..first + 2 * chunk].split_at_mut(chunk);
                    a.swap_with_slice(b);
                }
                let permuted =
                    Tensor::from_vec(&[4, 1, 16, 21], swapped).expect("permuted input");
                let (out_p, _) = forward(&weights, &permuted, Mode::Eval, None).expect("forward");
                let (preds, _) = clip_predictions(&out.clipwise, 2).expect("clip preds");
                let (preds_p, _) = clip_predictions(&out_p.clipwise, 2).expect("clip preds");
                assert_eq!(preds.data(), preds_p.data(), "chunk order changed predictions");

                // Evaluation is repeatable to the bit.
                let (again, _) = forward(&weights, &input, Mode::Eval, None).expect("forward");
                assert_eq!(out.clipwise.data(), again.clipwise.data());
            }
        }
    });
}

// ---------------------------------------------------------------------------
// Criterion 9: inference reports its per-chunk latency.
// ---------------------------------------------------------------------------

#[test]
fn criterion_09_inference_reports_latency() {
    report(9, "inference reports per-chunk latency", || {
        let p = pipeline();
        let latency: f64 = p
            .infer_stdout
            .lines()
            .find_map(|l| l.strip_prefix("per-chunk latency seconds: "))
            .expect("latency line in infer output")
            .trim()
            .parse()
            .expect("latency parses as a float");
        assert!(latency.is_finite() && latency > 0.0, "latency {latency}");
    });
}

// ---------------------------------------------------------------------------
// Criterion 10: two runs of every command produce byte-identical files.
// ---------------------------------------------------------------------------

#[test]
fn criterion_10_runs_are_byte_identical() {
    report(10, "repeated runs are byte-identical", || {
        let p = pipeline();
        assert!(p.files_compared > 0, "nothing was compared");
        assert!(
            p.mismatches.is_empty(),
            "{} of {} files differ between runs:\n{}",
            p.mismatches.len(),
            p.files_compared,
            p.mismatches.join("\n")
        );
    });
}
