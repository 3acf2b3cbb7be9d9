//! Ranking and set-retrieval metrics.
//!
//! The AUC here is the Mann-Whitney statistic computed from tie-averaged
//! ranks in O(n log n); ties contribute half credit, which the tests pin
//! against a quadratic pair-counting oracle. F1 comes in micro (pooled
//! counts) and macro (per-class mean) flavours over per-segment label sets,
//! where `nocall` is an ordinary class.

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("scores and labels differ in length: {scores} vs {labels}")]
    LengthMismatch { scores: usize, labels: usize },
    #[error("need both positive and negative labels (got {positives} positives, {negatives} negatives)")]
    DegenerateLabels { positives: usize, negatives: usize },
    #[error("non-finite score at index {index}")]
    NonFiniteScore { index: usize },
    #[error("no segments to score")]
    Empty,
    #[error("segment keys differ: {missing_in_decisions:?} absent from decisions, {missing_in_truth:?} absent from truth")]
    KeyMismatch {
        missing_in_decisions: Vec<String>,
        missing_in_truth: Vec<String>,
    },
}

/// (recording, segment index) identifying one scored segment.
pub type SegmentKey = (String, usize);

/// Per-segment label sets keyed by segment.
pub type LabelMap = BTreeMap<SegmentKey, BTreeSet<String>>;

/// Area under the ROC curve via the rank-sum statistic.
///
/// Tied scores receive averaged ranks, which is equivalent to counting tied
/// positive/negative pairs at half weight.
pub fn mann_whitney_auc(scores: &[f64], labels: &[bool]) -> Result<f64, MetricsError> {
    if scores.len() != labels.len() {
        return Err(MetricsError::LengthMismatch {
            scores: scores.len(),
            labels: labels.len(),
        });
    }
    if let Some(index) = scores.iter().position(|s| !s.is_finite()) {
        return Err(MetricsError::NonFiniteScore { index });
    }
    let positives = labels.iter().filter(|&&l| l).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(MetricsError::DegenerateLabels {
            positives,
            negatives,
        });
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());

    let mut rank_sum_pos = 0.0f64;
    let mut i = 0usize;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // 1-based ranks i+1 ..= j+1 share the average (i + j) / 2 + 1.
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            if labels[idx] {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }

    let p = positives as f64;
    let u = rank_sum_pos - p * (p + 1.0) / 2.0;
    Ok(u / (p * negatives as f64))
}

/// Balanced accuracy of a hard decision vector, `(TPR + TNR) / 2`.
///
/// Numerically identical to [`mann_whitney_auc`] on 0/1 scores.
pub fn binarized_auc(decisions: &[bool], truth: &[bool]) -> Result<f64, MetricsError> {
    if decisions.len() != truth.len() {
        return Err(MetricsError::LengthMismatch {
            scores: decisions.len(),
            labels: truth.len(),
        });
    }
    let positives = truth.iter().filter(|&&t| t).count();
    let negatives = truth.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(MetricsError::DegenerateLabels {
            positives,
            negatives,
        });
    }
    let mut hits = 0usize;
    let mut correct_rejections = 0usize;
    for (&d, &t) in decisions.iter().zip(truth) {
        if t && d {
            hits += 1;
        }
        if !t && !d {
            correct_rejections += 1;
        }
    }
    let tpr = hits as f64 / positives as f64;
    let tnr = correct_rejections as f64 / negatives as f64;
    Ok((tpr + tnr) / 2.0)
}

/// Per-class detection counts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub hits: u64,
    pub false_alarms: u64,
    pub misses: u64,
}

impl ConfusionCounts {
    #[must_use]
    pub fn precision(&self) -> f64 {
        let denom = self.hits + self.false_alarms;
        if denom == 0 {
            0.0
        } else {
            self.hits as f64 / denom as f64
        }
    }

    #[must_use]
    pub fn recall(&self) -> f64 {
        let denom = self.hits + self.misses;
        if denom == 0 {
            0.0
        } else {
            self.hits as f64 / denom as f64
        }
    }

    #[must_use]
    pub fn f1(&self) -> f64 {
        let denom = 2 * self.hits + self.false_alarms + self.misses;
        if denom == 0 {
            0.0
        } else {
            2.0 * self.hits as f64 / denom as f64
        }
    }
}

/// Tallies per-class hits/false alarms/misses over aligned segment maps.
/// Both maps must cover exactly the same segments; the error lists every
/// offending key. Classes never observed on either side do not appear.
pub fn confusion_counts(
    decisions: &LabelMap,
    truth: &LabelMap,
) -> Result<BTreeMap<String, ConfusionCounts>, MetricsError> {
    if decisions.is_empty() && truth.is_empty() {
        return Err(MetricsError::Empty);
    }
    let missing_in_decisions: Vec<String> = truth
        .keys()
        .filter(|k| !decisions.contains_key(*k))
        .map(|(r, s)| format!("{r}:{s}"))
        .collect();
    let missing_in_truth: Vec<String> = decisions
        .keys()
        .filter(|k| !truth.contains_key(*k))
        .map(|(r, s)| format!("{r}:{s}"))
        .collect();
    if !missing_in_decisions.is_empty() || !missing_in_truth.is_empty() {
        return Err(MetricsError::KeyMismatch {
            missing_in_decisions,
            missing_in_truth,
        });
    }

    let mut counts: BTreeMap<String, ConfusionCounts> = BTreeMap::new();
    for (key, predicted) in decisions {
        let actual = &truth[key];
        for class in predicted {
            let entry = counts.entry(class.clone()).or_default();
            if actual.contains(class) {
                entry.hits += 1;
            } else {
                entry.false_alarms += 1;
            }
        }
        for class in actual {
            if !predicted.contains(class) {
                counts.entry(class.clone()).or_default().misses += 1;
            }
        }
    }
    Ok(counts)
}

/// F1 over counts pooled across classes.
#[must_use]
pub fn micro_f1(counts: &BTreeMap<String, ConfusionCounts>) -> f64 {
    let mut total = ConfusionCounts::default();
    for c in counts.values() {
        total.hits += c.hits;
        total.false_alarms += c.false_alarms;
        total.misses += c.misses;
    }
    total.f1()
}

/// Mean of per-class F1. A class that was predicted or present but never
/// matched scores 0 and still drags the mean, which is the point of the
/// macro view for rare species.
#[must_use]
pub fn macro_f1(counts: &BTreeMap<String, ConfusionCounts>) -> f64 {
    if counts.is_empty() {
        return 0.0;
    }
    counts.values().map(ConfusionCounts::f1).sum::<f64>() / counts.len() as f64
}
