//! Dynamic-shift detection over final-layer hidden states.
//!
//! A session's hidden sequence is cut into `k` contiguous segments
//! (remainder rows go to the earliest segments), each segment is
//! mean-pooled into one representation vector, and consecutive
//! representations are scored by cosine distance. Scores pooled across
//! sessions are labeled and evaluated with rank-based ROC-AUC, F1 at a
//! fixed threshold, F1 at the Youden-optimal threshold, and TPR at a
//! capped false-positive rate.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::model::Architecture;
use crate::tensor::{cosine_distance, Tensor, TensorError};

/// Errors from segmentation, scoring, or evaluation.
#[derive(Debug, thiserror::Error)]
pub enum ShiftError {
    #[error("need at least {needed} rows/scores, got {got}")]
    TooShort { needed: usize, got: usize },
    #[error("metrics need both classes present in the labels")]
    SingleClass,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Where the binary labels for the pooled scores come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LabelSource {
    /// Scores above their own 75th percentile — replicates the published
    /// protocol, but is degenerate for ranking metrics (AUC = 1 by
    /// construction).
    SelfPercentile,
    /// Labels supplied in an external JSON file, one 0/1 per pooled score.
    File,
    /// Ground truth injected by the synthetic corpus generator.
    Synthetic,
}

impl fmt::Display for LabelSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LabelSource::SelfPercentile => "self-percentile",
            LabelSource::File => "file",
            LabelSource::Synthetic => "synthetic",
        })
    }
}

impl FromStr for LabelSource {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "self-percentile" => Ok(LabelSource::SelfPercentile),
            "file" => Ok(LabelSource::File),
            "synthetic" => Ok(LabelSource::Synthetic),
            other => Err(format!(
                "unknown label source {other:?} (expected self-percentile, file, or synthetic)"
            )),
        }
    }
}

// ===== Segmentation and scoring =====

/// Mean-pools an `N × d` hidden sequence into `k` contiguous segment
/// representations. Segment sizes differ by at most one; when `N % k = r`,
/// the first `r` segments take the extra row.
pub fn segment_representations(
    final_hidden: &Tensor,
    k: usize,
) -> Result<Vec<Vec<f64>>, ShiftError> {
    assert!(k >= 1, "segment count must be positive");
    let rows = final_hidden.rows();
    let cols = final_hidden.cols();
    if rows < k {
        return Err(ShiftError::TooShort {
            needed: k,
            got: rows,
        });
    }
    let base = rows / k;
    let remainder = rows % k;
    let mut out = Vec::with_capacity(k);
    let mut start = 0usize;
    for s in 0..k {
        let len = base + usize::from(s < remainder);
        let mut mean = vec![0.0; cols];
        for r in start..start + len {
            for (m, v) in mean.iter_mut().zip(final_hidden.row(r)) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= len as f64;
        }
        out.push(mean);
        start += len;
    }
    Ok(out)
}

/// Cosine distance between each consecutive pair of segment
/// representations: `k` segments yield `k − 1` scores in `[0, 2]`.
pub fn shift_scores(segments: &[Vec<f64>]) -> Result<Vec<f64>, ShiftError> {
    if segments.len() < 2 {
        return Err(ShiftError::TooShort {
            needed: 2,
            got: segments.len(),
        });
    }
    segments
        .windows(2)
        .map(|w| cosine_distance(&w[0], &w[1]).map_err(ShiftError::from))
        .collect()
}

// ===== Labeling =====

/// Percentile by linear interpolation between order statistics:
/// the value at fractional index `(len − 1) · p / 100` of the sorted data.
#[must_use]
pub fn percentile(values: &[f64], p: f64) -> f64 {
    assert!(!values.is_empty(), "percentile of an empty set");
    assert!((0.0..=100.0).contains(&p), "percentile must be in [0, 100]");
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let h = (sorted.len() - 1) as f64 * p / 100.0;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Marks each score 1 iff it strictly exceeds the given percentile of the
/// score set. All-equal scores therefore get all-zero labels.
#[must_use]
pub fn label_by_percentile(scores: &[f64], p: f64) -> Vec<u8> {
    let threshold = percentile(scores, p);
    scores
        .iter()
        .map(|&s| u8::from(s > threshold))
        .collect()
}

// ===== Ranking metrics =====

fn class_counts(labels: &[u8]) -> Result<(f64, f64), ShiftError> {
    let positives = labels.iter().filter(|&&l| l != 0).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(ShiftError::SingleClass);
    }
    Ok((positives as f64, negatives as f64))
}

/// Area under the ROC curve as the Mann–Whitney statistic: the probability
/// that a random positive outscores a random negative, ties counting ½.
/// Computed from mid-ranks, which equals the pairwise count exactly.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<f64, ShiftError> {
    assert_eq!(scores.len(), labels.len(), "one label per score");
    let (positives, negatives) = class_counts(labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // Mid-ranks are half-integers, so the running sum stays exact and the
    // result matches a brute-force pair count bit for bit.
    let mut positive_rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let average_rank = (i + 1 + j) as f64 / 2.0;
        let group_positives = order[i..j].iter().filter(|&&t| labels[t] != 0).count();
        positive_rank_sum += average_rank * group_positives as f64;
        i = j;
    }
    let wins = positive_rank_sum - positives * (positives + 1.0) / 2.0;
    Ok(wins / (positives * negatives))
}

/// One operating point of the ROC sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RocPoint {
    /// Predict positive when score ≥ threshold (+∞ = predict nothing).
    pub threshold: f64,
    pub tpr: f64,
    pub fpr: f64,
    pub f1: f64,
}

fn f1_from_predictions(predicted: impl Iterator<Item = bool>, labels: &[u8]) -> f64 {
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut fn_ = 0usize;
    for (pred, &label) in predicted.zip(labels) {
        match (pred, label != 0) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    if tp + fp == 0 {
        // No predicted positives: precision is degenerate, F1 defined as 0.
        return 0.0;
    }
    2.0 * tp as f64 / (2.0 * tp as f64 + fp as f64 + fn_ as f64)
}

/// Sweeps every distinct score as a ≥-threshold (plus the empty cut at
/// +∞), returning operating points ordered from no predictions to all
/// predictions.
pub fn roc_sweep(scores: &[f64], labels: &[u8]) -> Result<Vec<RocPoint>, ShiftError> {
    assert_eq!(scores.len(), labels.len(), "one label per score");
    let (positives, negatives) = class_counts(labels)?;
    let mut thresholds: Vec<f64> = scores.to_vec();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let mut points = vec![RocPoint {
        threshold: f64::INFINITY,
        tpr: 0.0,
        fpr: 0.0,
        f1: 0.0,
    }];
    for t in thresholds {
        let mut tp = 0usize;
        let mut fp = 0usize;
        for (&s, &l) in scores.iter().zip(labels) {
            if s >= t {
                if l != 0 {
                    tp += 1;
                } else {
                    fp += 1;
                }
            }
        }
        points.push(RocPoint {
            threshold: t,
            tpr: tp as f64 / positives,
            fpr: fp as f64 / negatives,
            f1: f1_from_predictions(scores.iter().map(|&s| s >= t), labels),
        });
    }
    Ok(points)
}

/// Threshold-based evaluation bundle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdMetrics {
    /// F1 of predictions `score > default_threshold`.
    pub f1_default: f64,
    /// F1 at the swept threshold maximizing TPR − FPR.
    pub f1_optimal: f64,
    pub optimal_threshold: f64,
}

/// F1 at a fixed decision threshold (strict `>`), plus F1 at the
/// Youden-optimal swept threshold (argmax TPR − FPR, ties resolved toward
/// the lower threshold).
pub fn f1_and_optimal(
    scores: &[f64],
    labels: &[u8],
    default_threshold: f64,
) -> Result<ThresholdMetrics, ShiftError> {
    let points = roc_sweep(scores, labels)?;
    let f1_default =
        f1_from_predictions(scores.iter().map(|&s| s > default_threshold), labels);
    let mut best = points[0];
    for &p in &points[1..] {
        // `>=` keeps later (lower-threshold) points on ties.
        if p.tpr - p.fpr >= best.tpr - best.fpr {
            best = p;
        }
    }
    Ok(ThresholdMetrics {
        f1_default,
        f1_optimal: best.f1,
        optimal_threshold: best.threshold,
    })
}

/// Highest true-positive rate among operating points whose false-positive
/// rate does not exceed `max_fpr`. The empty cut guarantees at least the
/// (0, 0) point qualifies.
pub fn tpr_at_fpr(scores: &[f64], labels: &[u8], max_fpr: f64) -> Result<f64, ShiftError> {
    let points = roc_sweep(scores, labels)?;
    Ok(points
        .iter()
        .filter(|p| p.fpr <= max_fpr)
        .map(|p| p.tpr)
        .fold(0.0, f64::max))
}

// ===== Report assembly =====

/// The full metric bundle over one pooled score set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShiftMetrics {
    pub auc: f64,
    pub f1_default: f64,
    pub f1_optimal: f64,
    pub optimal_threshold: f64,
    /// TPR at the operating point with FPR ≤ 0.1.
    pub tpr_at_low_fpr: f64,
}

/// Evaluates pooled scores against labels: AUC, default/optimal F1, and
/// TPR at 10% FPR.
pub fn evaluate_scores(
    scores: &[f64],
    labels: &[u8],
    default_threshold: f64,
) -> Result<ShiftMetrics, ShiftError> {
    let auc = roc_auc(scores, labels)?;
    let thresholds = f1_and_optimal(scores, labels, default_threshold)?;
    let tpr_at_low_fpr = tpr_at_fpr(scores, labels, 0.1)?;
    Ok(ShiftMetrics {
        auc,
        f1_default: thresholds.f1_default,
        f1_optimal: thresholds.f1_optimal,
        optimal_threshold: thresholds.optimal_threshold,
        tpr_at_low_fpr,
    })
}

/// One session's segmentation outcome.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SessionShifts {
    pub session: String,
    /// `k` mean-pooled segment vectors.
    pub representations: Vec<Vec<f64>>,
    /// `k − 1` consecutive cosine distances.
    pub scores: Vec<f64>,
}

/// Shift-detection output for one architecture over a session set.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ShiftReport {
    pub architecture: Architecture,
    pub segments: usize,
    pub label_source: LabelSource,
    pub default_threshold: f64,
    pub sessions: Vec<SessionShifts>,
    /// Session scores concatenated in session order; labels and metrics
    /// are computed over this pool.
    pub pooled_scores: Vec<f64>,
    pub labels: Vec<u8>,
    pub metrics: ShiftMetrics,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Precision;
    use rand::Rng;

    fn tensor(rows: usize, cols: usize, data: Vec<f64>) -> Tensor {
        Tensor::from_vec(vec![rows, cols], data, Precision::Double).unwrap()
    }

    #[test]
    fn even_split_and_remainder_to_earliest() {
        // Row r has constant value r; a segment's mean identifies its rows.
        let h = tensor(8, 1, (0..8).map(f64::from).collect());
        let reps = segment_representations(&h, 4).unwrap();
        assert_eq!(
            reps,
            vec![vec![0.5], vec![2.5], vec![4.5], vec![6.5]]
        );

        let h = tensor(10, 1, (0..10).map(f64::from).collect());
        let reps = segment_representations(&h, 4).unwrap();
        // Sizes (3,3,2,2): rows {0,1,2}, {3,4,5}, {6,7}, {8,9}.
        assert_eq!(reps, vec![vec![1.0], vec![4.0], vec![6.5], vec![8.5]]);
    }

    #[test]
    fn constant_rows_give_equal_representations() {
        let h = tensor(9, 3, vec![2.0; 27]);
        let reps = segment_representations(&h, 4).unwrap();
        assert!(reps.iter().all(|r| r == &vec![2.0; 3]));
    }

    #[test]
    fn too_few_rows_to_segment() {
        let h = tensor(3, 2, vec![1.0; 6]);
        assert!(matches!(
            segment_representations(&h, 4),
            Err(ShiftError::TooShort { needed: 4, got: 3 })
        ));
    }

    #[test]
    fn score_identities() {
        let segs = vec![
            vec![1.0, 0.0],
            vec![2.0, 0.0], // same direction → 0
            vec![0.0, 1.0], // orthogonal → 1
            vec![0.0, -3.0], // opposite → 2
        ];
        let scores = shift_scores(&segs).unwrap();
        assert_eq!(scores.len(), 3);
        assert!(scores[0].abs() < 1e-15);
        assert!((scores[1] - 1.0).abs() < 1e-15);
        assert!((scores[2] - 2.0).abs() < 1e-15);

        assert!(matches!(
            shift_scores(&[vec![1.0]]),
            Err(ShiftError::TooShort { needed: 2, got: 1 })
        ));
        assert!(matches!(
            shift_scores(&[vec![0.0], vec![1.0]]),
            Err(ShiftError::Tensor(TensorError::ZeroVector))
        ));
    }

    #[test]
    fn percentile_hand_values() {
        assert_eq!(percentile(&[1.0, 2.0, 3.0, 4.0], 75.0), 3.25);
        assert_eq!(percentile(&[0.0, 10.0], 75.0), 7.5);
        assert_eq!(percentile(&[5.0], 50.0), 5.0);
        assert_eq!(percentile(&[3.0, 1.0, 2.0], 0.0), 1.0);
        assert_eq!(percentile(&[3.0, 1.0, 2.0], 100.0), 3.0);
    }

    #[test]
    fn percentile_labels_are_strict() {
        assert_eq!(
            label_by_percentile(&[1.0, 2.0, 3.0, 4.0], 75.0),
            vec![0, 0, 0, 1]
        );
        assert_eq!(label_by_percentile(&[2.0, 2.0, 2.0], 75.0), vec![0, 0, 0]);
    }

    #[test]
    fn auc_perfect_and_all_ties() {
        assert_eq!(
            roc_auc(&[0.9, 0.8, 0.2, 0.1], &[1, 1, 0, 0]).unwrap(),
            1.0
        );
        assert_eq!(roc_auc(&[0.5; 6], &[1, 0, 1, 0, 0, 1]).unwrap(), 0.5);
        assert!(matches!(
            roc_auc(&[0.1, 0.2], &[1, 1]),
            Err(ShiftError::SingleClass)
        ));
    }

    fn pairwise_auc(scores: &[f64], labels: &[u8]) -> f64 {
        let mut wins = 0.0;
        let mut pairs = 0.0;
        for (i, &si) in scores.iter().enumerate() {
            if labels[i] == 0 {
                continue;
            }
            for (j, &sj) in scores.iter().enumerate() {
                if labels[j] != 0 {
                    continue;
                }
                pairs += 1.0;
                if si > sj {
                    wins += 1.0;
                } else if si == sj {
                    wins += 0.5;
                }
            }
        }
        wins / pairs
    }

    #[test]
    fn auc_matches_pairwise_oracle_exactly_with_ties() {
        let mut rng = crate::model::rng_for_seed(7);
        for _ in 0..50 {
            let n = rng.gen_range(5..=30);
            // Quantized scores force plenty of ties.
            let scores: Vec<f64> =
                (0..n).map(|_| f64::from(rng.gen_range(0..8)) / 4.0).collect();
            let mut labels: Vec<u8> = (0..n).map(|_| rng.gen_range(0..=1)).collect();
            labels[0] = 1;
            labels[1] = 0;
            let ours = roc_auc(&scores, &labels).unwrap();
            let oracle = pairwise_auc(&scores, &labels);
            assert_eq!(ours, oracle, "scores {scores:?} labels {labels:?}");
        }
    }

    #[test]
    fn flipping_labels_complements_auc() {
        let scores = [0.1, 0.7, 0.7, 0.3, 0.9, 0.2];
        let labels = [0u8, 1, 0, 1, 1, 0];
        let flipped: Vec<u8> = labels.iter().map(|&l| 1 - l).collect();
        let a = roc_auc(&scores, &labels).unwrap();
        let b = roc_auc(&scores, &flipped).unwrap();
        assert!((a + b - 1.0).abs() < 1e-15);
    }

    #[test]
    fn optimal_threshold_hand_case() {
        let scores = [0.9, 0.8, 0.3, 0.1];
        let labels = [1u8, 1, 0, 0];
        let m = f1_and_optimal(&scores, &labels, 0.5).unwrap();
        assert_eq!(m.optimal_threshold, 0.8);
        assert_eq!(m.f1_optimal, 1.0);
        assert_eq!(m.f1_default, 1.0); // > 0.5 predicts exactly the positives
    }

    #[test]
    fn f1_degenerate_and_perfect_cases() {
        // Nothing clears the default threshold → F1 0.
        let m = f1_and_optimal(&[0.2, 0.3, 0.1], &[1, 0, 1], 0.5).unwrap();
        assert_eq!(m.f1_default, 0.0);
        // Predictions identical to labels → F1 1.
        let m = f1_and_optimal(&[0.9, 0.1, 0.8], &[1, 0, 1], 0.5).unwrap();
        assert_eq!(m.f1_default, 1.0);
    }

    #[test]
    fn tie_break_prefers_lower_threshold() {
        // Both cuts at 0.9 and 0.7 reach TPR−FPR = 0.5; the sweep must
        // settle on 0.7.
        let scores = [0.9, 0.7, 0.5, 0.3];
        let labels = [1u8, 1, 1, 0];
        // J: ≥0.9 → 1/3; ≥0.7 → 2/3; ≥0.5 → 1; ≥0.3 → 0. Max unique here,
        // so craft a real tie instead:
        let scores2 = [0.9, 0.5, 0.4, 0.2];
        let labels2 = [1u8, 0, 1, 0];
        // J: ∅ → 0; ≥0.9 → 0.5; ≥0.5 → 0.5−0.5 = 0; ≥0.4 → 1−0.5 = 0.5;
        // ≥0.2 → 0. Ties at 0.9 and 0.4 → pick 0.4.
        let m = f1_and_optimal(&scores2, &labels2, 0.5).unwrap();
        assert_eq!(m.optimal_threshold, 0.4);
        let m = f1_and_optimal(&scores, &labels, 0.5).unwrap();
        assert_eq!(m.optimal_threshold, 0.5);
    }

    #[test]
    fn tpr_at_low_fpr_hand_case() {
        let scores = [0.9, 0.8, 0.3, 0.1];
        let labels = [1u8, 1, 0, 0];
        assert_eq!(tpr_at_fpr(&scores, &labels, 0.1).unwrap(), 1.0);
        // Positives rank below negatives → within FPR ≤ 0.1 only the empty
        // cut qualifies.
        let inverted = [0.1f64, 0.2, 0.8, 0.9];
        assert_eq!(tpr_at_fpr(&inverted, &labels, 0.1).unwrap(), 0.0);
    }

    #[test]
    fn evaluate_scores_is_consistent_with_parts() {
        let scores = [0.9, 0.8, 0.3, 0.1, 0.55, 0.2];
        let labels = [1u8, 1, 0, 0, 1, 0];
        let m = evaluate_scores(&scores, &labels, 0.5).unwrap();
        assert_eq!(m.auc, roc_auc(&scores, &labels).unwrap());
        assert_eq!(
            m.f1_default,
            f1_and_optimal(&scores, &labels, 0.5).unwrap().f1_default
        );
        assert_eq!(m.tpr_at_low_fpr, tpr_at_fpr(&scores, &labels, 0.1).unwrap());
    }

    #[test]
    fn label_source_round_trip() {
        for s in ["self-percentile", "file", "synthetic"] {
            let parsed: LabelSource = s.parse().unwrap();
            assert_eq!(parsed.to_string(), s);
        }
        assert!("percentile".parse::<LabelSource>().is_err());
    }
}
