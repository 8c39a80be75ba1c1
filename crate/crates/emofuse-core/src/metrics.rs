//! Evaluation metrics: one-vs-all recall and ROC-AUC with 4-class
//! averages, fold-score pooling, and seed aggregation (median ± IQR).

use crate::error::{Error, Result};
use crate::manifest::{EmotionLabel, NUM_CLASSES};
use serde::{Deserialize, Serialize};
use std::collections::HashSet;

/// One scored test utterance: class probabilities plus the true label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredPrediction {
    pub id: String,
    pub probs: [f64; NUM_CLASSES],
    pub true_label: EmotionLabel,
}

impl ScoredPrediction {
    /// Build a prediction, validating that the probabilities are
    /// non-negative and sum to 1 within 1e-6.
    pub fn new(
        id: impl Into<String>,
        probs: [f64; NUM_CLASSES],
        true_label: EmotionLabel,
    ) -> Result<ScoredPrediction> {
        let id = id.into();
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::Metrics(format!(
                "prediction '{id}' has a negative or non-finite probability"
            )));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::Metrics(format!(
                "prediction '{id}' probabilities sum to {sum}, expected 1"
            )));
        }
        Ok(ScoredPrediction {
            id,
            probs,
            true_label,
        })
    }

    /// Predicted class: argmax over probabilities, ties resolved to the
    /// lowest class index.
    pub fn predicted(&self) -> EmotionLabel {
        let mut best = 0usize;
        for k in 1..NUM_CLASSES {
            if self.probs[k] > self.probs[best] {
                best = k;
            }
        }
        EmotionLabel::from_index(best).expect("index in range")
    }
}

/// Per-class and averaged metrics for one pool of predictions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub recall: [f64; NUM_CLASSES],
    pub auc: [f64; NUM_CLASSES],
    pub av_rec: f64,
    pub av_auc: f64,
    pub class_counts: [usize; NUM_CLASSES],
}

/// Median and interquartile range of the averaged metrics over seeds,
/// with the raw per-seed values retained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedAggregate {
    pub av_rec_median: f64,
    pub av_rec_iqr: f64,
    pub av_auc_median: f64,
    pub av_auc_iqr: f64,
    pub av_rec_values: Vec<f64>,
    pub av_auc_values: Vec<f64>,
}

fn count_classes(preds: &[ScoredPrediction]) -> [usize; NUM_CLASSES] {
    let mut counts = [0usize; NUM_CLASSES];
    for p in preds {
        counts[p.true_label.index()] += 1;
    }
    counts
}

/// One-vs-all recall per class and the unweighted 4-class average.
///
/// Errors if any class has no true examples.
pub fn recall_metrics(preds: &[ScoredPrediction]) -> Result<([f64; NUM_CLASSES], f64)> {
    let counts = count_classes(preds);
    for label in EmotionLabel::ALL {
        if counts[label.index()] == 0 {
            return Err(Error::Metrics(format!(
                "recall undefined: no true '{}' examples",
                label.name()
            )));
        }
    }
    let mut correct = [0usize; NUM_CLASSES];
    for p in preds {
        if p.predicted() == p.true_label {
            correct[p.true_label.index()] += 1;
        }
    }
    let mut recall = [0.0f64; NUM_CLASSES];
    for k in 0..NUM_CLASSES {
        recall[k] = correct[k] as f64 / counts[k] as f64;
    }
    let av_rec = recall.iter().sum::<f64>() / NUM_CLASSES as f64;
    Ok((recall, av_rec))
}

/// One-vs-all ROC-AUC for a single class from its probability column.
///
/// Computed as the Mann-Whitney pair statistic via tied ranks: the
/// fraction of (positive, negative) pairs where the positive scores
/// higher, ties counted half. Exact; no ROC-curve discretization.
fn auc_one_class(scores: &[f64], is_pos: &[bool]) -> f64 {
    let n_pos = is_pos.iter().filter(|p| **p).count();
    let n_neg = is_pos.len() - n_pos;
    debug_assert!(n_pos > 0 && n_neg > 0);

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|a, b| scores[*a].total_cmp(&scores[*b]));

    let mut twice_rank_sum_pos: u64 = 0;
    let mut i = 0usize;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let twice_avg_rank = (i + j + 2) as u64;
        for &idx in &order[i..=j] {
            if is_pos[idx] {
                twice_rank_sum_pos += twice_avg_rank;
            }
        }
        i = j + 1;
    }

    let n_pos = n_pos as u64;
    let n_neg = n_neg as u64;
    let twice_u = twice_rank_sum_pos - n_pos * (n_pos + 1);
    twice_u as f64 / (2 * n_pos * n_neg) as f64
}

/// One-vs-all ROC-AUC per class and the unweighted 4-class average.
///
/// Errors if any class lacks a positive or a negative example.
pub fn auc_metrics(preds: &[ScoredPrediction]) -> Result<([f64; NUM_CLASSES], f64)> {
    let counts = count_classes(preds);
    let n = preds.len();
    let mut auc = [0.0f64; NUM_CLASSES];
    for label in EmotionLabel::ALL {
        let k = label.index();
        if counts[k] == 0 || counts[k] == n {
            return Err(Error::Metrics(format!(
                "AUC undefined for class '{}': needs at least one positive and one negative",
                label.name()
            )));
        }
        let scores: Vec<f64> = preds.iter().map(|p| p.probs[k]).collect();
        let is_pos: Vec<bool> = preds.iter().map(|p| p.true_label == label).collect();
        auc[k] = auc_one_class(&scores, &is_pos);
    }
    let av_auc = auc.iter().sum::<f64>() / NUM_CLASSES as f64;
    Ok((auc, av_auc))
}

/// Full metric report for one pool of predictions.
pub fn metric_report(preds: &[ScoredPrediction]) -> Result<MetricReport> {
    let (recall, av_rec) = recall_metrics(preds)?;
    let (auc, av_auc) = auc_metrics(preds)?;
    Ok(MetricReport {
        recall,
        auc,
        av_rec,
        av_auc,
        class_counts: count_classes(preds),
    })
}

/// Pool per-fold test predictions into one list, in fold order.
///
/// Fold test sets must be disjoint; a duplicate id is an error.
pub fn merge_fold_scores(fold_preds: &[Vec<ScoredPrediction>]) -> Result<Vec<ScoredPrediction>> {
    let mut seen: HashSet<&str> = HashSet::new();
    let mut pooled = Vec::new();
    for (fold, preds) in fold_preds.iter().enumerate() {
        for p in preds {
            if !seen.insert(&p.id) {
                return Err(Error::Metrics(format!(
                    "utterance '{}' scored in more than one fold (fold {fold})",
                    p.id
                )));
            }
            pooled.push(p.clone());
        }
    }
    Ok(pooled)
}

/// Quantile of a sample by linear interpolation between order statistics.
/// The input must be sorted ascending.
pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    debug_assert!((0.0..=1.0).contains(&p));
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let frac = h - lo as f64;
    if frac == 0.0 {
        sorted[lo]
    } else {
        sorted[lo] + frac * (sorted[lo + 1] - sorted[lo])
    }
}

/// Median: middle value, or the average of the two middle values for an
/// even-sized sample. The input must be sorted ascending.
pub fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
    }
}

fn median_and_iqr(values: &[f64]) -> (f64, f64) {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let med = median(&sorted);
    let iqr = quantile(&sorted, 0.75) - quantile(&sorted, 0.25);
    (med, iqr)
}

/// Aggregate per-seed reports into median ± IQR of the averaged metrics.
pub fn aggregate_seeds(reports: &[MetricReport]) -> Result<SeedAggregate> {
    if reports.is_empty() {
        return Err(Error::Metrics("no seed reports to aggregate".to_string()));
    }
    let av_rec_values: Vec<f64> = reports.iter().map(|r| r.av_rec).collect();
    let av_auc_values: Vec<f64> = reports.iter().map(|r| r.av_auc).collect();
    let (av_rec_median, av_rec_iqr) = median_and_iqr(&av_rec_values);
    let (av_auc_median, av_auc_iqr) = median_and_iqr(&av_auc_values);
    Ok(SeedAggregate {
        av_rec_median,
        av_rec_iqr,
        av_auc_median,
        av_auc_iqr,
        av_rec_values,
        av_auc_values,
    })
}
