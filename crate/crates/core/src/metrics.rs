//! Ranking metrics for anomaly detection: ROC AUC and average precision,
//! with outliers as the positive class, plus threshold-based labeling.
//!
//! Convention used across the crate: the anomaly score of a sample is the
//! reconstruction distance, so HIGHER score means MORE anomalous. (Systems
//! that rank by similarity use the negation of this ordering.)

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

fn check_scores_labels(scores: &[f64], labels: &[u8]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::ShapeMismatch {
            op: "metrics",
            lhs: vec![scores.len()],
            rhs: vec![labels.len()],
        });
    }
    if scores.is_empty() {
        return Err(Error::invalid("metrics need at least one sample"));
    }
    if let Some(&l) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::invalid(format!("label {l} outside {{0,1}}")));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::invalid("non-finite score"));
    }
    Ok(())
}

/// Area under the ROC curve via the Mann–Whitney statistic:
/// P(outlier score > inlier score) + ½·P(tie), exact under ties.
///
/// Computed with average ranks: sort ascending, give tied scores the mean of
/// their rank range, then AUC = (Σ ranks of positives − P(P+1)/2) / (P·N).
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_scores_labels(scores, labels)?;
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::invalid(
            "roc_auc needs both an outlier and an inlier in the labels",
        ));
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());

    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        // Tie group [i, j): identical scores share the average rank.
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        // 1-based ranks i+1 ..= j average to (i + j + 1) / 2.
        let avg_rank = (i + j + 1) as f64 / 2.0;
        for &idx in &order[i..j] {
            if labels[idx] == 1 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j;
    }

    let p = n_pos as f64;
    Ok((rank_sum_pos - p * (p + 1.0) / 2.0) / (p * n_neg as f64))
}

/// Average precision: area under the precision-recall curve with step
/// interpolation, sweeping thresholds from high to low with tied scores
/// grouped. AP = Σₖ (R(k) − R(k−1)) · P(k).
pub fn average_precision(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_scores_labels(scores, labels)?;
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    if n_pos == 0 {
        return Err(Error::invalid("average_precision needs at least one outlier"));
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());

    let mut ap = 0.0;
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut recall_prev = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        for &idx in &order[i..j] {
            if labels[idx] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
        }
        let recall = tp as f64 / n_pos as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        ap += (recall - recall_prev) * precision;
        recall_prev = recall;
        i = j;
    }
    Ok(ap)
}

/// Label each sample: outlier (1) iff its score is strictly above the
/// threshold. With similarity = −distance, "similarity ≥ threshold ⇒ normal"
/// becomes "distance > threshold ⇒ anomalous".
pub fn threshold_labels(scores: &[f64], threshold: f64) -> Vec<u8> {
    scores.iter().map(|&s| (s > threshold) as u8).collect()
}

/// Scores, ground-truth labels, and the ranking metrics computed from them.
#[derive(Debug, Clone, Serialize)]
pub struct ScoreReport {
    pub scores: Vec<f64>,
    pub labels: Vec<u8>,
    pub auc: f64,
    pub ap: f64,
    pub threshold: Option<f64>,
    pub predicted: Option<Vec<u8>>,
}

impl ScoreReport {
    /// Compute AUC and AP for a scored, labeled sample set. Requires both
    /// classes to be present (AUC is undefined otherwise).
    pub fn from_scores(scores: Vec<f64>, labels: Vec<u8>) -> Result<Self> {
        let auc = roc_auc(&scores, &labels)?;
        let ap = average_precision(&scores, &labels)?;
        Ok(ScoreReport {
            scores,
            labels,
            auc,
            ap,
            threshold: None,
            predicted: None,
        })
    }

    /// Attach a decision threshold and the labels it predicts.
    pub fn with_threshold(mut self, threshold: f64) -> Self {
        self.predicted = Some(threshold_labels(&self.scores, threshold));
        self.threshold = Some(threshold);
        self
    }

    pub fn n(&self) -> usize {
        self.scores.len()
    }

    pub fn n_outliers(&self) -> usize {
        self.labels.iter().filter(|&&l| l == 1).count()
    }

    /// Compact summary for JSON export.
    pub fn summary(&self, seed: u64) -> MetricsSummary {
        MetricsSummary {
            auc: self.auc,
            ap: self.ap,
            n: self.n(),
            n_outliers: self.n_outliers(),
            seed,
        }
    }
}

/// The JSON-exported metric record for one run.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MetricsSummary {
    pub auc: f64,
    pub ap: f64,
    pub n: usize,
    pub n_outliers: usize,
    pub seed: u64,
}
