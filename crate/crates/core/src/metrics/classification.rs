use serde::{Deserialize, Serialize};

use super::correlation::average_ranks;
use crate::error::{arg, degenerate, Result};

/// Predicted probabilities paired with binary ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct BinaryOutcomes {
    predictions: Vec<f64>,
    labels: Vec<bool>,
    threshold: f64,
}

impl BinaryOutcomes {
    pub fn new(predictions: Vec<f64>, labels: Vec<bool>) -> Result<Self> {
        Self::with_threshold(predictions, labels, 0.5)
    }

    pub fn with_threshold(predictions: Vec<f64>, labels: Vec<bool>, threshold: f64) -> Result<Self> {
        if predictions.is_empty() || predictions.len() != labels.len() {
            return arg(format!(
                "need equal, non-zero lengths (got {} predictions, {} labels)",
                predictions.len(),
                labels.len()
            ));
        }
        if let Some(p) = predictions.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return arg(format!("prediction {p} outside [0, 1]"));
        }
        if !(threshold > 0.0 && threshold < 1.0) {
            return arg(format!("threshold {threshold} outside (0, 1)"));
        }
        Ok(Self { predictions, labels, threshold })
    }

    /// Convenience constructor from `{0, 1}` integer labels.
    pub fn from_bits(predictions: Vec<f64>, labels: &[u8]) -> Result<Self> {
        if labels.iter().any(|&l| l > 1) {
            return arg("labels must be 0 or 1");
        }
        Self::new(predictions, labels.iter().map(|&l| l == 1).collect())
    }

    pub fn predictions(&self) -> &[f64] {
        &self.predictions
    }

    pub fn labels(&self) -> &[bool] {
        &self.labels
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }
}

/// F1, accuracy and ROC-AUC for one artifact class.
///
/// `auc` is `None` when the labels contain a single class.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionScores {
    pub f1: f64,
    pub accuracy: f64,
    pub auc: Option<f64>,
}

impl DetectionScores {
    /// AUC, or a degenerate-input error when it is undefined.
    pub fn auc(&self) -> Result<f64> {
        match self.auc {
            Some(a) => Ok(a),
            None => degenerate("AUC needs at least one positive and one negative label"),
        }
    }
}

/// Thresholded F1 and accuracy (positive iff `p >= threshold`) plus rank-based AUC.
///
/// F1 is 0 when there are no true positives, including the all-negative case.
pub fn f1_accuracy_auc(o: &BinaryOutcomes) -> DetectionScores {
    let (mut tp, mut fp, mut fn_, mut tn) = (0usize, 0usize, 0usize, 0usize);
    for (&p, &l) in o.predictions.iter().zip(&o.labels) {
        match (p >= o.threshold, l) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => tn += 1,
        }
    }
    let f1 = if tp == 0 { 0.0 } else { 2.0 * tp as f64 / (2 * tp + fp + fn_) as f64 };
    let accuracy = (tp + tn) as f64 / o.labels.len() as f64;

    let n_pos = o.labels.iter().filter(|&&l| l).count();
    let n_neg = o.labels.len() - n_pos;
    let auc = (n_pos > 0 && n_neg > 0).then(|| {
        // Mann-Whitney U with average ranks counts ties as one half.
        let ranks = average_ranks(&o.predictions);
        let pos_rank_sum: f64 = ranks.iter().zip(&o.labels).filter(|(_, &l)| l).map(|(r, _)| r).sum();
        let u = pos_rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
        u / (n_pos as f64 * n_neg as f64)
    });
    DetectionScores { f1, accuracy, auc }
}
