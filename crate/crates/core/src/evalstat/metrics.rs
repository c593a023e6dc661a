use serde::{Deserialize, Serialize};

use super::StatError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub accuracy: f64,
    pub balanced_accuracy: f64,
    pub weighted_f1: f64,
}

/// `m[true][predicted]` counts.
pub fn confusion_matrix(pred: &[usize], labels: &[usize], classes: usize) -> Result<Vec<Vec<usize>>, StatError> {
    if pred.len() != labels.len() {
        return Err(StatError::Length(format!("{} predictions, {} labels", pred.len(), labels.len())));
    }
    let mut m = vec![vec![0; classes]; classes];
    for (&p, &l) in pred.iter().zip(labels) {
        if p >= classes || l >= classes {
            return Err(StatError::Invalid(format!("class index beyond {classes}")));
        }
        m[l][p] += 1;
    }
    Ok(m)
}

/// Accuracy, mean per-class recall, and F1 weighted by class support.
pub fn classification_metrics(pred: &[usize], labels: &[usize], classes: usize) -> Result<ClassMetrics, StatError> {
    if labels.is_empty() {
        return Err(StatError::Empty);
    }
    let m = confusion_matrix(pred, labels, classes)?;
    let n = labels.len() as f64;
    let correct: usize = (0..classes).map(|c| m[c][c]).sum();
    let mut recall_sum = 0.0;
    let mut present = 0;
    let mut wf1 = 0.0;
    for c in 0..classes {
        let support: usize = m[c].iter().sum();
        let predicted: usize = (0..classes).map(|r| m[r][c]).sum();
        let tp = m[c][c];
        if support > 0 {
            recall_sum += tp as f64 / support as f64;
            present += 1;
        }
        let denom = support + predicted;
        let f1 = if denom == 0 { 0.0 } else { 2.0 * tp as f64 / denom as f64 };
        wf1 += support as f64 / n * f1;
    }
    Ok(ClassMetrics {
        accuracy: correct as f64 / n,
        balanced_accuracy: recall_sum / present as f64,
        weighted_f1: wf1,
    })
}

/// Binary predictions at `score >= threshold`.
pub fn threshold_predictions(scores: &[f64], threshold: f64) -> Vec<usize> {
    scores.iter().map(|&s| usize::from(s >= threshold)).collect()
}
