//! Classification metrics, ROC analysis, hypothesis tests, bootstrap
//! intervals and the linear-probe harness.

mod bootstrap;
mod hypothesis;
mod metrics;
mod probe;
mod roc;
mod scores;

pub use bootstrap::{bootstrap_ci, percentile, BootstrapCi};
pub use hypothesis::{
    cochran_q, delong_test, holm_adjust, mcnemar_counts, mcnemar_from_counts, mcnemar_test, wilson_ci, CochranQ, DelongResult,
    McnemarMethod, McnemarResult,
};
pub use metrics::{classification_metrics, confusion_matrix, threshold_predictions, ClassMetrics};
pub use probe::{linear_probe, probe_lr, train_linear_probe, LinearProbe, ProbeConfig, ProbeReport, ZScore};
pub use roc::{auroc, roc_curve, sens_at_spec, spec_at_sens, RocPoint};
pub use scores::{read_scores_csv, write_scores_csv, ScoreRow};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum StatError {
    #[error("both classes are required (positives {pos}, negatives {neg})")]
    SingleClass { pos: usize, neg: usize },
    #[error("length mismatch: {0}")]
    Length(String),
    #[error("empty input")]
    Empty,
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("class {0} is absent from the training split")]
    MissingClass(usize),
    #[error("scores file: {0}")]
    Io(String),
}

pub(crate) fn check_binary(scores: &[f64], labels: &[bool]) -> Result<(usize, usize), StatError> {
    if scores.len() != labels.len() {
        return Err(StatError::Length(format!("{} scores, {} labels", scores.len(), labels.len())));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(StatError::Invalid("NaN score".into()));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(StatError::SingleClass { pos, neg });
    }
    Ok((pos, neg))
}

/// Average (1-based) ranks with ties sharing their mean rank.
pub(crate) fn midranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

#[cfg(test)]
mod tests;
