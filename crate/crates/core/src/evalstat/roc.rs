use super::{check_binary, midranks, StatError};

/// Mann-Whitney AUROC with ties counted as one half.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64, StatError> {
    let (p, n) = check_binary(scores, labels)?;
    let ranks = midranks(scores);
    let rpos: f64 = ranks.iter().zip(labels).filter(|(_, &l)| l).map(|(r, _)| r).sum();
    let (p, n) = (p as f64, n as f64);
    Ok((rpos - p * (p + 1.0) / 2.0) / (p * n))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RocPoint {
    /// Predict positive when `score >= threshold`.
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

/// `(threshold, true positives, false positives)` at `+inf` and at every
/// distinct score, strictest first.
fn roc_counts(scores: &[f64], labels: &[bool]) -> Vec<(f64, usize, usize)> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut out = vec![(f64::INFINITY, 0, 0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < idx.len() {
        let t = scores[idx[i]];
        while i < idx.len() && scores[idx[i]] == t {
            if labels[idx[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        out.push((t, tp, fp));
    }
    out
}

/// Operating points at `+inf` and at every distinct score, strictest first.
pub fn roc_curve(scores: &[f64], labels: &[bool]) -> Result<Vec<RocPoint>, StatError> {
    let (p, n) = check_binary(scores, labels)?;
    Ok(roc_counts(scores, labels)
        .into_iter()
        .map(|(threshold, tp, fp)| RocPoint {
            threshold,
            fpr: fp as f64 / n as f64,
            tpr: tp as f64 / p as f64,
        })
        .collect())
}

/// Sensitivity at the least strict threshold whose specificity reaches `target`.
pub fn sens_at_spec(scores: &[f64], labels: &[bool], target: f64) -> Result<f64, StatError> {
    let (p, n) = check_binary(scores, labels)?;
    Ok(roc_counts(scores, labels)
        .into_iter()
        .filter(|&(_, _, fp)| (n - fp) as f64 / n as f64 >= target)
        .map(|(_, tp, _)| tp as f64 / p as f64)
        .fold(0.0, f64::max))
}

/// Specificity at the strictest threshold whose sensitivity reaches `target`.
pub fn spec_at_sens(scores: &[f64], labels: &[bool], target: f64) -> Result<f64, StatError> {
    let (p, n) = check_binary(scores, labels)?;
    Ok(roc_counts(scores, labels)
        .into_iter()
        .filter(|&(_, tp, _)| tp as f64 / p as f64 >= target)
        .map(|(_, _, fp)| (n - fp) as f64 / n as f64)
        .fold(0.0, f64::max))
}
