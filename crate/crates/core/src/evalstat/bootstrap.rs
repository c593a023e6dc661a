use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::StatError;
use crate::rng::keyed_rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapCi {
    pub estimate: f64,
    pub lo: f64,
    pub hi: f64,
    /// Replicates where the metric was defined.
    pub replicates: usize,
}

/// Linear-interpolated percentile of sorted values, `q` in `[0, 1]`.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Percentile interval of `metric` over case resamples drawn with replacement.
/// Replicates on which the metric is undefined (e.g. a single class) are skipped.
pub fn bootstrap_ci<F>(
    scores: &[f64],
    labels: &[bool],
    metric: F,
    replicates: usize,
    level: f64,
    seed: u64,
) -> Result<BootstrapCi, StatError>
where
    F: Fn(&[f64], &[bool]) -> Result<f64, StatError> + Sync,
{
    if scores.len() != labels.len() {
        return Err(StatError::Length("scores and labels".into()));
    }
    if replicates == 0 || !(level > 0.0 && level < 1.0) {
        return Err(StatError::Invalid("replicates must be positive and level in (0, 1)".into()));
    }
    let estimate = metric(scores, labels)?;
    let n = scores.len();
    let mut values: Vec<f64> = (0..replicates as u64)
        .into_par_iter()
        .filter_map(|r| {
            let mut rng = keyed_rng(seed, &[r]);
            let mut s = Vec::with_capacity(n);
            let mut l = Vec::with_capacity(n);
            for _ in 0..n {
                let i = rng.random_range(0..n);
                s.push(scores[i]);
                l.push(labels[i]);
            }
            metric(&s, &l).ok()
        })
        .collect();
    if values.is_empty() {
        return Err(StatError::Invalid("metric undefined on every replicate".into()));
    }
    values.sort_by(f64::total_cmp);
    let alpha = (1.0 - level) / 2.0;
    Ok(BootstrapCi {
        estimate,
        lo: percentile(&values, alpha),
        hi: percentile(&values, 1.0 - alpha),
        replicates: values.len(),
    })
}
