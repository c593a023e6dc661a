use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};
use statrs::function::factorial::ln_binomial;

use super::{check_binary, midranks, StatError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DelongResult {
    pub auc_a: f64,
    pub auc_b: f64,
    pub diff: f64,
    pub variance: f64,
    pub z: f64,
    pub p: f64,
}

fn two_sided_normal(z: f64) -> f64 {
    let n = Normal::new(0.0, 1.0).expect("standard normal");
    (2.0 * n.cdf(-z.abs())).min(1.0)
}

/// Positive and negative structural components of one model's AUROC.
fn placements(scores: &[f64], labels: &[bool]) -> (f64, Vec<f64>, Vec<f64>) {
    let pos: Vec<f64> = scores.iter().zip(labels).filter(|(_, &l)| l).map(|(&s, _)| s).collect();
    let neg: Vec<f64> = scores.iter().zip(labels).filter(|(_, &l)| !l).map(|(&s, _)| s).collect();
    let (m, n) = (pos.len() as f64, neg.len() as f64);
    let all: Vec<f64> = pos.iter().chain(&neg).copied().collect();
    let r_all = midranks(&all);
    let r_pos = midranks(&pos);
    let r_neg = midranks(&neg);
    let v10: Vec<f64> = (0..pos.len()).map(|i| (r_all[i] - r_pos[i]) / n).collect();
    let v01: Vec<f64> = (0..neg.len()).map(|j| 1.0 - (r_all[pos.len() + j] - r_neg[j]) / m).collect();
    let rsum: f64 = r_all[..pos.len()].iter().sum();
    let auc = (rsum - m * (m + 1.0) / 2.0) / (m * n);
    (auc, v10, v01)
}

fn cov(a: &[f64], b: &[f64]) -> f64 {
    let k = a.len() as f64;
    let ma = a.iter().sum::<f64>() / k;
    let mb = b.iter().sum::<f64>() / k;
    a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / (k - 1.0)
}

/// Paired two-sided test of equal AUROC for two models scored on the same cases.
pub fn delong_test(a: &[f64], b: &[f64], labels: &[bool]) -> Result<DelongResult, StatError> {
    let (m, n) = check_binary(a, labels)?;
    check_binary(b, labels)?;
    let (auc_a, a10, a01) = placements(a, labels);
    let (auc_b, b10, b01) = placements(b, labels);
    let d10: Vec<f64> = a10.iter().zip(&b10).map(|(x, y)| x - y).collect();
    let d01: Vec<f64> = a01.iter().zip(&b01).map(|(x, y)| x - y).collect();
    let s10 = if m > 1 { cov(&d10, &d10) } else { 0.0 };
    let s01 = if n > 1 { cov(&d01, &d01) } else { 0.0 };
    let variance = s10 / m as f64 + s01 / n as f64;
    let diff = auc_a - auc_b;
    let (z, p) = if variance <= f64::EPSILON * f64::EPSILON {
        (0.0, if diff.abs() <= 1e-15 { 1.0 } else { 0.0 })
    } else {
        let z = diff / variance.sqrt();
        (z, two_sided_normal(z))
    };
    Ok(DelongResult {
        auc_a,
        auc_b,
        diff,
        variance,
        z,
        p,
    })
}

/// Holm step-down adjustment, returned in input order.
pub fn holm_adjust(p: &[f64]) -> Vec<f64> {
    let m = p.len();
    let mut idx: Vec<usize> = (0..m).collect();
    idx.sort_by(|&a, &b| p[a].total_cmp(&p[b]));
    let mut out = vec![0.0; m];
    let mut running = 0.0f64;
    for (j, &i) in idx.iter().enumerate() {
        running = running.max(((m - j) as f64 * p[i]).min(1.0));
        out[i] = running;
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CochranQ {
    pub q: f64,
    pub df: usize,
    pub p: f64,
}

/// Cochran's Q over a cases x classifiers matrix of binary outcomes.
pub fn cochran_q(outcomes: &[Vec<bool>]) -> Result<CochranQ, StatError> {
    let k = outcomes.first().map_or(0, Vec::len);
    if k < 2 {
        return Err(StatError::Invalid("Cochran's Q needs at least two classifiers".into()));
    }
    if outcomes.iter().any(|r| r.len() != k) {
        return Err(StatError::Length("ragged outcome matrix".into()));
    }
    let mut cols = vec![0.0f64; k];
    let mut row_sq = 0.0;
    let mut total = 0.0;
    for r in outcomes {
        let s = r.iter().filter(|&&b| b).count() as f64;
        row_sq += s * s;
        total += s;
        for (c, &b) in cols.iter_mut().zip(r) {
            *c += f64::from(u8::from(b));
        }
    }
    let kf = k as f64;
    let denom = kf * total - row_sq;
    let df = k - 1;
    if denom == 0.0 {
        return Ok(CochranQ { q: 0.0, df, p: 1.0 });
    }
    let q = (kf - 1.0) * (kf * cols.iter().map(|c| c * c).sum::<f64>() - total * total) / denom;
    let chi = ChiSquared::new(df as f64).expect("positive df");
    Ok(CochranQ {
        q,
        df,
        p: (1.0 - chi.cdf(q)).clamp(0.0, 1.0),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum McnemarMethod {
    #[default]
    Exact,
    ChiSquared,
    ChiSquaredCorrected,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McnemarResult {
    /// First classifier right, second wrong.
    pub b: usize,
    /// First classifier wrong, second right.
    pub c: usize,
    pub statistic: Option<f64>,
    pub p: f64,
}

pub fn mcnemar_counts(first: &[bool], second: &[bool]) -> Result<(usize, usize), StatError> {
    if first.len() != second.len() {
        return Err(StatError::Length(format!("{} vs {} outcomes", first.len(), second.len())));
    }
    let b = first.iter().zip(second).filter(|(&x, &y)| x && !y).count();
    let c = first.iter().zip(second).filter(|(&x, &y)| !x && y).count();
    Ok((b, c))
}

fn exact_binomial_p(b: usize, c: usize) -> f64 {
    let n = b + c;
    if n == 0 {
        return 1.0;
    }
    let k = b.min(c);
    let tail = if n <= 1000 {
        let mut pmf = 0.5f64.powi(n as i32);
        let mut acc = pmf;
        for i in 0..k {
            pmf *= (n - i) as f64 / (i + 1) as f64;
            acc += pmf;
        }
        acc
    } else {
        let ln_half = n as f64 * 0.5f64.ln();
        (0..=k).map(|i| (ln_binomial(n as u64, i as u64) + ln_half).exp()).sum()
    };
    (2.0 * tail).min(1.0)
}

/// McNemar's test on paired binary outcomes (correct / incorrect).
pub fn mcnemar_test(first: &[bool], second: &[bool], method: McnemarMethod) -> Result<McnemarResult, StatError> {
    let (b, c) = mcnemar_counts(first, second)?;
    Ok(mcnemar_from_counts(b, c, method))
}

pub fn mcnemar_from_counts(b: usize, c: usize, method: McnemarMethod) -> McnemarResult {
    match method {
        McnemarMethod::Exact => McnemarResult {
            b,
            c,
            statistic: None,
            p: exact_binomial_p(b, c),
        },
        McnemarMethod::ChiSquared | McnemarMethod::ChiSquaredCorrected => {
            if b + c == 0 {
                return McnemarResult {
                    b,
                    c,
                    statistic: Some(0.0),
                    p: 1.0,
                };
            }
            let d = (b as f64 - c as f64).abs();
            let d = if method == McnemarMethod::ChiSquaredCorrected {
                (d - 1.0).max(0.0)
            } else {
                d
            };
            let stat = d * d / (b + c) as f64;
            let chi = ChiSquared::new(1.0).expect("df 1");
            McnemarResult {
                b,
                c,
                statistic: Some(stat),
                p: (1.0 - chi.cdf(stat)).clamp(0.0, 1.0),
            }
        }
    }
}

/// Wilson score interval for `k` successes in `n` trials.
pub fn wilson_ci(k: usize, n: usize, level: f64) -> Result<(f64, f64), StatError> {
    if n == 0 || k > n {
        return Err(StatError::Invalid(format!("{k} successes in {n} trials")));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(StatError::Invalid(format!("confidence level {level}")));
    }
    let z = Normal::new(0.0, 1.0).expect("standard normal").inverse_cdf(1.0 - (1.0 - level) / 2.0);
    let nf = n as f64;
    let p = k as f64 / nf;
    let z2 = z * z;
    let denom = 1.0 + z2 / nf;
    let center = (p + z2 / (2.0 * nf)) / denom;
    let half = z * (p * (1.0 - p) / nf + z2 / (4.0 * nf * nf)).sqrt() / denom;
    let lo = if k == 0 { 0.0 } else { (center - half).max(0.0) };
    let hi = if k == n { 1.0 } else { (center + half).min(1.0) };
    Ok((lo, hi))
}
