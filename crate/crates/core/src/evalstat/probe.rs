use std::f64::consts::PI;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use super::metrics::{classification_metrics, ClassMetrics};
use super::StatError;
use crate::rng::keyed_rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    pub batch: usize,
    pub iterations: usize,
    pub lr: f64,
    pub min_lr: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            batch: 4096,
            iterations: 12_500,
            lr: 0.01,
            min_lr: 0.0,
            seed: 0,
        }
    }
}

/// Cosine decay from `lr` at the first iteration to `min_lr` at the last.
pub fn probe_lr(cfg: &ProbeConfig, it: usize) -> f64 {
    if cfg.iterations <= 1 {
        return cfg.lr;
    }
    let t = it as f64 / (cfg.iterations - 1) as f64;
    cfg.min_lr + (cfg.lr - cfg.min_lr) * 0.5 * (1.0 + (PI * t).cos())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZScore {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ZScore {
    pub fn fit(x: &[Vec<f64>]) -> Self {
        let d = x.first().map_or(0, Vec::len);
        let n = x.len().max(1) as f64;
        let mut mean = vec![0.0; d];
        for r in x {
            mean.iter_mut().zip(r).for_each(|(m, v)| *m += v / n);
        }
        let mut var = vec![0.0; d];
        for r in x {
            var.iter_mut().zip(r.iter().zip(&mean)).for_each(|(s, (v, m))| *s += (v - m) * (v - m) / n);
        }
        let std = var.into_iter().map(|v| v.sqrt().max(1e-8)).collect();
        Self { mean, std }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(self.mean.iter().zip(&self.std)).map(|(v, (m, s))| (v - m) / s).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearProbe {
    pub zscore: ZScore,
    /// `[classes][dim]`.
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
}

impl LinearProbe {
    pub fn classes(&self) -> usize {
        self.bias.len()
    }

    fn logits_z(&self, z: &[f64]) -> Vec<f64> {
        self.weights
            .iter()
            .zip(&self.bias)
            .map(|(w, b)| w.iter().zip(z).map(|(a, x)| a * x).sum::<f64>() + b)
            .collect()
    }

    pub fn probabilities(&self, x: &[f64]) -> Vec<f64> {
        softmax(&self.logits_z(&self.zscore.apply(x)))
    }

    /// Highest-probability class, lowest index on ties.
    pub fn predict(&self, x: &[f64]) -> usize {
        let p = self.probabilities(x);
        let mut best = 0;
        for (i, &v) in p.iter().enumerate() {
            if v > p[best] {
                best = i;
            }
        }
        best
    }
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn check_xy(x: &[Vec<f64>], y: &[usize]) -> Result<usize, StatError> {
    if x.len() != y.len() {
        return Err(StatError::Length(format!("{} rows, {} labels", x.len(), y.len())));
    }
    let d = x.first().ok_or(StatError::Empty)?.len();
    if x.iter().any(|r| r.len() != d) {
        return Err(StatError::Length("embedding widths differ".into()));
    }
    Ok(d)
}

/// Softmax regression on z-scored features with minibatch gradient descent.
pub fn train_linear_probe(
    x: &[Vec<f64>],
    y: &[usize],
    classes: usize,
    cfg: &ProbeConfig,
) -> Result<LinearProbe, StatError> {
    let d = check_xy(x, y)?;
    if cfg.iterations == 0 || cfg.batch == 0 {
        return Err(StatError::Invalid("iterations and batch must be positive".into()));
    }
    if classes < 2 {
        return Err(StatError::Invalid("at least two classes".into()));
    }
    if let Some(&bad) = y.iter().find(|&&c| c >= classes) {
        return Err(StatError::Invalid(format!("label {bad} beyond {classes} classes")));
    }
    for c in 0..classes {
        if !y.contains(&c) {
            return Err(StatError::MissingClass(c));
        }
    }
    let zscore = ZScore::fit(x);
    let z: Vec<Vec<f64>> = x.iter().map(|r| zscore.apply(r)).collect();
    let mut probe = LinearProbe {
        zscore,
        weights: vec![vec![0.0; d]; classes],
        bias: vec![0.0; classes],
    };
    let n = z.len();
    let full: Vec<usize> = (0..n).collect();
    let mut gw = vec![vec![0.0; d]; classes];
    let mut gb = vec![0.0; classes];
    for it in 0..cfg.iterations {
        let batch = if cfg.batch >= n {
            full.clone()
        } else {
            let mut rng = keyed_rng(cfg.seed, &[it as u64]);
            index::sample(&mut rng, n, cfg.batch).into_vec()
        };
        gw.iter_mut().for_each(|r| r.fill(0.0));
        gb.fill(0.0);
        let inv = 1.0 / batch.len() as f64;
        for &i in &batch {
            let mut p = softmax(&probe.logits_z(&z[i]));
            p[y[i]] -= 1.0;
            for c in 0..classes {
                let g = p[c] * inv;
                gb[c] += g;
                gw[c].iter_mut().zip(&z[i]).for_each(|(w, v)| *w += g * v);
            }
        }
        let lr = probe_lr(cfg, it);
        for c in 0..classes {
            probe.bias[c] -= lr * gb[c];
            probe.weights[c].iter_mut().zip(&gw[c]).for_each(|(w, g)| *w -= lr * g);
        }
    }
    Ok(probe)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub probe: LinearProbe,
    pub val: Option<ClassMetrics>,
    pub test: ClassMetrics,
}

/// Fit on the training split, report metrics on validation (if given) and test.
pub fn linear_probe(
    train: (&[Vec<f64>], &[usize]),
    val: Option<(&[Vec<f64>], &[usize])>,
    test: (&[Vec<f64>], &[usize]),
    cfg: &ProbeConfig,
) -> Result<ProbeReport, StatError> {
    let all = train.1.iter().chain(test.1).chain(val.iter().flat_map(|v| v.1.iter()));
    let classes = all.copied().max().map_or(0, |m| m + 1).max(2);
    let probe = train_linear_probe(train.0, train.1, classes, cfg)?;
    let eval = |(x, y): (&[Vec<f64>], &[usize])| -> Result<ClassMetrics, StatError> {
        check_xy(x, y)?;
        let pred: Vec<usize> = x.iter().map(|r| probe.predict(r)).collect();
        classification_metrics(&pred, y, classes)
    };
    let val = val.map(eval).transpose()?;
    let test = eval(test)?;
    Ok(ProbeReport { probe, val, test })
}
