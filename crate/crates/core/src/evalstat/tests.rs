use proptest::prelude::*;
use rand::Rng;
use statrs::distribution::{ContinuousCDF, Normal};

use super::*;
use crate::rng::keyed_rng;

fn random_case(seed: u64, n: usize, levels: u32) -> (Vec<f64>, Vec<bool>) {
    let mut rng = keyed_rng(seed, &[]);
    loop {
        let labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
        if labels.iter().any(|&l| l) && labels.iter().any(|&l| !l) {
            let scores = (0..n).map(|_| rng.random_range(0..levels) as f64 / levels as f64).collect();
            return (scores, labels);
        }
    }
}

fn brute_auroc(s: &[f64], l: &[bool]) -> f64 {
    let (mut num, mut pairs) = (0.0, 0.0);
    for i in (0..s.len()).filter(|&i| l[i]) {
        for j in (0..s.len()).filter(|&j| !l[j]) {
            pairs += 1.0;
            if s[i] > s[j] {
                num += 1.0;
            } else if s[i] == s[j] {
                num += 0.5;
            }
        }
    }
    num / pairs
}

fn brute_sens_at_spec(s: &[f64], l: &[bool], target: f64) -> f64 {
    let mut thresholds: Vec<f64> = s.to_vec();
    thresholds.push(f64::INFINITY);
    let p = l.iter().filter(|&&x| x).count() as f64;
    let n = l.len() as f64 - p;
    let mut best: Option<(f64, f64)> = None;
    for &t in &thresholds {
        let tn = s.iter().zip(l).filter(|(&v, &y)| !y && v < t).count() as f64;
        let tp = s.iter().zip(l).filter(|(&v, &y)| y && v >= t).count() as f64;
        if tn / n >= target && best.is_none_or(|(bt, _)| t < bt) {
            best = Some((t, tp / p));
        }
    }
    best.unwrap().1
}

#[test]
fn auroc_trivial_cases() {
    let l = [true, true, false, false];
    assert_eq!(auroc(&[0.9, 0.8, 0.1, 0.2], &l).unwrap(), 1.0);
    assert_eq!(auroc(&[0.5; 4], &l).unwrap(), 0.5);
    assert_eq!(auroc(&[0.5; 3], &[true; 3]), Err(StatError::SingleClass { pos: 3, neg: 0 }));
}

#[test]
fn auroc_equals_pair_count_on_random_sets() {
    for seed in 0..1000 {
        let (s, l) = random_case(seed, 5 + (seed % 60) as usize, 10);
        assert_eq!(auroc(&s, &l).unwrap(), brute_auroc(&s, &l), "seed {seed}");
    }
}

#[test]
fn sens_at_spec_equals_threshold_sweep() {
    for seed in 0..1000 {
        let (s, l) = random_case(seed + 5000, 5 + (seed % 50) as usize, 12);
        for target in [0.5, 0.8, 0.95] {
            assert_eq!(sens_at_spec(&s, &l, target).unwrap(), brute_sens_at_spec(&s, &l, target));
        }
    }
}

#[test]
fn sens_spec_trivial_cases() {
    let l = [true, true, false, false];
    assert_eq!(sens_at_spec(&[0.9, 0.8, 0.1, 0.2], &l, 0.95).unwrap(), 1.0);
    assert_eq!(sens_at_spec(&[0.5; 4], &l, 0.95).unwrap(), 0.0);
    assert_eq!(spec_at_sens(&[0.9, 0.8, 0.1, 0.2], &l, 0.95).unwrap(), 1.0);
    assert_eq!(spec_at_sens(&[0.5; 4], &l, 0.95).unwrap(), 0.0);
}

proptest! {
    #[test]
    fn auroc_negation_and_monotone_transform(seed in 0u64..10_000) {
        let mut rng = keyed_rng(seed, &[1]);
        let l: Vec<bool> = (0..20).map(|i| i % 3 == 0).collect();
        let s: Vec<f64> = (0..20).map(|_| rng.random::<f64>()).collect();
        let a = auroc(&s, &l).unwrap();
        let neg: Vec<f64> = s.iter().map(|v| -v).collect();
        prop_assert!((a + auroc(&neg, &l).unwrap() - 1.0).abs() < 1e-12);
        let t: Vec<f64> = s.iter().map(|v| (3.0 * v).exp() + 2.0).collect();
        prop_assert_eq!(a, auroc(&t, &l).unwrap());
    }
}

#[test]
fn metrics_trivial_cases() {
    let m = classification_metrics(&[0, 1, 2], &[0, 1, 2], 3).unwrap();
    assert_eq!((m.accuracy, m.balanced_accuracy, m.weighted_f1), (1.0, 1.0, 1.0));
    let m = classification_metrics(&[0; 4], &[0, 0, 1, 1], 2).unwrap();
    assert_eq!(m.balanced_accuracy, 0.5);
    assert_eq!(threshold_predictions(&[0.49, 0.5, 0.9], 0.5), vec![0, 1, 1]);
}

#[test]
fn nine_class_metrics_match_scalar_oracle() {
    let mut rng = keyed_rng(3, &[]);
    let k = 9;
    let labels: Vec<usize> = (0..400).map(|_| rng.random_range(0..k)).collect();
    let pred: Vec<usize> = labels
        .iter()
        .map(|&l| if rng.random_bool(0.6) { l } else { rng.random_range(0..k) })
        .collect();
    let m = classification_metrics(&pred, &labels, k).unwrap();
    let n = labels.len() as f64;
    let acc = pred.iter().zip(&labels).filter(|(p, l)| p == l).count() as f64 / n;
    let (mut bal, mut wf1) = (0.0, 0.0);
    for c in 0..k {
        let tp = (0..400).filter(|&i| labels[i] == c && pred[i] == c).count() as f64;
        let fp = (0..400).filter(|&i| labels[i] != c && pred[i] == c).count() as f64;
        let fneg = (0..400).filter(|&i| labels[i] == c && pred[i] != c).count() as f64;
        let support = tp + fneg;
        bal += tp / support / k as f64;
        let prec = tp / (tp + fp);
        let rec = tp / support;
        wf1 += support / n * (2.0 * prec * rec / (prec + rec));
    }
    assert!((m.accuracy - acc).abs() < 1e-12);
    assert!((m.balanced_accuracy - bal).abs() < 1e-12);
    assert!((m.weighted_f1 - wf1).abs() < 1e-12);
}

/// Variance of the AUROC difference from separate positive-only and
/// negative-only case resampling; each scaled to the unbiased estimator.
pub(crate) fn resampling_delong_p(a: &[f64], b: &[f64], l: &[bool], reps: usize, seed: u64) -> f64 {
    let pos: Vec<usize> = (0..l.len()).filter(|&i| l[i]).collect();
    let neg: Vec<usize> = (0..l.len()).filter(|&i| !l[i]).collect();
    let diff = |p: &[usize], n: &[usize]| {
        let mut s = 0.0;
        for &i in p {
            for &j in n {
                let ka = if a[i] > a[j] { 1.0 } else if a[i] == a[j] { 0.5 } else { 0.0 };
                let kb = if b[i] > b[j] { 1.0 } else if b[i] == b[j] { 0.5 } else { 0.0 };
                s += ka - kb;
            }
        }
        s / (p.len() * n.len()) as f64
    };
    let d0 = diff(&pos, &neg);
    let var_of = |fixed_pos: bool, key: u64| {
        let mut rng = keyed_rng(seed, &[key]);
        let (mut s1, mut s2) = (0.0, 0.0);
        for _ in 0..reps {
            let d = if fixed_pos {
                let n: Vec<usize> = (0..neg.len()).map(|_| neg[rng.random_range(0..neg.len())]).collect();
                diff(&pos, &n)
            } else {
                let p: Vec<usize> = (0..pos.len()).map(|_| pos[rng.random_range(0..pos.len())]).collect();
                diff(&p, &neg)
            };
            s1 += d;
            s2 += d * d;
        }
        let m = s1 / reps as f64;
        s2 / reps as f64 - m * m
    };
    let (m, n) = (pos.len() as f64, neg.len() as f64);
    let var = var_of(false, 1) * m / (m - 1.0) + var_of(true, 2) * n / (n - 1.0);
    2.0 * Normal::new(0.0, 1.0).unwrap().cdf(-d0.abs() / var.sqrt())
}

pub(crate) fn delong_case(seed: u64, n: usize) -> (Vec<f64>, Vec<f64>, Vec<bool>) {
    let mut rng = keyed_rng(seed, &[2]);
    let l: Vec<bool> = (0..n).map(|i| i % 2 == 0).collect();
    let a = l.iter().map(|&y| f64::from(u8::from(y)) * 0.9 + rng.random::<f64>()).collect();
    let b = l.iter().map(|&y| f64::from(u8::from(y)) * 0.5 + rng.random::<f64>()).collect();
    (a, b, l)
}

#[test]
fn delong_matches_resampling_oracle() {
    let (a, b, l) = delong_case(1, 30);
    let r = delong_test(&a, &b, &l).unwrap();
    let oracle = resampling_delong_p(&a, &b, &l, 100_000, 9);
    assert!((r.p - oracle).abs() < 0.02, "{} vs {oracle}", r.p);
}

#[test]
fn delong_trivial_cases() {
    let (a, _, l) = delong_case(2, 20);
    let r = delong_test(&a, &a, &l).unwrap();
    assert_eq!((r.diff, r.p), (0.0, 1.0));
    let (a, b, l) = delong_case(3, 24);
    let ab = delong_test(&a, &b, &l).unwrap();
    let ba = delong_test(&b, &a, &l).unwrap();
    assert_eq!(ab.p, ba.p);
    assert_eq!(ab.auc_a, auroc(&a, &l).unwrap());
    assert!(delong_test(&a, &b, &vec![true; 24]).is_err());
}

#[test]
fn delong_null_p_values_are_roughly_uniform() {
    let mut ps: Vec<f64> = (0..1000)
        .map(|t| {
            let mut rng = keyed_rng(t, &[3]);
            let l: Vec<bool> = (0..40).map(|i| i % 2 == 0).collect();
            let a: Vec<f64> = l.iter().map(|&y| f64::from(u8::from(y)) + 1.5 * rng.random::<f64>()).collect();
            let b: Vec<f64> = l.iter().map(|&y| f64::from(u8::from(y)) + 1.5 * rng.random::<f64>()).collect();
            delong_test(&a, &b, &l).unwrap().p
        })
        .collect();
    ps.sort_by(f64::total_cmp);
    let ks = ps
        .iter()
        .enumerate()
        .map(|(i, &p)| ((i + 1) as f64 / 1000.0 - p).abs().max((p - i as f64 / 1000.0).abs()))
        .fold(0.0, f64::max);
    assert!(ks < 0.1, "KS {ks}");
}

pub(crate) fn holm_oracle(p: &[f64]) -> Vec<f64> {
    let m = p.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| p[a].partial_cmp(&p[b]).unwrap());
    let mut out = vec![0.0; m];
    for i in 0..m {
        let mut v: f64 = 0.0;
        for j in 0..=i {
            v = v.max(((m - j) as f64 * p[order[j]]).min(1.0));
        }
        out[order[i]] = v;
    }
    out
}

#[test]
fn holm_examples_and_subsets() {
    assert_eq!(holm_adjust(&[0.2]), vec![0.2]);
    assert_eq!(holm_adjust(&[1.0, 1.0]), vec![1.0, 1.0]);
    let h = holm_adjust(&[0.01, 0.04, 0.03]);
    for (a, b) in h.iter().zip([0.03, 0.06, 0.06]) {
        assert!((a - b).abs() < 1e-15);
    }
    let base = [0.003, 0.04, 0.012, 0.3];
    for mask in 1u32..16 {
        let sub: Vec<f64> = (0..4).filter(|i| mask >> i & 1 == 1).map(|i| base[i]).collect();
        assert_eq!(holm_adjust(&sub), holm_oracle(&sub));
    }
}

proptest! {
    #[test]
    fn holm_monotone_and_above_raw(p in proptest::collection::vec(0.0f64..1.0, 1..12)) {
        let h = holm_adjust(&p);
        let mut idx: Vec<usize> = (0..p.len()).collect();
        idx.sort_by(|&a, &b| p[a].total_cmp(&p[b]));
        for w in idx.windows(2) {
            prop_assert!(h[w[0]] <= h[w[1]]);
        }
        for (a, b) in h.iter().zip(&p) {
            prop_assert!(a >= b && *a <= 1.0);
        }
    }
}

#[test]
fn mcnemar_cases() {
    assert_eq!(mcnemar_from_counts(5, 0, McnemarMethod::Exact).p, 0.0625);
    assert_eq!(mcnemar_from_counts(4, 4, McnemarMethod::Exact).p, 1.0);
    assert_eq!(mcnemar_from_counts(0, 0, McnemarMethod::Exact).p, 1.0);
    let big = mcnemar_from_counts(700, 600, McnemarMethod::Exact).p;
    let chi = mcnemar_from_counts(700, 600, McnemarMethod::ChiSquared).p;
    assert!((big - chi).abs() < 0.01, "{big} {chi}");
    let r = mcnemar_test(&[true, true, false, true], &[false, true, true, false], McnemarMethod::ChiSquaredCorrected)
        .unwrap();
    assert_eq!((r.b, r.c), (2, 1));
    assert_eq!(r.statistic, Some(0.0));
}

#[test]
fn cochran_cases() {
    let same: Vec<Vec<bool>> = (0..10).map(|i| vec![i % 3 == 0; 3]).collect();
    let q = cochran_q(&same).unwrap();
    assert_eq!((q.q, q.p), (0.0, 1.0));
    let zeros = vec![vec![false; 4]; 6];
    assert_eq!(cochran_q(&zeros).unwrap().q, 0.0);
    let mut rng = keyed_rng(4, &[]);
    for _ in 0..50 {
        let m: Vec<Vec<bool>> = (0..40).map(|_| vec![rng.random_bool(0.6), rng.random_bool(0.4)]).collect();
        let first: Vec<bool> = m.iter().map(|r| r[0]).collect();
        let second: Vec<bool> = m.iter().map(|r| r[1]).collect();
        let (b, c) = mcnemar_counts(&first, &second).unwrap();
        let want = (b as f64 - c as f64).powi(2) / (b + c) as f64;
        let q = cochran_q(&m).unwrap();
        assert!((q.q - want).abs() < 1e-12);
        let chi = mcnemar_from_counts(b, c, McnemarMethod::ChiSquared);
        assert!((q.p - chi.p).abs() < 1e-12);
    }
    assert!(cochran_q(&[vec![true]]).is_err());
}

pub(crate) fn wilson_oracle(k: f64, n: f64) -> (f64, f64) {
    let z = 1.959963984540054;
    let p = k / n;
    let c = (p + z * z / (2.0 * n)) / (1.0 + z * z / n);
    let h = z / (1.0 + z * z / n) * (p * (1.0 - p) / n + z * z / (4.0 * n * n)).sqrt();
    (c - h, c + h)
}

#[test]
fn wilson_cases() {
    let (lo, hi) = wilson_ci(95, 100, 0.95).unwrap();
    let (elo, ehi) = wilson_oracle(95.0, 100.0);
    assert!((lo - elo).abs() < 1e-12 && (hi - ehi).abs() < 1e-12);
    assert_eq!(wilson_ci(0, 10, 0.95).unwrap().0, 0.0);
    assert_eq!(wilson_ci(10, 10, 0.95).unwrap().1, 1.0);
    assert!(wilson_ci(1, 0, 0.95).is_err());
}

proptest! {
    #[test]
    fn wilson_contains_estimate(n in 1usize..500, frac in 0.0f64..=1.0) {
        let k = ((n as f64) * frac).round() as usize;
        let (lo, hi) = wilson_ci(k, n, 0.95).unwrap();
        let p = k as f64 / n as f64;
        prop_assert!((0.0..=1.0).contains(&lo) && (0.0..=1.0).contains(&hi));
        prop_assert!(lo <= p && p <= hi);
    }
}

#[test]
fn bootstrap_cases() {
    let s = [0.9, 0.8, 0.7, 0.1, 0.2, 0.3];
    let l = [true, true, true, false, false, false];
    let ci = bootstrap_ci(&s, &l, auroc, 1000, 0.95, 1).unwrap();
    assert_eq!((ci.lo, ci.hi, ci.estimate), (1.0, 1.0, 1.0));
    let (s, l) = random_case(7, 200, 1000);
    let a = bootstrap_ci(&s, &l, auroc, 1000, 0.95, 3).unwrap();
    assert_eq!(a, bootstrap_ci(&s, &l, auroc, 1000, 0.95, 3).unwrap());
    let reference = bootstrap_ci(&s, &l, auroc, 100_000, 0.95, 99).unwrap();
    assert!((a.lo - reference.lo).abs() < 0.01 && (a.hi - reference.hi).abs() < 0.01);
    assert_eq!(percentile(&[1.0, 2.0, 3.0, 4.0], 0.5), 2.5);
}

#[test]
fn probe_on_separable_and_constant_data() {
    let mut rng = keyed_rng(8, &[]);
    let mk = |rng: &mut rand_chacha::ChaCha8Rng, n: usize| {
        let mut x = Vec::new();
        let mut y = Vec::new();
        for i in 0..n {
            let c = i % 2;
            let off = if c == 1 { 2.0 } else { -2.0 };
            x.push(vec![off + rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]);
            y.push(c);
        }
        (x, y)
    };
    let (tx, ty) = mk(&mut rng, 200);
    let (vx, vy) = mk(&mut rng, 50);
    let cfg = ProbeConfig {
        iterations: 500,
        batch: 64,
        ..ProbeConfig::default()
    };
    let r = linear_probe((&tx, &ty), Some((&vx, &vy)), (&vx, &vy), &cfg).unwrap();
    assert_eq!(r.test.accuracy, 1.0);
    assert_eq!(r, linear_probe((&tx, &ty), Some((&vx, &vy)), (&vx, &vy), &cfg).unwrap());

    let cx = vec![vec![1.0, 1.0]; 30];
    let cy: Vec<usize> = (0..30).map(|i| usize::from(i < 10)).collect();
    let r = linear_probe((&cx, &cy), None, (&cx, &cy), &cfg).unwrap();
    assert!((r.test.accuracy - 20.0 / 30.0).abs() < 1e-12);
}

#[test]
fn probe_schedule_and_errors() {
    let cfg = ProbeConfig::default();
    assert_eq!(probe_lr(&cfg, 0), 0.01);
    assert_eq!(probe_lr(&cfg, cfg.iterations - 1), 0.0);
    let x = vec![vec![0.0]; 3];
    assert_eq!(
        train_linear_probe(&x, &[0, 0, 0], 2, &cfg),
        Err(StatError::MissingClass(1))
    );
}

#[test]
fn scores_csv_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("s.csv");
    let rows = vec![ScoreRow {
        case_id: "c1".into(),
        model: "m".into(),
        score: 0.25,
        label: 1,
        stratum: "breast".into(),
    }];
    write_scores_csv(&p, &rows).unwrap();
    assert_eq!(read_scores_csv(&p).unwrap(), rows);
}
