//! Slide-level train/validation/test assignment balancing slide and tile
//! fractions per (tissue group, label) stratum.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Hypergeometric};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::rng::keyed_rng;

#[derive(Debug, thiserror::Error)]
pub enum SplitError {
    #[error("empty split problem")]
    Empty,
    #[error("invalid split problem: {0}")]
    Invalid(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSlide {
    pub slide_id: String,
    pub tissue_group: String,
    pub label: String,
    pub cancer_tiles: u64,
    pub benign_tiles: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitConfig {
    pub ratios: [f64; 3],
    /// Maximum number of search rounds per restart.
    pub iterations: usize,
    /// Stop a restart after this many rounds without improvement.
    pub patience: usize,
    pub restarts: usize,
    /// Random moves proposed per stratum and round.
    pub neighbourhood: usize,
    /// Strata with fewer slides go entirely to training.
    pub min_stratum: usize,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            ratios: [0.7, 0.1, 0.2],
            iterations: 5000,
            patience: 100,
            restarts: 4,
            neighbourhood: 16,
            min_stratum: 3,
            seed: 0,
        }
    }
}

impl SplitConfig {
    pub fn validate(&self) -> Result<(), SplitError> {
        if self.ratios.iter().any(|&r| !(0.0..=1.0).contains(&r)) || (self.ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(SplitError::Invalid("ratios must be non-negative and sum to 1".into()));
        }
        if self.restarts == 0 || self.neighbourhood == 0 {
            return Err(SplitError::Invalid("restarts and neighbourhood must be positive".into()));
        }
        Ok(())
    }
}

/// Lower median (floor of the midpoint average for even counts).
pub fn floor_median(values: &[u64]) -> u64 {
    let mut v = values.to_vec();
    v.sort_unstable();
    let n = v.len();
    if n == 0 {
        return 0;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2
    }
}

/// Draw `k` items uniformly without replacement from pooled per-slide counts;
/// returns how many come from each slide.
pub fn draw_from_pools<R: Rng>(rng: &mut R, counts: &[u64], k: u64) -> Vec<u64> {
    let mut remaining_total: u64 = counts.iter().sum();
    let mut remaining_k = k.min(remaining_total);
    let mut out = Vec::with_capacity(counts.len());
    for &c in counts {
        if remaining_k == 0 || c == 0 {
            out.push(0);
            remaining_total -= c;
            continue;
        }
        let take = if c == remaining_total {
            remaining_k
        } else {
            Hypergeometric::new(remaining_total, c, remaining_k)
                .expect("valid hypergeometric")
                .sample(rng)
        };
        out.push(take);
        remaining_total -= c;
        remaining_k -= take;
    }
    out
}

/// Cap each tissue group's cancer tiles at the median of per-group totals by
/// uniform subsampling. Returns adjusted per-slide counts.
pub fn cap_cancer_tiles(slides: &[SplitSlide], seed: u64) -> Vec<u64> {
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, s) in slides.iter().enumerate() {
        groups.entry(s.tissue_group.as_str()).or_default().push(i);
    }
    let totals: Vec<u64> = groups
        .values()
        .map(|idx| idx.iter().map(|&i| slides[i].cancer_tiles).sum())
        .collect();
    let cap = floor_median(&totals);
    let mut out: Vec<u64> = slides.iter().map(|s| s.cancer_tiles).collect();
    for ((name, idx), &total) in groups.iter().zip(&totals) {
        if total > cap {
            let mut rng = keyed_rng(seed, &[crate::rng::hash_str(name)]);
            let counts: Vec<u64> = idx.iter().map(|&i| slides[i].cancer_tiles).collect();
            for (&i, k) in idx.iter().zip(draw_from_pools(&mut rng, &counts, cap)) {
                out[i] = k;
            }
        }
    }
    out
}

#[derive(Debug, Clone)]
struct Stratum {
    members: Vec<usize>,
    tiles: Vec<u64>,
    total_tiles: u64,
    fixed: bool,
}

/// Prepared problem: strata and the per-slide tile counts used for balancing.
#[derive(Debug, Clone)]
pub struct SplitProblem {
    pub slides: Vec<SplitSlide>,
    pub capped_cancer: Vec<u64>,
    strata: Vec<Stratum>,
    ratios: [f64; 3],
}

impl SplitProblem {
    pub fn new(slides: Vec<SplitSlide>, cfg: &SplitConfig) -> Result<Self, SplitError> {
        cfg.validate()?;
        if slides.is_empty() {
            return Err(SplitError::Empty);
        }
        let mut seen = std::collections::HashSet::new();
        if let Some(dup) = slides.iter().find(|s| !seen.insert(&s.slide_id)) {
            return Err(SplitError::Invalid(format!("duplicate slide {}", dup.slide_id)));
        }
        let capped = cap_cancer_tiles(&slides, cfg.seed);
        let mut by: BTreeMap<(&str, &str), Vec<usize>> = BTreeMap::new();
        for (i, s) in slides.iter().enumerate() {
            by.entry((s.tissue_group.as_str(), s.label.as_str())).or_default().push(i);
        }
        let strata = by
            .into_iter()
            .map(|((g, l), members)| {
                let tiles: Vec<u64> = members.iter().map(|&i| capped[i] + slides[i].benign_tiles).collect();
                let fixed = members.len() < cfg.min_stratum;
                if fixed {
                    log::info!("stratum ({g}, {l}) has {} slides; assigned to train", members.len());
                }
                Stratum {
                    total_tiles: tiles.iter().sum(),
                    members,
                    tiles,
                    fixed,
                }
            })
            .collect();
        Ok(Self {
            slides,
            capped_cancer: capped,
            strata,
            ratios: cfg.ratios,
        })
    }

    /// Tiles per slide: capped cancer tiles plus benign tiles.
    pub fn slide_tiles(&self, i: usize) -> u64 {
        self.capped_cancer[i] + self.slides[i].benign_tiles
    }

    fn stratum_deviation(&self, s: &Stratum, assign: &[Split]) -> f64 {
        let mut n = [0usize; 3];
        let mut t = [0u64; 3];
        for (&i, &tiles) in s.members.iter().zip(&s.tiles) {
            let k = assign[i].index();
            n[k] += 1;
            t[k] += tiles;
        }
        let total = s.members.len() as f64;
        let mut dev = 0.0;
        for k in 0..3 {
            dev += (n[k] as f64 / total - self.ratios[k]).abs();
            if s.total_tiles > 0 {
                dev += (t[k] as f64 / s.total_tiles as f64 - self.ratios[k]).abs();
            }
        }
        dev
    }

    /// Sum over strata and splits of absolute slide- and tile-fraction deviations.
    pub fn deviation(&self, assign: &[Split]) -> f64 {
        self.strata.iter().map(|s| self.stratum_deviation(s, assign)).sum()
    }

    /// Every stratum keeps a training slide; small strata stay whole in training.
    pub fn feasible(&self, assign: &[Split]) -> bool {
        self.strata.iter().all(|s| {
            if s.fixed {
                s.members.iter().all(|&i| assign[i] == Split::Train)
            } else {
                s.members.iter().any(|&i| assign[i] == Split::Train)
            }
        })
    }

    /// Indices of the slides in each stratum with at least `min_stratum` members.
    pub fn free_strata(&self) -> Vec<Vec<usize>> {
        self.strata.iter().filter(|s| !s.fixed).map(|s| s.members.clone()).collect()
    }
}

#[derive(Debug, Clone)]
pub struct SplitResult {
    pub assignment: Vec<Split>,
    pub deviation: f64,
    /// Deviation after each round of the winning restart.
    pub history: Vec<f64>,
    pub restart: usize,
}

fn initial<R: Rng>(p: &SplitProblem, rng: &mut R) -> Vec<Split> {
    let mut assign = vec![Split::Train; p.slides.len()];
    for s in p.strata.iter().filter(|s| !s.fixed) {
        let mut m = s.members.clone();
        m.shuffle(rng);
        let n = m.len() as f64;
        let n_val = (p.ratios[1] * n).round() as usize;
        let n_test = ((p.ratios[2] * n).round() as usize).min(m.len() - 1 - n_val.min(m.len() - 1));
        let n_val = n_val.min(m.len() - 1);
        for (j, &i) in m.iter().enumerate() {
            assign[i] = if j < n_val {
                Split::Val
            } else if j < n_val + n_test {
                Split::Test
            } else {
                Split::Train
            };
        }
    }
    assign
}

fn search(p: &SplitProblem, cfg: &SplitConfig, restart: usize) -> SplitResult {
    let mut rng = keyed_rng(cfg.seed, &[restart as u64]);
    let mut assign = initial(p, &mut rng);
    let free: Vec<&Stratum> = p.strata.iter().filter(|s| !s.fixed).collect();
    let mut devs: Vec<f64> = free.iter().map(|s| p.stratum_deviation(s, &assign)).collect();
    let mut history = vec![p.deviation(&assign)];
    let mut stale = 0;
    for _ in 0..cfg.iterations {
        let mut improved = false;
        for (si, s) in free.iter().enumerate() {
            let n = s.members.len();
            let mut best: Option<(f64, Vec<(usize, Split)>)> = None;
            for _ in 0..cfg.neighbourhood {
                let mut changes: Vec<(usize, Split)> = Vec::new();
                if rng.random_bool(0.5) {
                    let k = rng.random_range(1..=n.min(4));
                    for j in rand::seq::index::sample(&mut rng, n, k) {
                        changes.push((s.members[j], Split::ALL[rng.random_range(0..3)]));
                    }
                } else {
                    let a = s.members[rng.random_range(0..n)];
                    let b = s.members[rng.random_range(0..n)];
                    changes.push((a, assign[b]));
                    changes.push((b, assign[a]));
                }
                let old: Vec<(usize, Split)> = changes.iter().map(|&(i, _)| (i, assign[i])).collect();
                for &(i, sp) in &changes {
                    assign[i] = sp;
                }
                if s.members.iter().any(|&i| assign[i] == Split::Train) {
                    let d = p.stratum_deviation(s, &assign);
                    if d < devs[si] - 1e-12 && best.as_ref().is_none_or(|(bd, _)| d < *bd) {
                        best = Some((d, changes.clone()));
                    }
                }
                for &(i, sp) in old.iter().rev() {
                    assign[i] = sp;
                }
            }
            if let Some((d, changes)) = best {
                for (i, sp) in changes {
                    assign[i] = sp;
                }
                devs[si] = d;
                improved = true;
            }
        }
        let total = p.deviation(&assign);
        debug_assert!(total <= history.last().copied().unwrap_or(f64::INFINITY) + 1e-12);
        history.push(total);
        if improved {
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    SplitResult {
        deviation: p.deviation(&assign),
        assignment: assign,
        history,
        restart,
    }
}

/// Random-restart greedy search; the best restart wins (earliest on ties).
pub fn optimize_split(problem: &SplitProblem, cfg: &SplitConfig) -> Result<SplitResult, SplitError> {
    cfg.validate()?;
    let runs: Vec<SplitResult> = (0..cfg.restarts).into_par_iter().map(|r| search(problem, cfg, r)).collect();
    Ok(runs
        .into_iter()
        .reduce(|a, b| if b.deviation < a.deviation - 1e-12 { b } else { a })
        .expect("at least one restart"))
}

/// Per-slide benign tiles sampled so that each (tissue group, split) has as many
/// benign as capped cancer tiles, or its whole benign pool when smaller.
pub fn balance_benign(problem: &SplitProblem, assignment: &[Split], seed: u64) -> Vec<u64> {
    let mut cells: BTreeMap<(&str, Split), Vec<usize>> = BTreeMap::new();
    for (i, s) in problem.slides.iter().enumerate() {
        cells.entry((s.tissue_group.as_str(), assignment[i])).or_default().push(i);
    }
    let mut out = vec![0u64; problem.slides.len()];
    for ((group, split), idx) in cells {
        let target: u64 = idx.iter().map(|&i| problem.capped_cancer[i]).sum();
        let pool: Vec<u64> = idx.iter().map(|&i| problem.slides[i].benign_tiles).collect();
        let available: u64 = pool.iter().sum();
        if available < target {
            log::info!("group {group} {}: benign pool {available} below cancer count {target}", split.name());
        }
        let mut rng = keyed_rng(seed, &[crate::rng::hash_str(group), split.index() as u64, 0x6265]);
        for (&i, k) in idx.iter().zip(draw_from_pools(&mut rng, &pool, target)) {
            out[i] = k;
        }
    }
    out
}

pub fn read_split_csv(path: &Path) -> Result<Vec<SplitSlide>, SplitError> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<Result<Vec<SplitSlide>, _>>()?)
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct AssignmentRow {
    pub slide_id: String,
    pub split: Split,
}

pub fn write_assignment_csv(path: &Path, slides: &[SplitSlide], assignment: &[Split]) -> Result<(), SplitError> {
    let mut w = csv::Writer::from_path(path)?;
    for (s, &a) in slides.iter().zip(assignment) {
        w.serialize(AssignmentRow {
            slide_id: s.slide_id.clone(),
            split: a,
        })?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn read_assignment_csv(path: &Path) -> Result<Vec<AssignmentRow>, SplitError> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<Result<Vec<AssignmentRow>, _>>()?)
}

/// Deterministic synthetic corpus: `groups` tissue groups x 2 labels x `per_stratum` slides.
pub fn synthetic_split_corpus(groups: usize, per_stratum: usize, seed: u64) -> Vec<SplitSlide> {
    let mut rng = keyed_rng(seed, &[0x73706c]);
    let mut out = Vec::new();
    for g in 0..groups {
        for label in ["benign", "cancer"] {
            for k in 0..per_stratum {
                let cancer = if label == "cancer" { rng.random_range(50..400) * (g as u64 + 1) } else { 0 };
                out.push(SplitSlide {
                    slide_id: format!("g{g}-{label}-{k:03}"),
                    tissue_group: format!("group{g}"),
                    label: label.to_string(),
                    cancer_tiles: cancer,
                    benign_tiles: rng.random_range(100..900),
                });
            }
        }
    }
    out
}
