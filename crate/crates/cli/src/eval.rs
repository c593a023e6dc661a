//! `probe`, `stats` and `viz`.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use pathfound::evalstat::{
    auroc, bootstrap_ci, classification_metrics, cochran_q, delong_test, holm_adjust, linear_probe, mcnemar_test, read_scores_csv,
    sens_at_spec, spec_at_sens, threshold_predictions, wilson_ci, BootstrapCi, ClassMetrics, McnemarMethod, ProbeConfig, ScoreRow,
};
use pathfound::featviz::{pca_feature_map, write_feature_pngs, VitTokens, VizConfig};
use pathfound::splitter::Split;
use pathfound::store::read_store;

use crate::data::{load_assignments, read_csv, resolve, TileLabel};
use crate::error::{CliError, Result};
use crate::run::{require_file, Run, RunRecord, Seeded};
use crate::train::load_encoder;
use crate::Common;

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeCmdConfig {
    pub probe: ProbeConfig,
}

impl Seeded for ProbeCmdConfig {
    fn seed_mut(&mut self) -> &mut u64 {
        &mut self.probe.seed
    }
}

type Xy = (Vec<Vec<f64>>, Vec<usize>);

pub fn probe(common: &Common, store_path: &Path, labels_path: &Path, assignments_path: &Path) -> Result<RunRecord> {
    let cfg: ProbeCmdConfig = resolve(common, "probe")?;
    require_file(store_path)?;
    let labels: Vec<TileLabel> = read_csv(labels_path)?;
    let assignments = load_assignments(assignments_path)?;
    let (_, records) = read_store(store_path)?;
    let mut run = Run::start("probe", &common.out)?;
    run.input("store", store_path)?;
    run.input("tile_labels", labels_path)?;
    run.input("assignments", assignments_path)?;
    let label_of: HashMap<(&str, u32, u32), usize> =
        labels.iter().map(|l| ((l.slide_id.as_str(), l.x, l.y), l.label as usize)).collect();
    let mut sets: [Xy; 3] = Default::default();
    for r in records {
        let y = *label_of
            .get(&(r.slide_id.as_str(), r.x, r.y))
            .ok_or_else(|| CliError::Input(format!("no label for tile {} ({}, {})", r.slide_id, r.x, r.y)))?;
        let split = assignments
            .get(&r.slide_id)
            .ok_or_else(|| CliError::Input(format!("slide {} has no split assignment", r.slide_id)))?;
        let set = &mut sets[split.index()];
        set.0.push(r.vector);
        set.1.push(y);
    }
    let [train, val, test] = &sets;
    let val_arg = (!val.1.is_empty()).then(|| (val.0.as_slice(), val.1.as_slice()));
    let report = linear_probe((&train.0, &train.1), val_arg, (&test.0, &test.1), &cfg.probe)?;
    let count = |s: Split| sets[s.index()].1.len();
    std::fs::write(
        run.path("probe_report.json"),
        serde_json::to_vec_pretty(&serde_json::json!({
            "tiles": { "train": count(Split::Train), "val": count(Split::Val), "test": count(Split::Test) },
            "val": report.val,
            "test": report.test,
            "probe": report.probe,
        }))?,
    )?;
    run.finish(&cfg, cfg.probe.seed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StatsConfig {
    /// Restrict to rows of this stratum; `None` uses every row.
    pub stratum: Option<String>,
    pub bootstrap: usize,
    pub level: f64,
    /// Operating point for sensitivity-at-specificity and the converse.
    pub target: f64,
    /// Score threshold for binary decisions.
    pub threshold: f64,
    pub seed: u64,
}

impl Default for StatsConfig {
    fn default() -> Self {
        Self {
            stratum: None,
            bootstrap: 1000,
            level: 0.95,
            target: 0.95,
            threshold: 0.5,
            seed: 0,
        }
    }
}

impl Seeded for StatsConfig {
    fn seed_mut(&mut self) -> &mut u64 {
        &mut self.seed
    }
}

#[derive(Debug, Serialize)]
struct ModelStats {
    model: String,
    cases: usize,
    positives: usize,
    auroc: BootstrapCi,
    sens_at_spec: f64,
    spec_at_sens: f64,
    sensitivity: f64,
    sensitivity_ci: (f64, f64),
    specificity: f64,
    specificity_ci: (f64, f64),
    metrics: ClassMetrics,
}

#[derive(Debug, Serialize)]
struct PairStats {
    a: String,
    b: String,
    auroc_diff: f64,
    z: f64,
    p: f64,
    p_holm: f64,
    mcnemar_b: usize,
    mcnemar_c: usize,
    mcnemar_p: f64,
}

pub fn stats(common: &Common, scores: &[std::path::PathBuf]) -> Result<RunRecord> {
    let cfg: StatsConfig = resolve(common, "stats")?;
    let mut run = Run::start("stats", &common.out)?;
    let mut rows: Vec<ScoreRow> = Vec::new();
    for (i, p) in scores.iter().enumerate() {
        require_file(p)?;
        rows.extend(read_scores_csv(p)?);
        run.input(&format!("scores{i}"), p)?;
    }
    if let Some(s) = &cfg.stratum {
        rows.retain(|r| &r.stratum == s);
    }
    let mut by_model: BTreeMap<String, BTreeMap<String, (f64, bool)>> = BTreeMap::new();
    for r in &rows {
        if by_model.entry(r.model.clone()).or_default().insert(r.case_id.clone(), (r.score, r.label == 1)).is_some() {
            return Err(CliError::Input(format!("duplicate case {} for model {}", r.case_id, r.model)));
        }
    }
    if by_model.is_empty() {
        return Err(CliError::Input("no score rows after filtering".into()));
    }
    let mut models = Vec::new();
    for (name, cases) in &by_model {
        let s: Vec<f64> = cases.values().map(|v| v.0).collect();
        let l: Vec<bool> = cases.values().map(|v| v.1).collect();
        let ci = bootstrap_ci(&s, &l, auroc, cfg.bootstrap, cfg.level, cfg.seed)?;
        let pred = threshold_predictions(&s, cfg.threshold);
        let y: Vec<usize> = l.iter().map(|&b| b as usize).collect();
        let pos = l.iter().filter(|&&b| b).count();
        let tp = pred.iter().zip(&l).filter(|(&p, &b)| p == 1 && b).count();
        let tn = pred.iter().zip(&l).filter(|(&p, &b)| p == 0 && !b).count();
        let neg = l.len() - pos;
        models.push(ModelStats {
            model: name.clone(),
            cases: l.len(),
            positives: pos,
            auroc: ci,
            sens_at_spec: sens_at_spec(&s, &l, cfg.target)?,
            spec_at_sens: spec_at_sens(&s, &l, cfg.target)?,
            sensitivity: tp as f64 / pos as f64,
            sensitivity_ci: wilson_ci(tp, pos, cfg.level)?,
            specificity: tn as f64 / neg as f64,
            specificity_ci: wilson_ci(tn, neg, cfg.level)?,
            metrics: classification_metrics(&pred, &y, 2)?,
        });
    }
    let names: Vec<&String> = by_model.keys().collect();
    let mut pairs = Vec::new();
    let mut correct: Vec<Vec<bool>> = Vec::new();
    let common_cases: Vec<&String> = by_model[names[0]]
        .keys()
        .filter(|c| by_model.values().all(|m| m.contains_key(*c)))
        .collect();
    for n in &names {
        let m = &by_model[*n];
        correct.push(common_cases.iter().map(|c| (m[*c].0 >= cfg.threshold) == m[*c].1).collect());
    }
    for i in 0..names.len() {
        for j in i + 1..names.len() {
            let (a, b) = (&by_model[names[i]], &by_model[names[j]]);
            let sa: Vec<f64> = common_cases.iter().map(|c| a[*c].0).collect();
            let sb: Vec<f64> = common_cases.iter().map(|c| b[*c].0).collect();
            let l: Vec<bool> = common_cases.iter().map(|c| a[*c].1).collect();
            let d = delong_test(&sa, &sb, &l)?;
            let m = mcnemar_test(&correct[i], &correct[j], McnemarMethod::Exact)?;
            pairs.push(PairStats {
                a: names[i].clone(),
                b: names[j].clone(),
                auroc_diff: d.diff,
                z: d.z,
                p: d.p,
                p_holm: 0.0,
                mcnemar_b: m.b,
                mcnemar_c: m.c,
                mcnemar_p: m.p,
            });
        }
    }
    let adjusted = holm_adjust(&pairs.iter().map(|p| p.p).collect::<Vec<_>>());
    for (p, a) in pairs.iter_mut().zip(adjusted) {
        p.p_holm = a;
    }
    let cochran = if names.len() >= 2 { Some(cochran_q(&correct)?) } else { None };
    std::fs::write(
        run.path("stats.json"),
        serde_json::to_vec_pretty(&serde_json::json!({
            "stratum": cfg.stratum,
            "models": models,
            "pairs": pairs,
            "cochran_q": cochran,
        }))?,
    )?;
    run.finish(&cfg, cfg.seed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VizCmdConfig {
    pub grid: usize,
    pub threshold: f64,
    pub teacher: bool,
    pub seed: u64,
}

impl Default for VizCmdConfig {
    fn default() -> Self {
        Self {
            grid: 4,
            threshold: 0.5,
            teacher: true,
            seed: 0,
        }
    }
}

impl Seeded for VizCmdConfig {
    fn seed_mut(&mut self) -> &mut u64 {
        &mut self.seed
    }
}

pub fn viz(common: &Common, checkpoint: &Path, image_path: &Path) -> Result<RunRecord> {
    let cfg: VizCmdConfig = resolve(common, "viz")?;
    require_file(image_path)?;
    let img = image::open(image_path)?.to_rgb8();
    let (ssl, store) = load_encoder(checkpoint, cfg.teacher)?;
    let mut run = Run::start("viz", &common.out)?;
    run.input("checkpoint", checkpoint)?;
    run.input("image", image_path)?;
    let model = VitTokens {
        store: &store,
        cfg: &ssl.vit,
        mean: ssl.views.mean,
        std: ssl.views.std,
    };
    let maps = pca_feature_map(
        &img,
        &model,
        &VizConfig {
            grid: cfg.grid,
            threshold: cfg.threshold,
        },
    )?;
    let stem = image_path.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
    write_feature_pngs(&run.out, stem, &img, &maps)?;
    std::fs::write(
        run.path("viz.json"),
        serde_json::to_vec_pretty(&serde_json::json!({
            "side": maps.side,
            "explained": maps.explained,
            "pc1_fraction": maps.mask1.iter().filter(|&&m| m).count() as f64 / maps.mask1.len() as f64,
            "pc2_fraction": maps.mask2.iter().filter(|&&m| m).count() as f64 / maps.mask2.len() as f64,
        }))?,
    )?;
    run.finish(&cfg, cfg.seed)
}
