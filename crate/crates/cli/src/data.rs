//! `synth`, `tile` and `split`, plus the tabular files they exchange.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use pathfound::corpus::{tile_cancer_fraction, write_corpus, CorpusConfig, CANCER_KEY, GROUP_KEY};
use pathfound::slide::SlideManifest;
use pathfound::splitter::{
    balance_benign, optimize_split, read_assignment_csv, read_split_csv, write_assignment_csv, Split, SplitConfig, SplitProblem,
    SplitSlide,
};
use pathfound::tiler::{extract_tiles, read_tiles_jsonl, write_tiles_jsonl, TileRef, DEFAULT_MIN_TISSUE};

use crate::error::{CliError, Result};
use crate::run::{load_config, require_file, Run, RunRecord, Seeded};
use crate::Common;

impl Seeded for CorpusConfig {
    fn seed_mut(&mut self) -> &mut u64 {
        &mut self.seed
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitUnit {
    #[default]
    Slide,
    /// Split whole specimens; every slide follows its specimen.
    Specimen,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitCmdConfig {
    pub split: SplitConfig,
    pub unit: SplitUnit,
}

impl Seeded for SplitCmdConfig {
    fn seed_mut(&mut self) -> &mut u64 {
        &mut self.split.seed
    }
}

/// One row per specimen: tile counts summed, tissue group of the first
/// slide and the greatest slide label.
pub fn specimen_rows(slides: &[SplitSlide], manifest: &SlideManifest) -> Result<Vec<SplitSlide>> {
    let mut rows: Vec<SplitSlide> = Vec::new();
    let mut at: BTreeMap<String, usize> = BTreeMap::new();
    for s in slides {
        let e = manifest
            .get(&s.slide_id)
            .ok_or_else(|| CliError::Input(format!("slide {} is not in the manifest", s.slide_id)))?;
        match at.get(&e.specimen_id) {
            Some(&i) => {
                let r = &mut rows[i];
                r.cancer_tiles += s.cancer_tiles;
                r.benign_tiles += s.benign_tiles;
                if s.label > r.label {
                    r.label = s.label.clone();
                }
            }
            None => {
                at.insert(e.specimen_id.clone(), rows.len());
                rows.push(SplitSlide {
                    slide_id: e.specimen_id.clone(),
                    ..s.clone()
                });
            }
        }
    }
    Ok(rows)
}

pub(crate) fn resolve<C>(common: &Common, command: &str) -> Result<C>
where
    C: serde::de::DeserializeOwned + Default + Seeded,
{
    let mut cfg: C = load_config(common.config.as_deref(), command)?;
    if let Some(s) = common.seed {
        *cfg.seed_mut() = s;
    }
    Ok(cfg)
}

pub fn synth(common: &Common) -> Result<RunRecord> {
    let mut cfg: CorpusConfig = resolve(common, "synth")?;
    let seed = *cfg.seed_mut();
    let run = Run::start("synth", &common.out)?;
    write_corpus(&cfg, &run.out)?;
    run.finish(&cfg, seed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TileConfig {
    pub min_tissue: f64,
    /// Tiles with at least this fraction of cancer-mask pixels are labelled cancer.
    pub cancer_threshold: f64,
    pub group_key: String,
    pub label_key: String,
    pub seed: u64,
}

impl Default for TileConfig {
    fn default() -> Self {
        Self {
            min_tissue: DEFAULT_MIN_TISSUE,
            cancer_threshold: 0.5,
            group_key: GROUP_KEY.into(),
            label_key: CANCER_KEY.into(),
            seed: 0,
        }
    }
}

impl Seeded for TileConfig {
    fn seed_mut(&mut self) -> &mut u64 {
        &mut self.seed
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TileLabel {
    pub slide_id: String,
    pub x: u32,
    pub y: u32,
    pub cancer_fraction: f64,
    pub label: u8,
}

pub fn load_manifest(path: &Path) -> Result<SlideManifest> {
    require_file(path)?;
    Ok(SlideManifest::load(path)?)
}

pub fn load_tiles(path: &Path) -> Result<Vec<TileRef>> {
    require_file(path)?;
    Ok(read_tiles_jsonl(BufReader::new(File::open(path)?))?)
}

pub fn read_csv<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    require_file(path)?;
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<Vec<T>, _>>()?)
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_assignments(path: &Path) -> Result<BTreeMap<String, Split>> {
    require_file(path)?;
    Ok(read_assignment_csv(path)?.into_iter().map(|r| (r.slide_id, r.split)).collect())
}

pub fn tile(common: &Common, manifest_path: &Path) -> Result<RunRecord> {
    let cfg: TileConfig = resolve(common, "tile")?;
    let manifest = load_manifest(manifest_path)?;
    let mut run = Run::start("tile", &common.out)?;
    run.input("manifest", manifest_path)?;
    let per_slide = manifest
        .slides
        .par_iter()
        .map(|e| -> Result<_> {
            let bundle = manifest.load_bundle(&e.slide_id)?;
            let tiles = extract_tiles(&bundle, cfg.min_tissue)?;
            let labels: Vec<TileLabel> = tiles
                .iter()
                .map(|t| {
                    let f = tile_cancer_fraction(&bundle, t);
                    TileLabel {
                        slide_id: t.slide_id.clone(),
                        x: t.x,
                        y: t.y,
                        cancer_fraction: f,
                        label: (f >= cfg.cancer_threshold) as u8,
                    }
                })
                .collect();
            Ok((tiles, labels))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut all_tiles = Vec::new();
    let mut all_labels = Vec::new();
    let mut slides = Vec::new();
    for (e, (tiles, labels)) in manifest.slides.iter().zip(per_slide) {
        let cancer = labels.iter().filter(|l| l.label == 1).count() as u64;
        slides.push(SplitSlide {
            slide_id: e.slide_id.clone(),
            tissue_group: e.labels.get(&cfg.group_key).cloned().unwrap_or_else(|| "all".into()),
            label: e.labels.get(&cfg.label_key).cloned().unwrap_or_else(|| "unlabeled".into()),
            cancer_tiles: cancer,
            benign_tiles: labels.len() as u64 - cancer,
        });
        all_tiles.extend(tiles);
        all_labels.extend(labels);
    }
    write_tiles_jsonl(&all_tiles, BufWriter::new(File::create(run.path("tiles.jsonl"))?))?;
    write_csv(&run.path("tile_labels.csv"), &all_labels)?;
    write_csv(&run.path("slides.csv"), &slides)?;
    log::info!("{} tiles from {} slides", all_tiles.len(), slides.len());
    run.finish(&cfg, cfg.seed)
}

#[derive(Debug, Serialize)]
struct StratumReport {
    tissue_group: String,
    label: String,
    slides: [usize; 3],
    slide_fractions: [f64; 3],
    tile_fractions: [f64; 3],
}

#[derive(Debug, Serialize)]
struct BenignRow {
    unit_id: String,
    split: Split,
    capped_cancer_tiles: u64,
    sampled_benign_tiles: u64,
}

pub fn split(common: &Common, slides_path: &Path, manifest_path: Option<&Path>) -> Result<RunRecord> {
    let cmd: SplitCmdConfig = resolve(common, "split")?;
    let cfg = &cmd.split;
    require_file(slides_path)?;
    let slides = read_split_csv(slides_path)?;
    let mut run = Run::start("split", &common.out)?;
    run.input("slides", slides_path)?;
    let units = match cmd.unit {
        SplitUnit::Slide => slides.clone(),
        SplitUnit::Specimen => {
            let path = manifest_path.ok_or_else(|| CliError::Input("specimen splits need --manifest".into()))?;
            run.input("manifest", path)?;
            specimen_rows(&slides, &load_manifest(path)?)?
        }
    };
    let problem = SplitProblem::new(units, cfg)?;
    let result = optimize_split(&problem, cfg)?;
    if result.history.windows(2).any(|w| w[1] > w[0] + 1e-12) {
        return Err(CliError::Pipeline("split objective increased during search".into()));
    }
    let slide_split: Vec<Split> = match cmd.unit {
        SplitUnit::Slide => result.assignment.clone(),
        SplitUnit::Specimen => {
            let manifest = load_manifest(manifest_path.expect("checked above"))?;
            let of: BTreeMap<&str, Split> =
                problem.slides.iter().zip(&result.assignment).map(|(u, &a)| (u.slide_id.as_str(), a)).collect();
            slides
                .iter()
                .map(|s| of[manifest.get(&s.slide_id).expect("checked above").specimen_id.as_str()])
                .collect()
        }
    };
    write_assignment_csv(&run.path("assignments.csv"), &slides, &slide_split)?;
    let benign = balance_benign(&problem, &result.assignment, cfg.seed);
    let rows: Vec<BenignRow> = problem
        .slides
        .iter()
        .enumerate()
        .map(|(i, s)| BenignRow {
            unit_id: s.slide_id.clone(),
            split: result.assignment[i],
            capped_cancer_tiles: problem.capped_cancer[i],
            sampled_benign_tiles: benign[i],
        })
        .collect();
    write_csv(&run.path("tile_budget.csv"), &rows)?;
    let mut strata: BTreeMap<(String, String), Vec<usize>> = BTreeMap::new();
    for (i, s) in problem.slides.iter().enumerate() {
        strata.entry((s.tissue_group.clone(), s.label.clone())).or_default().push(i);
    }
    let report: Vec<StratumReport> = strata
        .into_iter()
        .map(|((tissue_group, label), idx)| {
            let mut slides = [0usize; 3];
            let mut tiles = [0u64; 3];
            for &i in &idx {
                let k = result.assignment[i].index();
                slides[k] += 1;
                tiles[k] += problem.slide_tiles(i);
            }
            let total_tiles: u64 = tiles.iter().sum();
            StratumReport {
                tissue_group,
                label,
                slides,
                slide_fractions: slides.map(|n| n as f64 / idx.len() as f64),
                tile_fractions: tiles.map(|t| if total_tiles > 0 { t as f64 / total_tiles as f64 } else { 0.0 }),
            }
        })
        .collect();
    std::fs::write(
        run.path("split_report.json"),
        serde_json::to_vec_pretty(&serde_json::json!({
            "deviation": result.deviation,
            "restart": result.restart,
            "rounds": result.history.len() - 1,
            "unit": cmd.unit,
            "strata": report,
        }))?,
    )?;
    let seed = cfg.seed;
    run.finish(&cmd, seed)
}
