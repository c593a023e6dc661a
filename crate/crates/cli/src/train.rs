//! `train-ssl`, `embed` and `train-agg`.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use pathfound::agata::{lr_grid_search, specimen_score, train_aggregator, AgataConfig, SlideTiles, SpecimenBag, TrainedAggregator};
use pathfound::corpus::{read_labels_csv, SpecimenLabel};
use pathfound::dino::{train_ssl as run_ssl, SslConfig, SslError, TileViews};
use pathfound::evalstat::{auroc, write_scores_csv, ScoreRow};
use pathfound::nn::{load_checkpoint, save_checkpoint, ParamStore, Tensor};
use pathfound::sampler::{sample_minibatch, SamplePlan};
use pathfound::slide::SlideManifest;
use pathfound::splitter::Split;
use pathfound::store::{read_store, Dtype, EmbeddingRecord, StoreWriter};
use pathfound::tiler::{tile_image, TileRef};
use pathfound::views::{render_crop, CropParams, ViewConfig};
use pathfound::vit::{extract_embedding, vit_forward_batch, VitConfig};

use crate::data::{load_assignments, load_manifest, load_tiles, resolve, write_csv};
use crate::error::{CliError, Result};
use crate::run::{require_file, Run, RunRecord, Seeded};
use crate::Common;

pub const SSL_CONFIG: &str = "ssl_config.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSslConfig {
    pub ssl: SslConfig,
    pub tiles_per_slide: usize,
}

impl Default for TrainSslConfig {
    fn default() -> Self {
        Self {
            ssl: SslConfig::default(),
            tiles_per_slide: 2,
        }
    }
}

impl Seeded for TrainSslConfig {
    fn seed_mut(&mut self) -> &mut u64 {
        &mut self.ssl.seed
    }
}

fn tile_index(manifest: &SlideManifest, tiles: Vec<TileRef>) -> Result<BTreeMap<String, Vec<TileRef>>> {
    let mut index: BTreeMap<String, Vec<TileRef>> = BTreeMap::new();
    for t in tiles {
        if manifest.get(&t.slide_id).is_none() {
            return Err(CliError::Input(format!("tile from unknown slide {}", t.slide_id)));
        }
        index.entry(t.slide_id.clone()).or_default().push(t);
    }
    Ok(index)
}

pub fn train_ssl(common: &Common, manifest_path: &Path, tiles_path: &Path) -> Result<RunRecord> {
    let cfg: TrainSslConfig = resolve(common, "train-ssl")?;
    cfg.ssl.validate()?;
    let mut manifest = load_manifest(manifest_path)?;
    let index = tile_index(&manifest, load_tiles(tiles_path)?)?;
    manifest.slides.retain(|e| index.contains_key(&e.slide_id));
    if manifest.slides.is_empty() {
        return Err(CliError::Input("no slide has foreground tiles".into()));
    }
    let mut run = Run::start("train-ssl", &common.out)?;
    run.input("manifest", manifest_path)?;
    run.input("tiles", tiles_path)?;
    let plan = SamplePlan {
        seed: cfg.ssl.seed,
        tiles_per_slide: cfg.tiles_per_slide,
        workers: cfg.ssl.workers,
        epoch: 0,
    };
    let loader = |step: u64| -> std::result::Result<Vec<Vec<image::RgbImage>>, SslError> {
        let draws = sample_minibatch(&manifest, &index, &plan, step).map_err(|e| SslError::Source(e.to_string()))?;
        draws
            .iter()
            .map(|d| {
                let bundle = manifest.load_bundle(&d.slide_id).map_err(|e| SslError::Source(e.to_string()))?;
                Ok(d.tiles.iter().map(|t| tile_image(&bundle, t)).collect())
            })
            .collect()
    };
    let source = TileViews {
        loader,
        views: cfg.ssl.views.clone(),
        seed: cfg.ssl.seed,
    };
    std::fs::write(run.path(SSL_CONFIG), serde_json::to_vec_pretty(&cfg.ssl)?)?;
    let result = run_ssl::<f32>(&cfg.ssl, &source, Some(&run.out))?;
    if let Some(last) = result.metrics.last() {
        log::info!("final loss {:.6}", last.loss);
    }
    run.finish(&cfg, cfg.ssl.seed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmbedConfig {
    /// Use the EMA teacher rather than the student.
    pub teacher: bool,
    pub dtype: Dtype,
    pub batch: usize,
    /// Append to an existing `embeddings.pfem` in the output directory.
    pub append: bool,
    pub seed: u64,
}

impl Default for EmbedConfig {
    fn default() -> Self {
        Self {
            teacher: true,
            dtype: Dtype::F32,
            batch: 32,
            append: false,
            seed: 0,
        }
    }
}

impl Seeded for EmbedConfig {
    fn seed_mut(&mut self) -> &mut u64 {
        &mut self.seed
    }
}

/// Model config and backbone weights from a `train-ssl` output directory.
pub fn load_encoder(dir: &Path, teacher: bool) -> Result<(SslConfig, ParamStore<f32>)> {
    let cfg_path = dir.join(SSL_CONFIG);
    require_file(&cfg_path)?;
    let cfg: SslConfig = serde_json::from_slice(&std::fs::read(&cfg_path)?).map_err(|e| CliError::Config {
        path: cfg_path.clone(),
        message: e.to_string(),
    })?;
    let ckpt = dir.join(if teacher { "teacher.ckpt" } else { "student.ckpt" });
    require_file(&ckpt)?;
    Ok((cfg, load_checkpoint::<f32>(&ckpt)?))
}

/// Whole-tile model input: resize to the model size and normalize.
pub fn tile_input(tile: &image::RgbImage, vit: &VitConfig, views: &ViewConfig) -> Vec<f32> {
    let params = CropParams {
        bx: (0, 0, tile.width(), tile.height()),
        out_size: vit.image_size,
        flip: false,
        jitter: None,
        grayscale: false,
    };
    render_crop(tile, &params, views).data
}

pub fn embed(common: &Common, manifest_path: &Path, tiles_path: &Path, checkpoint: &Path) -> Result<RunRecord> {
    let cfg: EmbedConfig = resolve(common, "embed")?;
    if cfg.batch == 0 {
        return Err(CliError::Config {
            path: common.config.clone().unwrap_or_default(),
            message: "batch must be positive".into(),
        });
    }
    let manifest = load_manifest(manifest_path)?;
    let tiles = load_tiles(tiles_path)?;
    let (ssl, store) = load_encoder(checkpoint, cfg.teacher)?;
    let mut run = Run::start("embed", &common.out)?;
    run.input("manifest", manifest_path)?;
    run.input("tiles", tiles_path)?;
    run.input("checkpoint", checkpoint)?;
    let mut groups: Vec<(String, Vec<TileRef>)> = Vec::new();
    for t in tiles {
        match groups.last_mut() {
            Some((id, v)) if *id == t.slide_id => v.push(t),
            _ => groups.push((t.slide_id.clone(), vec![t])),
        }
    }
    let per_slide = groups
        .par_iter()
        .map(|(slide_id, tiles)| -> Result<Vec<EmbeddingRecord>> {
            let bundle = manifest.load_bundle(slide_id)?;
            let mut out = Vec::with_capacity(tiles.len());
            for chunk in tiles.chunks(cfg.batch) {
                let inputs: Vec<Vec<f32>> = chunk.iter().map(|t| tile_input(&tile_image(&bundle, t), &ssl.vit, &ssl.views)).collect();
                let refs: Vec<&[f32]> = inputs.iter().map(Vec::as_slice).collect();
                let toks = vit_forward_batch(&store, &ssl.vit, &refs, ssl.vit.image_size, None)?;
                for (t, o) in chunk.iter().zip(&toks) {
                    out.push(EmbeddingRecord {
                        slide_id: t.slide_id.clone(),
                        x: t.x,
                        y: t.y,
                        vector: extract_embedding(o).into_iter().map(|v| v as f64).collect(),
                    });
                }
            }
            Ok(out)
        })
        .collect::<Result<Vec<_>>>()?;
    let store_path = run.path("embeddings.pfem");
    let mut writer = if cfg.append && store_path.exists() {
        let w = StoreWriter::open(&store_path)?;
        if w.header().dim != ssl.vit.embedding_len() {
            return Err(pathfound::store::StoreError::DimMismatch {
                store: w.header().dim,
                record: ssl.vit.embedding_len(),
            }
            .into());
        }
        w
    } else {
        StoreWriter::create(&store_path, ssl.vit.embedding_len(), cfg.dtype)?
    };
    for rec in per_slide.iter().flatten() {
        writer.append(rec)?;
    }
    let header = writer.finish()?;
    log::info!("{} embeddings of width {}", header.count, header.dim);
    run.finish(&cfg, cfg.seed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainAggConfig {
    pub agata: AgataConfig,
    /// Learning rates to search; empty trains once at `agata.lr`.
    pub lr_grid: Vec<f64>,
    pub model: String,
}

impl Default for TrainAggConfig {
    fn default() -> Self {
        Self {
            agata: AgataConfig::default(),
            lr_grid: Vec::new(),
            model: "agata".into(),
        }
    }
}

impl Seeded for TrainAggConfig {
    fn seed_mut(&mut self) -> &mut u64 {
        &mut self.agata.seed
    }
}

/// Group store records into specimen bags. A specimen takes the split of its
/// first embedded slide in manifest order.
pub fn build_bags(
    records: Vec<EmbeddingRecord>,
    dim: usize,
    manifest: &SlideManifest,
    labels: &[SpecimenLabel],
    assignments: &BTreeMap<String, Split>,
) -> Result<Vec<(SpecimenBag, Split)>> {
    let mut by_slide: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for r in records {
        by_slide.entry(r.slide_id).or_default().extend(r.vector);
    }
    let mut out = Vec::new();
    for l in labels {
        let mut slides = Vec::new();
        let mut split = None;
        for e in manifest.slides.iter().filter(|e| e.specimen_id == l.specimen_id) {
            let Some(data) = by_slide.remove(&e.slide_id) else { continue };
            if split.is_none() {
                split = Some(
                    *assignments
                        .get(&e.slide_id)
                        .ok_or_else(|| CliError::Input(format!("slide {} has no split assignment", e.slide_id)))?,
                );
            } else if assignments.get(&e.slide_id) != split.as_ref() {
                log::warn!("specimen {} spans splits; using the first slide's", l.specimen_id);
            }
            let rows = data.len() / dim;
            slides.push(SlideTiles {
                slide_id: e.slide_id.clone(),
                embeddings: Tensor::matrix(rows, dim, data)?,
            });
        }
        match split {
            Some(split) => out.push((
                SpecimenBag {
                    specimen_id: l.specimen_id.clone(),
                    slides,
                    label: l.label as usize,
                    source: l.source.clone(),
                },
                split,
            )),
            None => log::warn!("specimen {} has no embedded tiles; skipped", l.specimen_id),
        }
    }
    if let Some(orphan) = by_slide.keys().next() {
        return Err(CliError::Input(format!("embeddings for slide {orphan} which is not in the manifest")));
    }
    Ok(out)
}

#[derive(Debug, Serialize)]
struct AggReport {
    model: String,
    lr: f64,
    best_epoch: usize,
    best_auroc: f64,
    auroc: BTreeMap<String, Option<f64>>,
    specimens: BTreeMap<String, usize>,
    grid: Vec<(f64, f64)>,
}

pub fn train_agg(common: &Common, store_path: &Path, manifest_path: &Path, labels_path: &Path, assignments_path: &Path) -> Result<RunRecord> {
    let mut cfg: TrainAggConfig = resolve(common, "train-agg")?;
    require_file(store_path)?;
    let manifest = load_manifest(manifest_path)?;
    require_file(labels_path)?;
    let labels = read_labels_csv(labels_path)?;
    let assignments = load_assignments(assignments_path)?;
    let (header, records) = read_store(store_path)?;
    let mut run = Run::start("train-agg", &common.out)?;
    run.input("store", store_path)?;
    run.input("manifest", manifest_path)?;
    run.input("labels", labels_path)?;
    run.input("assignments", assignments_path)?;
    let bags = build_bags(records, header.dim, &manifest, &labels, &assignments)?;
    let pick = |s: Split| -> Vec<SpecimenBag> { bags.iter().filter(|(_, x)| *x == s).map(|(b, _)| b.clone()).collect() };
    let (train, val) = (pick(Split::Train), pick(Split::Val));
    let (trained, grid): (TrainedAggregator, Vec<(f64, f64)>) = if cfg.lr_grid.is_empty() {
        (train_aggregator(&train, &val, &cfg.agata)?, Vec::new())
    } else {
        let g = lr_grid_search(&train, &val, &cfg.agata, &cfg.lr_grid)?;
        cfg.agata.lr = g.best_lr;
        (g.best, g.results)
    };
    let mut rows = Vec::with_capacity(bags.len());
    let mut per_split: BTreeMap<String, (Vec<f64>, Vec<bool>)> = BTreeMap::new();
    for (bag, split) in &bags {
        let score = specimen_score(&trained.params, &cfg.agata, bag)?;
        let e = per_split.entry(split.name().to_string()).or_default();
        e.0.push(score);
        e.1.push(bag.label == cfg.agata.positive_class);
        rows.push(ScoreRow {
            case_id: bag.specimen_id.clone(),
            model: cfg.model.clone(),
            score,
            label: (bag.label == cfg.agata.positive_class) as u8,
            stratum: split.name().to_string(),
        });
    }
    write_scores_csv(&run.path("scores.csv"), &rows)?;
    write_csv(&run.path("training_log.csv"), &trained.log)?;
    save_checkpoint(&trained.params, &run.path("aggregator.ckpt"))?;
    let report = AggReport {
        model: cfg.model.clone(),
        lr: cfg.agata.lr,
        best_epoch: trained.best_epoch,
        best_auroc: trained.best_auroc,
        auroc: per_split.iter().map(|(k, (s, l))| (k.clone(), auroc(s, l).ok())).collect(),
        specimens: per_split.iter().map(|(k, (s, _))| (k.clone(), s.len())).collect(),
        grid,
    };
    std::fs::write(run.path("agg_report.json"), serde_json::to_vec_pretty(&report)?)?;
    let seed = cfg.agata.seed;
    run.finish(&cfg, seed)
}
