//! Synthetic labelled slide corpora: specimens of one or more slides, with
//! cancer regions on the slides of positive specimens.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::rng::keyed_rng;
use crate::slide::{store_slide, synth_slide, ManifestEntry, Region, SlideBundle, SlideError, SlideManifest, SynthSpec};
use crate::tiler::TileRef;

pub const GROUP_KEY: &str = "tissue_group";
pub const CANCER_KEY: &str = "cancer";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    pub specimens: usize,
    pub positive_fraction: f64,
    pub max_slides_per_specimen: usize,
    pub slide_size: u32,
    pub tissue_groups: Vec<String>,
    /// Fraction of specimens tagged `external`.
    pub external_fraction: f64,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            specimens: 48,
            positive_fraction: 0.5,
            max_slides_per_specimen: 2,
            slide_size: 672,
            tissue_groups: vec!["breast".into(), "prostate".into()],
            external_fraction: 0.0,
            seed: 0,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<(), SlideError> {
        if self.specimens < 2 || self.max_slides_per_specimen == 0 || self.tissue_groups.is_empty() {
            return Err(SlideError::Invalid("corpus needs two specimens, a slide each and a tissue group".into()));
        }
        if self.slide_size < 224 {
            return Err(SlideError::Invalid("slides must hold at least one tile".into()));
        }
        if !(0.0..=1.0).contains(&self.positive_fraction) || !(0.0..=1.0).contains(&self.external_fraction) {
            return Err(SlideError::Invalid("fractions must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpecimenLabel {
    pub specimen_id: String,
    pub label: u8,
    pub source: String,
}

/// Bundle specs and labels without painting any pixels.
pub fn plan_corpus(cfg: &CorpusConfig) -> Result<(Vec<(SynthSpec, ManifestEntry)>, Vec<SpecimenLabel>), SlideError> {
    cfg.validate()?;
    let mut rng = keyed_rng(cfg.seed, &[0x636f72]);
    let n_pos = (cfg.positive_fraction * cfg.specimens as f64).round() as usize;
    let mut positive: Vec<bool> = (0..cfg.specimens).map(|i| i < n_pos).collect();
    positive.shuffle(&mut rng);
    let n_ext = (cfg.external_fraction * cfg.specimens as f64).round() as usize;
    let s = cfg.slide_size as f64;
    let mut slides = Vec::new();
    let mut labels = Vec::new();
    for (i, &pos) in positive.iter().enumerate() {
        let specimen_id = format!("sp{i:04}");
        let group = &cfg.tissue_groups[i % cfg.tissue_groups.len()];
        let n_slides = rng.random_range(1..=cfg.max_slides_per_specimen);
        for k in 0..n_slides {
            let slide_id = format!("{specimen_id}-{k}");
            let cx = s * rng.random_range(0.45..0.55);
            let cy = s * rng.random_range(0.45..0.55);
            let rx = s * rng.random_range(0.38..0.44);
            let ry = s * rng.random_range(0.38..0.44);
            let tissue = vec![Region::Ellipse { cx, cy, rx, ry }];
            let has_cancer = pos && (k == 0 || rng.random_bool(0.5));
            let cancer = if has_cancer {
                let r = s * rng.random_range(0.18..0.26);
                vec![Region::Ellipse {
                    cx: cx + rng.random_range(-0.1..0.1) * s,
                    cy: cy + rng.random_range(-0.1..0.1) * s,
                    rx: r,
                    ry: r,
                }]
            } else {
                Vec::new()
            };
            let spec = SynthSpec {
                slide_id: slide_id.clone(),
                width: cfg.slide_size,
                height: cfg.slide_size,
                mpp: 0.5,
                tissue,
                cancer,
                palette: Default::default(),
            };
            let entry = ManifestEntry {
                slide_id: slide_id.clone(),
                path: PathBuf::from("slides").join(&slide_id),
                specimen_id: specimen_id.clone(),
                block_id: None,
                labels: BTreeMap::from([
                    (GROUP_KEY.to_string(), group.clone()),
                    (CANCER_KEY.to_string(), if has_cancer { "1" } else { "0" }.to_string()),
                ]),
            };
            slides.push((spec, entry));
        }
        labels.push(SpecimenLabel {
            specimen_id,
            label: pos as u8,
            source: if i < n_ext { "external" } else { "internal" }.into(),
        });
    }
    Ok((slides, labels))
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub manifest: SlideManifest,
    pub labels: Vec<SpecimenLabel>,
}

/// Paint and store every slide under `dir`, writing `manifest.json` and `labels.csv`.
pub fn write_corpus(cfg: &CorpusConfig, dir: &Path) -> Result<Corpus, SlideError> {
    let (plan, labels) = plan_corpus(cfg)?;
    plan.par_iter().try_for_each(|(spec, entry)| -> Result<(), SlideError> {
        let bundle = synth_slide(spec, cfg.seed)?;
        store_slide(&bundle, &dir.join(&entry.path))
    })?;
    let manifest = SlideManifest {
        slides: plan.into_iter().map(|(_, e)| e).collect(),
        root: dir.to_path_buf(),
    };
    manifest.save(&dir.join("manifest.json"))?;
    write_labels_csv(&dir.join("labels.csv"), &labels)?;
    Ok(Corpus { manifest, labels })
}

pub fn write_labels_csv(path: &Path, labels: &[SpecimenLabel]) -> Result<(), SlideError> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for l in labels {
        w.serialize(l).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_labels_csv(path: &Path) -> Result<Vec<SpecimenLabel>, SlideError> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    r.deserialize().collect::<Result<Vec<_>, _>>().map_err(csv_err)
}

fn csv_err(e: csv::Error) -> SlideError {
    SlideError::Metadata(e.to_string())
}

/// Fraction of a tile's pixels inside the ground-truth cancer mask; zero
/// when the slide has no mask.
pub fn tile_cancer_fraction(bundle: &SlideBundle, tile: &TileRef) -> f64 {
    let Some(mask) = &bundle.cancer_mask else { return 0.0 };
    let mut n = 0u64;
    for y in tile.y..tile.y + tile.size {
        for x in tile.x..tile.x + tile.size {
            n += (mask.get_pixel(x, y)[0] > 0) as u64;
        }
    }
    n as f64 / (tile.size as f64 * tile.size as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tiler::extract_tiles;

    #[test]
    fn plan_is_deterministic_and_labelled() {
        let cfg = CorpusConfig::default();
        let (a, la) = plan_corpus(&cfg).unwrap();
        let (b, lb) = plan_corpus(&cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(la, lb);
        assert_eq!(la.iter().filter(|l| l.label == 1).count(), 24);
        for l in &la {
            let any_cancer = a
                .iter()
                .filter(|(_, e)| e.specimen_id == l.specimen_id)
                .any(|(s, _)| !s.cancer.is_empty());
            assert_eq!(any_cancer, l.label == 1);
        }
    }

    #[test]
    fn written_corpus_reloads_with_tiles() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = CorpusConfig {
            specimens: 4,
            positive_fraction: 0.5,
            external_fraction: 0.25,
            slide_size: 448,
            ..Default::default()
        };
        write_corpus(&cfg, dir.path()).unwrap();
        let m = SlideManifest::load(&dir.path().join("manifest.json")).unwrap();
        let labels = read_labels_csv(&dir.path().join("labels.csv")).unwrap();
        assert_eq!(labels.len(), 4);
        assert_eq!(labels.iter().filter(|l| l.source == "external").count(), 1);
        for e in &m.slides {
            let b = m.load_bundle(&e.slide_id).unwrap();
            let tiles = extract_tiles(&b, 0.25).unwrap();
            assert!(!tiles.is_empty());
            let cancer = tiles.iter().map(|t| tile_cancer_fraction(&b, t)).fold(0.0, f64::max);
            assert_eq!(cancer > 0.0, e.labels[CANCER_KEY] == "1");
        }
    }

    #[test]
    fn invalid_configs() {
        assert!(CorpusConfig { specimens: 1, ..Default::default() }.validate().is_err());
        assert!(CorpusConfig { slide_size: 100, ..Default::default() }.validate().is_err());
    }
}
