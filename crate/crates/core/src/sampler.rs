//! Self-supervised minibatch sampling: one slide per worker, a fixed number
//! of foreground tiles per slide.

use std::collections::BTreeMap;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::rng::keyed_rng;
use crate::slide::SlideManifest;
use crate::tiler::TileRef;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum SampleError {
    #[error("manifest has no slides")]
    EmptyManifest,
    #[error("slide {0} has no tiles")]
    NoTiles(String),
    #[error("invalid plan: {0}")]
    Plan(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplePlan {
    pub seed: u64,
    #[serde(default = "default_tiles_per_slide")]
    pub tiles_per_slide: usize,
    #[serde(default = "default_workers")]
    pub workers: usize,
    #[serde(default)]
    pub epoch: u64,
}

fn default_tiles_per_slide() -> usize {
    256
}

fn default_workers() -> usize {
    1
}

impl Default for SamplePlan {
    fn default() -> Self {
        Self {
            seed: 0,
            tiles_per_slide: default_tiles_per_slide(),
            workers: default_workers(),
            epoch: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorkerDraw {
    pub worker_id: usize,
    pub slide_id: String,
    pub tiles: Vec<TileRef>,
}

/// Draw for a single worker; depends only on `(seed, epoch, step, worker)`.
pub fn sample_worker(
    slide_ids: &[&str],
    tile_index: &BTreeMap<String, Vec<TileRef>>,
    plan: &SamplePlan,
    step: u64,
    worker_id: usize,
) -> Result<WorkerDraw, SampleError> {
    if slide_ids.is_empty() {
        return Err(SampleError::EmptyManifest);
    }
    let mut rng = keyed_rng(plan.seed, &[plan.epoch, step, worker_id as u64]);
    let slide = slide_ids[rng.random_range(0..slide_ids.len())];
    let pool = tile_index
        .get(slide)
        .filter(|t| !t.is_empty())
        .ok_or_else(|| SampleError::NoTiles(slide.to_string()))?;
    let k = plan.tiles_per_slide;
    let tiles = if pool.len() >= k {
        index::sample(&mut rng, pool.len(), k)
            .into_iter()
            .map(|i| pool[i].clone())
            .collect()
    } else {
        (0..k).map(|_| pool[rng.random_range(0..pool.len())].clone()).collect()
    };
    Ok(WorkerDraw {
        worker_id,
        slide_id: slide.to_string(),
        tiles,
    })
}

/// One draw per worker for the given step.
pub fn sample_minibatch(
    manifest: &SlideManifest,
    tile_index: &BTreeMap<String, Vec<TileRef>>,
    plan: &SamplePlan,
    step: u64,
) -> Result<Vec<WorkerDraw>, SampleError> {
    if plan.tiles_per_slide == 0 || plan.workers == 0 {
        return Err(SampleError::Plan("tiles_per_slide and workers must be positive".into()));
    }
    if manifest.slides.is_empty() {
        return Err(SampleError::EmptyManifest);
    }
    if let Some(e) = manifest
        .slides
        .iter()
        .find(|e| tile_index.get(&e.slide_id).is_none_or(|t| t.is_empty()))
    {
        return Err(SampleError::NoTiles(e.slide_id.clone()));
    }
    let ids: Vec<&str> = manifest.slides.iter().map(|e| e.slide_id.as_str()).collect();
    (0..plan.workers)
        .map(|w| sample_worker(&ids, tile_index, plan, step, w))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::slide::ManifestEntry;
    use std::collections::HashSet;

    fn tile(slide: &str, i: u32) -> TileRef {
        TileRef {
            slide_id: slide.into(),
            x: i * 224,
            y: 0,
            size: 224,
            tissue_fraction: 1.0,
        }
    }

    fn setup(counts: &[u32]) -> (SlideManifest, BTreeMap<String, Vec<TileRef>>) {
        let mut m = SlideManifest::default();
        let mut idx = BTreeMap::new();
        for (i, &n) in counts.iter().enumerate() {
            let id = format!("s{i}");
            m.slides.push(ManifestEntry {
                slide_id: id.clone(),
                path: id.clone().into(),
                specimen_id: id.clone(),
                block_id: None,
                labels: Default::default(),
            });
            idx.insert(id.clone(), (0..n).map(|j| tile(&id, j)).collect());
        }
        (m, idx)
    }

    #[test]
    fn exact_pool_is_a_permutation() {
        let (m, idx) = setup(&[256]);
        let plan = SamplePlan { seed: 1, ..Default::default() };
        let draw = &sample_minibatch(&m, &idx, &plan, 0).unwrap()[0];
        assert_eq!(draw.tiles.len(), 256);
        let xs: HashSet<u32> = draw.tiles.iter().map(|t| t.x).collect();
        assert_eq!(xs.len(), 256);
    }

    #[test]
    fn small_pool_pads_with_replacement() {
        let (m, idx) = setup(&[3]);
        let plan = SamplePlan { seed: 1, tiles_per_slide: 10, ..Default::default() };
        let draw = &sample_minibatch(&m, &idx, &plan, 4).unwrap()[0];
        assert_eq!(draw.tiles.len(), 10);
        assert!(draw.tiles.iter().all(|t| t.x < 3 * 224));
    }

    #[test]
    fn large_pool_has_no_duplicates() {
        let (m, idx) = setup(&[500, 700]);
        let plan = SamplePlan { seed: 3, tiles_per_slide: 256, workers: 3, epoch: 2 };
        for draw in sample_minibatch(&m, &idx, &plan, 9).unwrap() {
            let xs: HashSet<u32> = draw.tiles.iter().map(|t| t.x).collect();
            assert_eq!(xs.len(), 256);
        }
    }

    #[test]
    fn deterministic_and_keyed() {
        let (m, idx) = setup(&[40, 50, 60]);
        let plan = SamplePlan { seed: 5, tiles_per_slide: 8, workers: 4, epoch: 1 };
        let a = sample_minibatch(&m, &idx, &plan, 17).unwrap();
        assert_eq!(a, sample_minibatch(&m, &idx, &plan, 17).unwrap());
        assert_ne!(a, sample_minibatch(&m, &idx, &plan, 18).unwrap());
        // A worker's draw is independent of how many other workers exist.
        let solo = SamplePlan { workers: 2, ..plan };
        assert_eq!(a[1], sample_minibatch(&m, &idx, &solo, 17).unwrap()[1]);
    }

    #[test]
    fn errors() {
        let (m, idx) = setup(&[]);
        assert_eq!(sample_minibatch(&m, &idx, &SamplePlan::default(), 0), Err(SampleError::EmptyManifest));
        let (m, idx) = setup(&[4, 0]);
        assert_eq!(
            sample_minibatch(&m, &idx, &SamplePlan::default(), 0),
            Err(SampleError::NoTiles("s1".into()))
        );
    }

    #[test]
    fn slide_choice_is_uniform() {
        // 10 slides, 4 workers, 10^4 steps: chi-square against uniform.
        let (m, idx) = setup(&[5; 10]);
        let plan = SamplePlan { seed: 11, tiles_per_slide: 1, workers: 4, epoch: 0 };
        let mut counts = [0usize; 10];
        for step in 0..10_000 {
            for d in sample_minibatch(&m, &idx, &plan, step).unwrap() {
                counts[d.slide_id[1..].parse::<usize>().unwrap()] += 1;
            }
        }
        let n = 40_000.0;
        let expect = n / 10.0;
        let sd = (n * 0.1 * 0.9f64).sqrt();
        for &c in &counts {
            assert!((c as f64 - expect).abs() < 3.0 * sd, "{counts:?}");
        }
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expect).powi(2) / expect).sum();
        // 9 degrees of freedom, 0.999 quantile is 27.88.
        assert!(chi2 < 27.88, "chi2 {chi2}");
    }
}
