//! PCA maps over patch tokens from a grid of sub-images.

use std::path::{Path, PathBuf};

use image::{GrayImage, Luma, Rgb, RgbImage};
use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;

use crate::nn::{NnError, ParamStore};
use crate::slide::resize_image;
use crate::vit::{vit_forward, VitConfig};

#[derive(Debug, thiserror::Error)]
pub enum VizError {
    #[error("PCA needs at least two distinct feature vectors")]
    Degenerate,
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Image(#[from] image::ImageError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// Row `k` is the `k`-th unit-norm component.
    pub components: Vec<Vec<f64>>,
    /// Descending variances with divisor `n - 1`.
    pub eigenvalues: Vec<f64>,
}

impl Pca {
    pub fn explained_ratio(&self) -> Vec<f64> {
        let total: f64 = self.eigenvalues.iter().sum();
        self.eigenvalues.iter().map(|&v| if total > 0.0 { v / total } else { 0.0 }).collect()
    }

    pub fn project(&self, x: &[f64], k: usize) -> f64 {
        x.iter().zip(&self.mean).zip(&self.components[k]).map(|((a, m), c)| (a - m) * c).sum()
    }
}

/// Flips `v` so its largest-magnitude entry (first on ties) is positive.
pub fn fix_sign(v: &mut [f64]) {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[best].abs() {
            best = i;
        }
    }
    if v[best] < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

pub fn pca(rows: &[Vec<f64>]) -> Result<Pca, VizError> {
    let d = rows.first().map(|r| r.len()).ok_or(VizError::Degenerate)?;
    if rows.iter().any(|r| r.len() != d) {
        return Err(VizError::Invalid("ragged feature rows".into()));
    }
    if d == 0 || rows.iter().all(|r| r == &rows[0]) {
        return Err(VizError::Degenerate);
    }
    let n = rows.len();
    let mut mean = vec![0.0; d];
    for r in rows {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let centered = DMatrix::from_fn(n, d, |i, j| rows[i][j] - mean[j]);
    let cov = (centered.transpose() * &centered) / (n as f64 - 1.0);
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut components = Vec::with_capacity(d);
    let mut eigenvalues = Vec::with_capacity(d);
    for k in order {
        let mut v: Vec<f64> = eig.eigenvectors.column(k).iter().copied().collect();
        fix_sign(&mut v);
        components.push(v);
        eigenvalues.push(eig.eigenvalues[k].max(0.0));
    }
    Ok(Pca {
        mean,
        components,
        eigenvalues,
    })
}

/// Min-max scaling to `[0, 1]`; a constant input maps to zeros.
pub fn min_max(v: &[f64]) -> Vec<f64> {
    let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi - lo <= 1e-12 * hi.abs().max(1.0) {
        return vec![0.0; v.len()];
    }
    v.iter().map(|x| (x - lo) / (hi - lo)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct VizConfig {
    /// Sub-images per side.
    pub grid: usize,
    pub threshold: f64,
}

impl Default for VizConfig {
    fn default() -> Self {
        Self { grid: 4, threshold: 0.5 }
    }
}

/// Token maps for one image, row-major over `side x side` token positions.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMaps {
    pub side: usize,
    pub pc1: Vec<f64>,
    pub pc2: Vec<f64>,
    pub mask1: Vec<bool>,
    pub mask2: Vec<bool>,
    pub explained: [f64; 2],
}

/// Produces patch tokens (row-major over its own `g x g` grid) for a
/// `sub_size x sub_size` RGB sub-image.
pub trait PatchTokens: Sync {
    fn sub_size(&self) -> usize;
    fn tokens(&self, image: &RgbImage) -> Result<Vec<Vec<f64>>, VizError>;
}

pub struct VitTokens<'a> {
    pub store: &'a ParamStore<f32>,
    pub cfg: &'a VitConfig,
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

/// Normalized HWC floats for a model input.
pub fn normalize_image(img: &RgbImage, mean: [f32; 3], std: [f32; 3]) -> Vec<f32> {
    img.pixels()
        .flat_map(|p| (0..3).map(move |c| (p[c] as f32 / 255.0 - mean[c]) / std[c]))
        .collect()
}

impl PatchTokens for VitTokens<'_> {
    fn sub_size(&self) -> usize {
        self.cfg.image_size
    }

    fn tokens(&self, image: &RgbImage) -> Result<Vec<Vec<f64>>, VizError> {
        let x = normalize_image(image, self.mean, self.std);
        let out = vit_forward(self.store, self.cfg, &x, None)?;
        let (n, _) = out.patch_tokens.dims2();
        Ok((0..n)
            .map(|r| out.patch_tokens.row_slice(r).iter().map(|&v| v as f64).collect())
            .collect())
    }
}

pub fn pca_feature_map(image: &RgbImage, model: &dyn PatchTokens, cfg: &VizConfig) -> Result<FeatureMaps, VizError> {
    let sub = model.sub_size();
    if cfg.grid == 0 || sub == 0 {
        return Err(VizError::Invalid("grid and sub-image size must be positive".into()));
    }
    let full = (cfg.grid * sub) as u32;
    let resized = resize_image(image, full, full);
    let cells: Vec<(usize, usize)> = (0..cfg.grid).flat_map(|r| (0..cfg.grid).map(move |c| (r, c))).collect();
    let per_cell: Vec<Vec<Vec<f64>>> = cells
        .par_iter()
        .map(|&(r, c)| {
            let crop = image::imageops::crop_imm(&resized, (c * sub) as u32, (r * sub) as u32, sub as u32, sub as u32).to_image();
            model.tokens(&crop)
        })
        .collect::<Result<_, _>>()?;
    let g2 = per_cell[0].len();
    let g = (g2 as f64).sqrt().round() as usize;
    if g * g != g2 || per_cell.iter().any(|t| t.len() != g2) {
        return Err(VizError::Invalid("token count is not a square grid".into()));
    }
    let side = g * cfg.grid;
    let mut rows = vec![Vec::new(); side * side];
    for (&(r, c), toks) in cells.iter().zip(per_cell) {
        for (t, v) in toks.into_iter().enumerate() {
            rows[(r * g + t / g) * side + c * g + t % g] = v;
        }
    }
    maps_from_tokens(&rows, side, cfg.threshold)
}

/// PCA maps over an already-assembled token grid.
pub fn maps_from_tokens(rows: &[Vec<f64>], side: usize, threshold: f64) -> Result<FeatureMaps, VizError> {
    let p = pca(rows)?;
    let score = |k: usize| -> Vec<f64> {
        if k < p.components.len() {
            rows.iter().map(|r| p.project(r, k)).collect()
        } else {
            vec![0.0; rows.len()]
        }
    };
    let pc1 = min_max(&score(0));
    let pc2 = min_max(&score(1));
    let ratio = p.explained_ratio();
    Ok(FeatureMaps {
        side,
        mask1: pc1.iter().map(|&v| v >= threshold).collect(),
        mask2: pc2.iter().map(|&v| v >= threshold).collect(),
        explained: [ratio[0], ratio.get(1).copied().unwrap_or(0.0)],
        pc1,
        pc2,
    })
}

fn cell(side: usize, size: u32, x: u32, y: u32) -> usize {
    let i = (x as usize * side / size as usize).min(side - 1);
    let j = (y as usize * side / size as usize).min(side - 1);
    j * side + i
}

pub fn mask_image(mask: &[bool], side: usize, size: u32) -> GrayImage {
    GrayImage::from_fn(size, size, |x, y| Luma([if mask[cell(side, size, x, y)] { 255 } else { 0 }]))
}

/// Red where PC1 passes the threshold, green for PC2, blended at half opacity.
pub fn overlay_image(image: &RgbImage, maps: &FeatureMaps) -> RgbImage {
    let (w, h) = image.dimensions();
    let size = w.min(h);
    let base = resize_image(image, size, size);
    RgbImage::from_fn(size, size, |x, y| {
        let k = cell(maps.side, size, x, y);
        let p = base.get_pixel(x, y);
        let tint = [if maps.mask1[k] { 255.0 } else { 0.0 }, if maps.mask2[k] { 255.0 } else { 0.0 }, 0.0];
        if !maps.mask1[k] && !maps.mask2[k] {
            return *p;
        }
        Rgb([0, 1, 2].map(|c| (0.5 * p[c] as f64 + 0.5 * tint[c]).round() as u8))
    })
}

/// Writes `{stem}_pc1.png`, `{stem}_pc2.png` and `{stem}_overlay.png`.
pub fn write_feature_pngs(dir: &Path, stem: &str, image: &RgbImage, maps: &FeatureMaps) -> Result<Vec<PathBuf>, VizError> {
    let size = image.width().min(image.height());
    let paths = ["pc1", "pc2", "overlay"].map(|s| dir.join(format!("{stem}_{s}.png")));
    mask_image(&maps.mask1, maps.side, size).save(&paths[0])?;
    mask_image(&maps.mask2, maps.side, size).save(&paths[1])?;
    overlay_image(image, maps).save(&paths[2])?;
    Ok(paths.to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::keyed_rng;
    use crate::vit::new_vit;
    use rand::Rng;
    use rand_distr::StandardNormal;

    pub(crate) fn random_rows(n: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = keyed_rng(seed, &[]);
        (0..n).map(|_| (0..d).map(|j| rng.sample::<f64, _>(StandardNormal) * (1.0 + j as f64 * 0.3)).collect()).collect()
    }

    pub(crate) fn power_iteration_oracle(rows: &[Vec<f64>], k: usize) -> Vec<(f64, Vec<f64>)> {
        let n = rows.len();
        let d = rows[0].len();
        let mean: Vec<f64> = (0..d).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n as f64).collect();
        let mut cov = vec![vec![0.0; d]; d];
        for r in rows {
            for a in 0..d {
                for b in 0..d {
                    cov[a][b] += (r[a] - mean[a]) * (r[b] - mean[b]) / (n as f64 - 1.0);
                }
            }
        }
        let mut out = Vec::new();
        for _ in 0..k {
            let mut v: Vec<f64> = (0..d).map(|j| 1.0 + j as f64 * 0.01).collect();
            let mut lambda = 0.0;
            for _ in 0..20000 {
                let w: Vec<f64> = (0..d).map(|a| (0..d).map(|b| cov[a][b] * v[b]).sum()).collect();
                let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
                v = w.iter().map(|x| x / norm).collect();
                lambda = norm;
            }
            let big = v.iter().copied().fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
            if big < 0.0 {
                v.iter_mut().for_each(|x| *x = -*x);
            }
            for a in 0..d {
                for b in 0..d {
                    cov[a][b] -= lambda * v[a] * v[b];
                }
            }
            out.push((lambda, v));
        }
        out
    }

    #[test]
    fn components_match_power_iteration() {
        for seed in 0..20 {
            let rows = random_rows(64, 16, seed);
            let p = pca(&rows).unwrap();
            for (k, (lambda, v)) in power_iteration_oracle(&rows, 3).into_iter().enumerate() {
                assert!((p.eigenvalues[k] - lambda).abs() < 1e-8 * lambda.max(1.0), "{seed} {k}");
                for (a, b) in p.components[k].iter().zip(&v) {
                    assert!((a - b).abs() < 1e-6, "{seed} {k}");
                }
            }
        }
    }

    #[test]
    fn orthonormal_and_sorted() {
        for seed in 0..5 {
            let p = pca(&random_rows(40, 12, seed)).unwrap();
            for i in 0..12 {
                for j in 0..12 {
                    let dot: f64 = p.components[i].iter().zip(&p.components[j]).map(|(a, b)| a * b).sum();
                    assert!((dot - if i == j { 1.0 } else { 0.0 }).abs() < 1e-8);
                }
            }
            assert!(p.eigenvalues.windows(2).all(|w| w[0] >= w[1]));
            for c in &p.components {
                let big = c.iter().copied().fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
                assert!(big > 0.0);
            }
        }
    }

    #[test]
    fn single_direction_explains_everything() {
        let dir = [0.3, -0.5, 0.8, 0.1];
        let rows: Vec<Vec<f64>> = (0..30).map(|i| dir.iter().map(|d| d * (i as f64 - 7.0) + 2.0).collect()).collect();
        let p = pca(&rows).unwrap();
        assert!((p.explained_ratio()[0] - 1.0).abs() < 1e-10);
        let m = maps_from_tokens(&rows, 0, 0.5).unwrap();
        assert!(m.pc2.iter().all(|&v| v == 0.0) || (m.explained[1]).abs() < 1e-10);
    }

    #[test]
    fn duplicated_tokens_give_identical_maps() {
        let rows = random_rows(36, 8, 9);
        let mut doubled = rows.clone();
        doubled.extend(rows.iter().cloned());
        let a = maps_from_tokens(&rows, 6, 0.5).unwrap();
        let b = maps_from_tokens(&doubled, 6, 0.5).unwrap();
        let pa = pca(&rows).unwrap();
        let pb = pca(&doubled).unwrap();
        for (x, y) in pa.components.iter().take(2).zip(&pb.components) {
            for (u, v) in x.iter().zip(y) {
                assert!((u - v).abs() < 1e-8);
            }
        }
        assert_eq!(a.mask1, b.mask1[..36]);
        assert_eq!(a.mask2, b.mask2[..36]);
        for (u, v) in a.pc1.iter().zip(&b.pc1) {
            assert!((u - v).abs() < 1e-9);
        }
    }

    #[test]
    fn identical_vectors_are_rejected() {
        assert!(matches!(pca(&vec![vec![1.0, 2.0]; 5]), Err(VizError::Degenerate)));
        assert!(matches!(pca(&[]), Err(VizError::Degenerate)));
    }

    struct ColourTokens;

    impl PatchTokens for ColourTokens {
        fn sub_size(&self) -> usize {
            8
        }
        fn tokens(&self, image: &RgbImage) -> Result<Vec<Vec<f64>>, VizError> {
            let mut out = Vec::new();
            for ty in 0..2 {
                for tx in 0..2 {
                    let p = image.get_pixel(tx * 4 + 1, ty * 4 + 1);
                    out.push(vec![p[0] as f64, p[1] as f64, p[2] as f64]);
                }
            }
            Ok(out)
        }
    }

    #[test]
    fn token_grid_is_image_aligned() {
        // Left half red, right half blue: PC1 separates halves.
        let img = RgbImage::from_fn(64, 64, |x, _| if x < 32 { Rgb([220, 30, 30]) } else { Rgb([30, 30, 220]) });
        let m = pca_feature_map(&img, &ColourTokens, &VizConfig::default()).unwrap();
        assert_eq!(m.side, 8);
        for y in 0..8 {
            for x in 0..8 {
                assert_eq!(m.mask1[y * 8 + x] == m.mask1[0], x < 4);
            }
        }
    }

    #[test]
    fn vit_maps_are_deterministic_and_written() {
        let cfg = VitConfig {
            image_size: 16,
            patch_size: 4,
            dim: 16,
            depth: 1,
            heads: 2,
            mlp_ratio: 2,
        };
        let store = new_vit::<f32>(&cfg, 3).unwrap();
        let model = VitTokens {
            store: &store,
            cfg: &cfg,
            mean: [0.5; 3],
            std: [0.25; 3],
        };
        let img = RgbImage::from_fn(100, 100, |x, y| Rgb([(x * 2) as u8, (y * 2) as u8, ((x + y) % 256) as u8]));
        let a = pca_feature_map(&img, &model, &VizConfig::default()).unwrap();
        let b = pca_feature_map(&img, &model, &VizConfig::default()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.side, 16);
        assert!(a.pc1.iter().all(|v| (0.0..=1.0).contains(v)));
        let dir = tempfile::tempdir().unwrap();
        let paths = write_feature_pngs(dir.path(), "img", &img, &a).unwrap();
        for p in &paths {
            let im = image::open(p).unwrap();
            assert_eq!(im.width(), 100);
        }
    }
}
