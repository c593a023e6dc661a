//! Multi-crop views (global and local crops) with color augmentation and
//! block-wise patch masks for the global crops.

use image::RgbImage;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::rng::keyed_rng;
use crate::slide::resize_box_f32;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ViewError {
    #[error("tile {0}x{1} is smaller than the local crop size {2}")]
    TileTooSmall(u32, u32, usize),
    #[error("invalid view config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MaskConfig {
    /// Probability that a global crop is masked at all.
    pub probability: f64,
    pub min_fraction: f64,
    pub max_fraction: f64,
    /// Block aspect ratio bounds, sampled log-uniformly.
    pub min_aspect: f64,
    pub max_aspect: f64,
    pub min_block: usize,
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self {
            probability: 0.5,
            min_fraction: 0.1,
            max_fraction: 0.5,
            min_aspect: 0.3,
            max_aspect: 1.0 / 0.3,
            min_block: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ViewConfig {
    pub global_size: usize,
    pub local_size: usize,
    pub n_global: usize,
    pub n_local: usize,
    pub patch_size: usize,
    pub global_scale: (f64, f64),
    pub local_scale: (f64, f64),
    pub ratio: (f64, f64),
    pub flip_p: f64,
    pub jitter_p: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
    pub grayscale_p: f64,
    pub mean: [f32; 3],
    pub std: [f32; 3],
    pub mask: MaskConfig,
}

impl Default for ViewConfig {
    fn default() -> Self {
        Self {
            global_size: 64,
            local_size: 32,
            n_global: 2,
            n_local: 8,
            patch_size: 8,
            global_scale: (0.32, 1.0),
            local_scale: (0.05, 0.32),
            ratio: (3.0 / 4.0, 4.0 / 3.0),
            flip_p: 0.5,
            jitter_p: 0.8,
            brightness: 0.4,
            contrast: 0.4,
            saturation: 0.2,
            hue: 0.1,
            grayscale_p: 0.2,
            mean: [0.485, 0.456, 0.406],
            std: [0.229, 0.224, 0.225],
            mask: MaskConfig::default(),
        }
    }
}

impl ViewConfig {
    /// No randomness: whole-tile crops, no flips, jitter, grayscale or masks.
    pub fn deterministic() -> Self {
        Self {
            global_scale: (1.0, 1.0),
            local_scale: (1.0, 1.0),
            flip_p: 0.0,
            jitter_p: 0.0,
            grayscale_p: 0.0,
            mask: MaskConfig {
                probability: 0.0,
                ..MaskConfig::default()
            },
            ..Self::default()
        }
    }

    pub fn global_grid(&self) -> usize {
        self.global_size / self.patch_size
    }

    pub fn validate(&self) -> Result<(), ViewError> {
        let err = |m: &str| Err(ViewError::Config(m.to_string()));
        if self.patch_size == 0 || self.global_size % self.patch_size != 0 || self.local_size % self.patch_size != 0 {
            return err("crop sizes must be multiples of the patch size");
        }
        if self.local_size == 0 || self.global_size == 0 {
            return err("crop sizes must be positive");
        }
        for (lo, hi) in [self.global_scale, self.local_scale, self.ratio] {
            if !(lo > 0.0 && lo <= hi) {
                return err("scale/ratio ranges must satisfy 0 < lo <= hi");
            }
        }
        if self.std.iter().any(|&s| s <= 0.0) {
            return err("std must be positive");
        }
        Ok(())
    }
}

/// A normalized crop, row-major HWC.
#[derive(Debug, Clone, PartialEq)]
pub struct Crop {
    pub size: usize,
    pub data: Vec<f32>,
}

impl Crop {
    /// Patch vectors `[N, 3*p*p]`, each ordered (row, column, channel).
    pub fn patches(&self, patch: usize) -> Vec<f32> {
        let g = self.size / patch;
        let mut out = Vec::with_capacity(self.data.len());
        for py in 0..g {
            for px in 0..g {
                for dy in 0..patch {
                    let row = (py * patch + dy) * self.size + px * patch;
                    out.extend_from_slice(&self.data[row * 3..(row + patch) * 3]);
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Jitter {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CropParams {
    /// Source box `(x, y, w, h)` in tile pixels.
    pub bx: (u32, u32, u32, u32),
    pub out_size: usize,
    pub flip: bool,
    pub jitter: Option<Jitter>,
    pub grayscale: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugLog {
    pub globals: Vec<CropParams>,
    pub locals: Vec<CropParams>,
    pub masks: Vec<Vec<bool>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViewBatch {
    pub globals: Vec<Crop>,
    pub locals: Vec<Crop>,
    /// One token mask per global crop.
    pub masks: Vec<Vec<bool>>,
    pub log: AugLog,
}

fn sample_box<R: Rng>(rng: &mut R, w: u32, h: u32, scale: (f64, f64), ratio: (f64, f64)) -> (u32, u32, u32, u32) {
    let area = (w * h) as f64;
    let (lr0, lr1) = (ratio.0.ln(), ratio.1.ln());
    for _ in 0..10 {
        let target = area * if scale.0 < scale.1 { rng.random_range(scale.0..=scale.1) } else { scale.0 };
        let r = if lr0 < lr1 { rng.random_range(lr0..=lr1) } else { lr0 }.exp();
        let cw = (target * r).sqrt().round() as u32;
        let ch = (target / r).sqrt().round() as u32;
        if cw > 0 && ch > 0 && cw <= w && ch <= h {
            let x = rng.random_range(0..=w - cw);
            let y = rng.random_range(0..=h - ch);
            return (x, y, cw, ch);
        }
    }
    let in_ratio = w as f64 / h as f64;
    let (cw, ch) = if in_ratio < ratio.0 {
        (w, ((w as f64 / ratio.0).round() as u32).min(h))
    } else if in_ratio > ratio.1 {
        (((h as f64 * ratio.1).round() as u32).min(w), h)
    } else {
        (w, h)
    };
    ((w - cw) / 2, (h - ch) / 2, cw, ch)
}

fn sample_params<R: Rng>(rng: &mut R, tile: &RgbImage, cfg: &ViewConfig, global: bool) -> CropParams {
    let (scale, out_size) = if global {
        (cfg.global_scale, cfg.global_size)
    } else {
        (cfg.local_scale, cfg.local_size)
    };
    let bx = sample_box(rng, tile.width(), tile.height(), scale, cfg.ratio);
    let flip = rng.random_bool(cfg.flip_p.clamp(0.0, 1.0));
    let jitter = if rng.random_bool(cfg.jitter_p.clamp(0.0, 1.0)) {
        let mut f = |s: f64| if s > 0.0 { rng.random_range((1.0 - s).max(0.0)..=1.0 + s) } else { 1.0 };
        let brightness = f(cfg.brightness);
        let contrast = f(cfg.contrast);
        let saturation = f(cfg.saturation);
        let hue = if cfg.hue > 0.0 { rng.random_range(-cfg.hue..=cfg.hue) } else { 0.0 };
        Some(Jitter {
            brightness,
            contrast,
            saturation,
            hue,
        })
    } else {
        None
    };
    let grayscale = rng.random_bool(cfg.grayscale_p.clamp(0.0, 1.0));
    CropParams {
        bx,
        out_size,
        flip,
        jitter,
        grayscale,
    }
}

fn luma(p: &[f32]) -> f32 {
    0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]
}

fn rgb_to_hsv(p: [f32; 3]) -> [f32; 3] {
    let max = p[0].max(p[1]).max(p[2]);
    let min = p[0].min(p[1]).min(p[2]);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == p[0] {
        ((p[1] - p[2]) / d).rem_euclid(6.0) / 6.0
    } else if max == p[1] {
        ((p[2] - p[0]) / d + 2.0) / 6.0
    } else {
        ((p[0] - p[1]) / d + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    [h, s, max]
}

fn hsv_to_rgb([h, s, v]: [f32; 3]) -> [f32; 3] {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i as i32 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

fn apply_jitter(px: &mut [f32], j: &Jitter) {
    for v in px.iter_mut() {
        *v = (*v * j.brightness as f32).clamp(0.0, 1.0);
    }
    let n = px.len() / 3;
    let mean = px.chunks(3).map(luma).sum::<f32>() / n as f32;
    let c = j.contrast as f32;
    for v in px.iter_mut() {
        *v = (c * *v + (1.0 - c) * mean).clamp(0.0, 1.0);
    }
    let s = j.saturation as f32;
    for p in px.chunks_mut(3) {
        let g = luma(p);
        for v in p.iter_mut() {
            *v = (s * *v + (1.0 - s) * g).clamp(0.0, 1.0);
        }
    }
    if j.hue != 0.0 {
        for p in px.chunks_mut(3) {
            let mut hsv = rgb_to_hsv([p[0], p[1], p[2]]);
            hsv[0] = (hsv[0] + j.hue as f32).rem_euclid(1.0);
            p.copy_from_slice(&hsv_to_rgb(hsv));
        }
    }
}

/// Render one crop from its logged parameters.
pub fn render_crop(tile: &RgbImage, params: &CropParams, cfg: &ViewConfig) -> Crop {
    let (x, y, w, h) = params.bx;
    let n = params.out_size;
    let mut px = resize_box_f32(tile, (x as f64, y as f64, w as f64, h as f64), n, n);
    px.iter_mut().for_each(|v| *v /= 255.0);
    if params.flip {
        for row in px.chunks_mut(n * 3) {
            for i in 0..n / 2 {
                for c in 0..3 {
                    row.swap(i * 3 + c, (n - 1 - i) * 3 + c);
                }
            }
        }
    }
    if let Some(j) = &params.jitter {
        apply_jitter(&mut px, j);
    }
    if params.grayscale {
        for p in px.chunks_mut(3) {
            let g = luma(p);
            p.fill(g);
        }
    }
    for p in px.chunks_mut(3) {
        for c in 0..3 {
            p[c] = (p[c] - cfg.mean[c]) / cfg.std[c];
        }
    }
    Crop { size: n, data: px }
}

/// Replay a view batch from its augmentation log.
pub fn render_views(tile: &RgbImage, cfg: &ViewConfig, log: &AugLog) -> ViewBatch {
    ViewBatch {
        globals: log.globals.iter().map(|p| render_crop(tile, p, cfg)).collect(),
        locals: log.locals.iter().map(|p| render_crop(tile, p, cfg)).collect(),
        masks: log.masks.clone(),
        log: log.clone(),
    }
}

pub fn make_views(tile: &RgbImage, cfg: &ViewConfig, seed: u64) -> Result<ViewBatch, ViewError> {
    cfg.validate()?;
    if (tile.width() as usize) < cfg.local_size || (tile.height() as usize) < cfg.local_size {
        return Err(ViewError::TileTooSmall(tile.width(), tile.height(), cfg.local_size));
    }
    let mut rng = keyed_rng(seed, &[0]);
    let globals: Vec<CropParams> = (0..cfg.n_global).map(|_| sample_params(&mut rng, tile, cfg, true)).collect();
    let locals = (0..cfg.n_local).map(|_| sample_params(&mut rng, tile, cfg, false)).collect();
    let g = cfg.global_grid();
    let masks = (0..cfg.n_global)
        .map(|i| mask_patches((g, g), &cfg.mask, seed ^ (0x6d61_736b << 8) ^ i as u64))
        .collect();
    let log = AugLog { globals, locals, masks };
    Ok(render_views(tile, cfg, &log))
}

/// Block-wise token mask over a `(rows, cols)` grid.
pub fn mask_patches(grid: (usize, usize), cfg: &MaskConfig, seed: u64) -> Vec<bool> {
    let (rows, cols) = grid;
    let n = rows * cols;
    let mut mask = vec![false; n];
    let mut rng = keyed_rng(seed, &[1]);
    if n == 0 || !rng.random_bool(cfg.probability.clamp(0.0, 1.0)) {
        return mask;
    }
    let frac = if cfg.min_fraction < cfg.max_fraction {
        rng.random_range(cfg.min_fraction..=cfg.max_fraction)
    } else {
        cfg.max_fraction
    };
    let target = ((frac.clamp(0.0, 1.0) * n as f64).round() as usize).min(n);
    let (la, lb) = (cfg.min_aspect.ln(), cfg.max_aspect.ln());
    let mut masked = 0;
    while masked < target {
        let remaining = target - masked;
        let mut progressed = false;
        for _ in 0..10 {
            let lo = cfg.min_block.clamp(1, remaining);
            let area = rng.random_range(lo..=remaining) as f64;
            let aspect = if la < lb { rng.random_range(la..=lb) } else { la }.exp();
            let h = ((area * aspect).sqrt().round() as usize).clamp(1, rows);
            let w = ((area / aspect).sqrt().round() as usize).clamp(1, cols);
            let top = rng.random_range(0..=rows - h);
            let left = rng.random_range(0..=cols - w);
            let fresh = (top..top + h)
                .flat_map(|r| (left..left + w).map(move |c| r * cols + c))
                .filter(|&i| !mask[i])
                .count();
            if fresh > 0 && fresh <= remaining {
                for r in top..top + h {
                    mask[r * cols + left..r * cols + left + w].fill(true);
                }
                masked += fresh;
                progressed = true;
                break;
            }
        }
        if !progressed {
            // Fall back to a single free cell.
            let free: Vec<usize> = (0..n).filter(|&i| !mask[i]).collect();
            mask[free[rng.random_range(0..free.len())]] = true;
            masked += 1;
        }
    }
    mask
}

/// Per-channel mean and standard deviation over a set of tiles, in `[0, 1]` units.
pub fn channel_stats<'a>(tiles: impl IntoIterator<Item = &'a RgbImage>) -> ([f32; 3], [f32; 3]) {
    let mut sum = [0.0f64; 3];
    let mut sq = [0.0f64; 3];
    let mut n = 0u64;
    for t in tiles {
        for p in t.pixels() {
            for c in 0..3 {
                let v = p.0[c] as f64 / 255.0;
                sum[c] += v;
                sq[c] += v * v;
            }
            n += 1;
        }
    }
    let mut mean = [0.0f32; 3];
    let mut std = [1.0f32; 3];
    if n > 0 {
        for c in 0..3 {
            let m = sum[c] / n as f64;
            mean[c] = m as f32;
            std[c] = ((sq[c] / n as f64 - m * m).max(0.0).sqrt().max(1e-3)) as f32;
        }
    }
    (mean, std)
}
