//! Slide bundles on disk, bilinear resampling and synthetic slides with
//! ground-truth masks.
//!
//! A bundle is a directory holding `meta.json` and `level0.png`, optionally
//! `tissue_mask.png` and `cancer_mask.png` (8-bit grayscale, 0/255).

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use image::{ColorType, DynamicImage, GrayImage, ImageReader, Luma, Rgb, RgbImage};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::rng::keyed_rng;
use crate::tiler::{hsv_of, is_foreground};

#[derive(Debug, thiserror::Error)]
pub enum SlideError {
    #[error("missing file {0}")]
    Missing(PathBuf),
    #[error("dimension mismatch: {0}")]
    Dimensions(String),
    #[error("unsupported pixel format in {path}: {color:?}")]
    UnsupportedFormat { path: PathBuf, color: ColorType },
    #[error("invalid metadata: {0}")]
    Metadata(String),
    #[error("region out of bounds: {0}")]
    OutOfBounds(String),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("image codec: {0}")]
    Image(#[from] image::ImageError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlideMeta {
    pub slide_id: String,
    pub width: u32,
    pub height: u32,
    pub mpp: f64,
}

/// An immutable full-resolution slide raster with optional ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct SlideBundle {
    pub slide_id: String,
    pub width: u32,
    pub height: u32,
    pub mpp: f64,
    pub raster: RgbImage,
    pub tissue_mask: Option<GrayImage>,
    pub cancer_mask: Option<GrayImage>,
}

impl SlideBundle {
    pub fn new(slide_id: impl Into<String>, mpp: f64, raster: RgbImage) -> Result<Self, SlideError> {
        let (width, height) = raster.dimensions();
        let b = Self {
            slide_id: slide_id.into(),
            width,
            height,
            mpp,
            raster,
            tissue_mask: None,
            cancer_mask: None,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<(), SlideError> {
        if self.width == 0 || self.height == 0 {
            return Err(SlideError::Dimensions("empty slide".into()));
        }
        if self.raster.dimensions() != (self.width, self.height) {
            return Err(SlideError::Dimensions(format!(
                "metadata says {}x{} but raster is {}x{}",
                self.width,
                self.height,
                self.raster.width(),
                self.raster.height()
            )));
        }
        for (name, m) in [("tissue_mask", &self.tissue_mask), ("cancer_mask", &self.cancer_mask)] {
            if let Some(m) = m {
                if m.dimensions() != (self.width, self.height) {
                    return Err(SlideError::Dimensions(format!("{name} is {:?}", m.dimensions())));
                }
            }
        }
        Ok(())
    }

    pub fn meta(&self) -> SlideMeta {
        SlideMeta {
            slide_id: self.slide_id.clone(),
            width: self.width,
            height: self.height,
            mpp: self.mpp,
        }
    }
}

fn require(path: &Path) -> Result<(), SlideError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(SlideError::Missing(path.to_path_buf()))
    }
}

fn read_rgb(path: &Path) -> Result<RgbImage, SlideError> {
    require(path)?;
    match ImageReader::open(path)?.decode()? {
        DynamicImage::ImageRgb8(img) => Ok(img),
        other => Err(SlideError::UnsupportedFormat {
            path: path.to_path_buf(),
            color: other.color(),
        }),
    }
}

fn read_mask(path: &Path) -> Result<GrayImage, SlideError> {
    match ImageReader::open(path)?.decode()? {
        DynamicImage::ImageLuma8(img) => Ok(img),
        other => Err(SlideError::UnsupportedFormat {
            path: path.to_path_buf(),
            color: other.color(),
        }),
    }
}

/// Load a bundle directory.
pub fn load_slide(dir: &Path) -> Result<SlideBundle, SlideError> {
    let meta_path = dir.join("meta.json");
    require(&meta_path)?;
    let meta: SlideMeta = serde_json::from_slice(&fs::read(&meta_path)?)?;
    if !(meta.mpp.is_finite() && meta.mpp > 0.0) {
        return Err(SlideError::Metadata(format!("mpp {}", meta.mpp)));
    }
    let raster = read_rgb(&dir.join("level0.png"))?;
    let opt_mask = |name: &str| -> Result<Option<GrayImage>, SlideError> {
        let p = dir.join(name);
        if p.is_file() {
            read_mask(&p).map(Some)
        } else {
            Ok(None)
        }
    };
    let bundle = SlideBundle {
        slide_id: meta.slide_id,
        width: meta.width,
        height: meta.height,
        mpp: meta.mpp,
        raster,
        tissue_mask: opt_mask("tissue_mask.png")?,
        cancer_mask: opt_mask("cancer_mask.png")?,
    };
    bundle.validate()?;
    Ok(bundle)
}

/// Write a bundle directory (created if missing).
pub fn store_slide(bundle: &SlideBundle, dir: &Path) -> Result<(), SlideError> {
    bundle.validate()?;
    fs::create_dir_all(dir)?;
    fs::write(dir.join("meta.json"), serde_json::to_vec_pretty(&bundle.meta())?)?;
    bundle.raster.save(dir.join("level0.png"))?;
    if let Some(m) = &bundle.tissue_mask {
        m.save(dir.join("tissue_mask.png"))?;
    }
    if let Some(m) = &bundle.cancer_mask {
        m.save(dir.join("cancer_mask.png"))?;
    }
    Ok(())
}

#[inline]
fn round_half_away(x: f64) -> u8 {
    // f64::round rounds half away from zero.
    x.round().clamp(0.0, 255.0) as u8
}

/// Bilinear sample at continuous source coordinates (pixel centers at
/// integer positions), clamped to the border.
pub fn bilinear_sample(img: &RgbImage, sx: f64, sy: f64) -> [f64; 3] {
    let (w, h) = img.dimensions();
    let sx = sx.clamp(0.0, (w - 1) as f64);
    let sy = sy.clamp(0.0, (h - 1) as f64);
    let x0 = sx.floor() as u32;
    let y0 = sy.floor() as u32;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = sx - x0 as f64;
    let fy = sy - y0 as f64;
    let p = |x, y| img.get_pixel(x, y).0;
    let (a, b, c, d) = (p(x0, y0), p(x1, y0), p(x0, y1), p(x1, y1));
    let mut out = [0.0; 3];
    for ch in 0..3 {
        let top = a[ch] as f64 * (1.0 - fx) + b[ch] as f64 * fx;
        let bot = c[ch] as f64 * (1.0 - fx) + d[ch] as f64 * fx;
        out[ch] = top * (1.0 - fy) + bot * fy;
    }
    out
}

/// Downsample by an integer factor to `ceil(w/f) x ceil(h/f)` using
/// half-pixel-center bilinear sampling.
pub fn downsample_image(img: &RgbImage, factor: u32) -> Result<RgbImage, SlideError> {
    let (w, h) = img.dimensions();
    if factor < 1 || factor > w.min(h) {
        return Err(SlideError::Invalid(format!("downsample factor {factor} for {w}x{h}")));
    }
    if factor == 1 {
        return Ok(img.clone());
    }
    let (ow, oh) = (w.div_ceil(factor), h.div_ceil(factor));
    let f = factor as f64;
    Ok(RgbImage::from_fn(ow, oh, |i, j| {
        let s = bilinear_sample(img, (i as f64 + 0.5) * f - 0.5, (j as f64 + 0.5) * f - 0.5);
        Rgb([round_half_away(s[0]), round_half_away(s[1]), round_half_away(s[2])])
    }))
}

pub fn downsample(bundle: &SlideBundle, factor: u32) -> Result<RgbImage, SlideError> {
    downsample_image(&bundle.raster, factor)
}

/// Bilinear resize of a source box `(x, y, w, h)` to `out_w x out_h`, as
/// unrounded `[0, 255]` values (row-major, three channels per pixel).
pub fn resize_box_f32(img: &RgbImage, bx: (f64, f64, f64, f64), out_w: usize, out_h: usize) -> Vec<f32> {
    let (x0, y0, bw, bh) = bx;
    let (scale_x, scale_y) = (bw / out_w as f64, bh / out_h as f64);
    let mut out = Vec::with_capacity(out_w * out_h * 3);
    for j in 0..out_h {
        let sy = y0 + (j as f64 + 0.5) * scale_y - 0.5;
        for i in 0..out_w {
            let sx = x0 + (i as f64 + 0.5) * scale_x - 0.5;
            out.extend(bilinear_sample(img, sx, sy).iter().map(|&v| v as f32));
        }
    }
    out
}

/// Bilinear resize of a whole image to a new size, rounded to 8 bits.
pub fn resize_image(img: &RgbImage, out_w: u32, out_h: u32) -> RgbImage {
    let (w, h) = img.dimensions();
    let v = resize_box_f32(img, (0.0, 0.0, w as f64, h as f64), out_w as usize, out_h as usize);
    RgbImage::from_fn(out_w, out_h, |i, j| {
        let k = ((j * out_w + i) * 3) as usize;
        Rgb([
            round_half_away(v[k] as f64),
            round_half_away(v[k + 1] as f64),
            round_half_away(v[k + 2] as f64),
        ])
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "lowercase")]
pub enum Region {
    Rect { x: u32, y: u32, w: u32, h: u32 },
    /// Pixel `(px, py)` is inside when its center lies in the ellipse.
    Ellipse { cx: f64, cy: f64, rx: f64, ry: f64 },
}

impl Region {
    fn contains(&self, px: u32, py: u32) -> bool {
        match *self {
            Region::Rect { x, y, w, h } => px >= x && px < x + w && py >= y && py < y + h,
            Region::Ellipse { cx, cy, rx, ry } => {
                let dx = (px as f64 + 0.5 - cx) / rx;
                let dy = (py as f64 + 0.5 - cy) / ry;
                dx * dx + dy * dy <= 1.0
            }
        }
    }

    fn within(&self, width: u32, height: u32) -> bool {
        match *self {
            Region::Rect { x, y, w, h } => w > 0 && h > 0 && x as u64 + w as u64 <= width as u64 && y as u64 + h as u64 <= height as u64,
            Region::Ellipse { cx, cy, rx, ry } => {
                rx > 0.0 && ry > 0.0 && cx - rx >= 0.0 && cy - ry >= 0.0 && cx + rx <= width as f64 && cy + ry <= height as f64
            }
        }
    }
}

/// Stain colors for synthetic tissue. Every color, with and without noise,
/// must pass the tiler's foreground gate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StainPalette {
    pub tissue: Vec<[u8; 3]>,
    pub cancer: Vec<[u8; 3]>,
    /// Per-channel uniform jitter amplitude.
    pub noise: u8,
}

impl Default for StainPalette {
    fn default() -> Self {
        Self {
            // Eosin-dominant pinks with some hematoxylin purple.
            tissue: vec![[233, 150, 200], [220, 120, 190], [236, 170, 212], [150, 100, 190]],
            // Dense, dark nuclei.
            cancer: vec![[110, 70, 160], [130, 80, 175], [100, 60, 150], [120, 90, 170]],
            noise: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub slide_id: String,
    pub width: u32,
    pub height: u32,
    #[serde(default = "default_mpp")]
    pub mpp: f64,
    #[serde(default)]
    pub tissue: Vec<Region>,
    #[serde(default)]
    pub cancer: Vec<Region>,
    #[serde(default)]
    pub palette: StainPalette,
}

fn default_mpp() -> f64 {
    0.5
}

/// Paint a synthetic slide. Tissue = union of tissue and cancer regions;
/// background is pure white.
pub fn synth_slide(spec: &SynthSpec, seed: u64) -> Result<SlideBundle, SlideError> {
    if spec.width == 0 || spec.height == 0 {
        return Err(SlideError::Dimensions("empty synthetic slide".into()));
    }
    for r in spec.tissue.iter().chain(&spec.cancer) {
        if !r.within(spec.width, spec.height) {
            return Err(SlideError::OutOfBounds(format!("{r:?} in {}x{}", spec.width, spec.height)));
        }
    }
    for (name, colors) in [("tissue", &spec.palette.tissue), ("cancer", &spec.palette.cancer)] {
        if colors.is_empty() {
            return Err(SlideError::Invalid(format!("empty {name} palette")));
        }
        if let Some(c) = colors.iter().find(|c| !is_foreground(hsv_of(**c))) {
            return Err(SlideError::Invalid(format!("{name} color {c:?} is not foreground")));
        }
    }
    let mut rng = keyed_rng(seed, &[crate::rng::hash_str(&spec.slide_id)]);
    let (w, h) = (spec.width, spec.height);
    let mut raster = RgbImage::from_pixel(w, h, Rgb([255, 255, 255]));
    let mut tissue_mask = GrayImage::new(w, h);
    let mut cancer_mask = GrayImage::new(w, h);
    let noise = spec.palette.noise as i32;
    for y in 0..h {
        for x in 0..w {
            let in_cancer = spec.cancer.iter().any(|r| r.contains(x, y));
            let in_tissue = in_cancer || spec.tissue.iter().any(|r| r.contains(x, y));
            if !in_tissue {
                continue;
            }
            let colors = if in_cancer { &spec.palette.cancer } else { &spec.palette.tissue };
            let base = colors[rng.random_range(0..colors.len())];
            let mut px = base;
            if noise > 0 {
                for c in px.iter_mut() {
                    *c = (*c as i32 + rng.random_range(-noise..=noise)).clamp(0, 255) as u8;
                }
                if !is_foreground(hsv_of(px)) {
                    px = base;
                }
            }
            raster.put_pixel(x, y, Rgb(px));
            tissue_mask.put_pixel(x, y, Luma([255]));
            if in_cancer {
                cancer_mask.put_pixel(x, y, Luma([255]));
            }
        }
    }
    Ok(SlideBundle {
        slide_id: spec.slide_id.clone(),
        width: w,
        height: h,
        mpp: spec.mpp,
        raster,
        tissue_mask: Some(tissue_mask),
        cancer_mask: Some(cancer_mask),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub slide_id: String,
    /// Bundle directory, relative to the manifest file when not absolute.
    pub path: PathBuf,
    pub specimen_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub block_id: Option<String>,
    #[serde(default)]
    pub labels: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SlideManifest {
    pub slides: Vec<ManifestEntry>,
    #[serde(skip)]
    pub root: PathBuf,
}

impl SlideManifest {
    pub fn validate(&self) -> Result<(), SlideError> {
        let mut seen = HashSet::new();
        for e in &self.slides {
            if !seen.insert(e.slide_id.as_str()) {
                return Err(SlideError::Metadata(format!("duplicate slide_id {}", e.slide_id)));
            }
        }
        Ok(())
    }

    pub fn resolve(&self, entry: &ManifestEntry) -> PathBuf {
        if entry.path.is_absolute() {
            entry.path.clone()
        } else {
            self.root.join(&entry.path)
        }
    }

    /// Parse a manifest and check that ids are unique and every bundle exists.
    pub fn load(path: &Path) -> Result<Self, SlideError> {
        require(path)?;
        let mut m: SlideManifest = serde_json::from_slice(&fs::read(path)?)?;
        m.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        m.validate()?;
        for e in &m.slides {
            require(&m.resolve(e).join("meta.json"))?;
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<(), SlideError> {
        self.validate()?;
        fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn get(&self, slide_id: &str) -> Option<&ManifestEntry> {
        self.slides.iter().find(|e| e.slide_id == slide_id)
    }

    pub fn load_bundle(&self, slide_id: &str) -> Result<SlideBundle, SlideError> {
        let e = self
            .get(slide_id)
            .ok_or_else(|| SlideError::Metadata(format!("unknown slide {slide_id}")))?;
        load_slide(&self.resolve(e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn gradient(w: u32, h: u32) -> RgbImage {
        RgbImage::from_fn(w, h, |x, y| Rgb([(x * 7 % 256) as u8, (y * 5 % 256) as u8, ((x + y) * 3 % 256) as u8]))
    }

    /// Independent scalar bilinear resampler: explicit loops, its own clamping.
    fn reference_downsample(img: &RgbImage, f: u32) -> Vec<[u8; 3]> {
        let (w, h) = img.dimensions();
        let (ow, oh) = ((w + f - 1) / f, (h + f - 1) / f);
        let mut out = Vec::new();
        for j in 0..oh {
            for i in 0..ow {
                let mut sx = (i as f64 + 0.5) * f as f64 - 0.5;
                let mut sy = (j as f64 + 0.5) * f as f64 - 0.5;
                sx = sx.max(0.0).min((w - 1) as f64);
                sy = sy.max(0.0).min((h - 1) as f64);
                let xl = sx as u32;
                let yl = sy as u32;
                let xh = if xl + 1 < w { xl + 1 } else { xl };
                let yh = if yl + 1 < h { yl + 1 } else { yl };
                let (ax, ay) = (sx - xl as f64, sy - yl as f64);
                let mut px = [0u8; 3];
                for c in 0..3 {
                    let v = |x: u32, y: u32| img.get_pixel(x, y).0[c] as f64;
                    let val = (1.0 - ax) * (1.0 - ay) * v(xl, yl)
                        + ax * (1.0 - ay) * v(xh, yl)
                        + (1.0 - ax) * ay * v(xl, yh)
                        + ax * ay * v(xh, yh);
                    let r = if val - val.floor() == 0.5 { val.floor() + 1.0 } else { val.round() };
                    px[c] = r as u8;
                }
                out.push(px);
            }
        }
        out
    }

    #[test]
    fn downsample_32_gradient_matches_reference() {
        let img = gradient(32, 32);
        let out = downsample_image(&img, 16).unwrap();
        assert_eq!(out.dimensions(), (2, 2));
        let got: Vec<[u8; 3]> = out.pixels().map(|p| p.0).collect();
        assert_eq!(got, reference_downsample(&img, 16));
    }

    #[test]
    fn downsample_odd_sizes_match_reference() {
        let img = gradient(53, 37);
        for f in [2, 3, 7, 16] {
            let out = downsample_image(&img, f).unwrap();
            assert_eq!(out.dimensions(), (53u32.div_ceil(f), 37u32.div_ceil(f)));
            let got: Vec<[u8; 3]> = out.pixels().map(|p| p.0).collect();
            assert_eq!(got, reference_downsample(&img, f), "factor {f}");
        }
    }

    #[test]
    fn downsample_constant_is_constant() {
        let img = RgbImage::from_pixel(100, 70, Rgb([12, 200, 99]));
        let out = downsample_image(&img, 16).unwrap();
        assert!(out.pixels().all(|p| p.0 == [12, 200, 99]));
    }

    #[test]
    fn downsample_rejects_bad_factor() {
        let img = gradient(8, 8);
        assert!(downsample_image(&img, 0).is_err());
        assert!(downsample_image(&img, 9).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn downsample_by_one_is_identity(w in 1u32..20, h in 1u32..20, seed in any::<u64>()) {
            let mut rng = keyed_rng(seed, &[]);
            let img = RgbImage::from_fn(w, h, |_, _| Rgb([rng.random(), rng.random(), rng.random()]));
            prop_assert_eq!(downsample_image(&img, 1).unwrap(), img);
        }
    }

    fn rect_spec(w: u32, h: u32, tissue: Vec<Region>) -> SynthSpec {
        SynthSpec {
            slide_id: "s".into(),
            width: w,
            height: h,
            mpp: 0.5,
            tissue,
            cancer: vec![],
            palette: StainPalette::default(),
        }
    }

    #[test]
    fn synth_without_tissue_has_empty_mask() {
        let b = synth_slide(&rect_spec(64, 64, vec![]), 1).unwrap();
        assert!(b.tissue_mask.unwrap().pixels().all(|p| p.0[0] == 0));
        assert!(b.raster.pixels().all(|p| p.0 == [255, 255, 255]));
    }

    #[test]
    fn synth_rect_mask_count_and_foreground_colors() {
        let spec = rect_spec(500, 400, vec![Region::Rect { x: 30, y: 50, w: 224, h: 224 }]);
        let b = synth_slide(&spec, 5).unwrap();
        let mask = b.tissue_mask.as_ref().unwrap();
        let set = mask.pixels().filter(|p| p.0[0] == 255).count();
        assert_eq!(set, 224 * 224);
        for (x, y, p) in mask.enumerate_pixels() {
            let fg = is_foreground(hsv_of(b.raster.get_pixel(x, y).0));
            assert_eq!(fg, p.0[0] == 255);
        }
    }

    #[test]
    fn synth_is_deterministic() {
        let spec = SynthSpec {
            cancer: vec![Region::Ellipse { cx: 100.0, cy: 90.0, rx: 40.0, ry: 30.0 }],
            ..rect_spec(256, 256, vec![Region::Rect { x: 0, y: 0, w: 200, h: 180 }])
        };
        assert_eq!(synth_slide(&spec, 9).unwrap(), synth_slide(&spec, 9).unwrap());
        assert_ne!(synth_slide(&spec, 9).unwrap().raster, synth_slide(&spec, 10).unwrap().raster);
    }

    #[test]
    fn synth_rejects_out_of_bounds() {
        let spec = rect_spec(100, 100, vec![Region::Rect { x: 50, y: 0, w: 51, h: 10 }]);
        assert!(matches!(synth_slide(&spec, 0), Err(SlideError::OutOfBounds(_))));
    }

    #[test]
    fn store_then_load_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SynthSpec {
            cancer: vec![Region::Rect { x: 10, y: 10, w: 20, h: 20 }],
            ..rect_spec(448, 448, vec![Region::Rect { x: 0, y: 0, w: 300, h: 448 }])
        };
        let b = synth_slide(&spec, 3).unwrap();
        store_slide(&b, dir.path()).unwrap();
        let back = load_slide(dir.path()).unwrap();
        assert_eq!(back.width, 448);
        assert_eq!(back.height, 448);
        assert_eq!(back, b);
    }

    #[test]
    fn load_detects_dimension_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let b = SlideBundle::new("x", 0.5, RgbImage::new(448, 448)).unwrap();
        store_slide(&b, dir.path()).unwrap();
        let meta = SlideMeta {
            width: 512,
            height: 512,
            ..b.meta()
        };
        fs::write(dir.path().join("meta.json"), serde_json::to_vec(&meta).unwrap()).unwrap();
        assert!(matches!(load_slide(dir.path()), Err(SlideError::Dimensions(_))));
    }

    #[test]
    fn load_rejects_16_bit_and_missing() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_slide(dir.path()), Err(SlideError::Missing(_))));
        let b = SlideBundle::new("x", 0.5, RgbImage::new(16, 16)).unwrap();
        store_slide(&b, dir.path()).unwrap();
        let deep = image::ImageBuffer::<Rgb<u16>, Vec<u16>>::new(16, 16);
        deep.save(dir.path().join("level0.png")).unwrap();
        assert!(matches!(load_slide(dir.path()), Err(SlideError::UnsupportedFormat { .. })));
    }

    #[test]
    fn meta_ignores_unknown_keys() {
        let m: SlideMeta =
            serde_json::from_str(r#"{"slide_id":"a","width":3,"height":4,"mpp":0.5,"scanner":"x"}"#).unwrap();
        assert_eq!(m.width, 3);
    }
}
