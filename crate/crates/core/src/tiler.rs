//! Foreground detection on the 16x-downsampled slide and the non-overlapping
//! 224-pixel tile grid.

use std::io::{BufRead, Write};

use image::{GrayImage, Luma, RgbImage};
use serde::{Deserialize, Serialize};

use crate::slide::{downsample, SlideBundle, SlideError};

pub const DOWNSAMPLE: u32 = 16;
pub const TILE_SIZE: u32 = 224;
/// Mask pixels per tile side: 224 / 16.
pub const FOOTPRINT: u32 = TILE_SIZE / DOWNSAMPLE;
pub const DEFAULT_MIN_TISSUE: f64 = 0.25;

pub const HUE_RANGE: (u8, u8) = (90, 180);
pub const SAT_RANGE: (u8, u8) = (8, 255);
pub const VAL_RANGE: (u8, u8) = (103, 255);

/// Round `num / den` (den > 0) to the nearest integer, ties away from zero.
fn div_round(num: i64, den: i64) -> i64 {
    if num >= 0 {
        (2 * num + den) / (2 * den)
    } else {
        -((-2 * num + den) / (2 * den))
    }
}

/// 8-bit HSV with hue in half-degrees (`0..=180`), integer arithmetic only.
pub fn hsv_of(rgb: [u8; 3]) -> [u8; 3] {
    let [r, g, b] = rgb.map(i64::from);
    let v = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = v - min;
    let s = if v == 0 { 0 } else { div_round(255 * delta, v) };
    let h = if delta == 0 {
        0
    } else {
        // Hue in half-degrees as the fraction num / delta, in [0, 180).
        let mut num = if v == r {
            30 * (g - b)
        } else if v == g {
            60 * delta + 30 * (b - r)
        } else {
            120 * delta + 30 * (r - g)
        };
        if num < 0 {
            num += 180 * delta;
        }
        div_round(num, delta)
    };
    [h as u8, s as u8, v as u8]
}

pub fn is_foreground(hsv: [u8; 3]) -> bool {
    let [h, s, v] = hsv;
    (HUE_RANGE.0..=HUE_RANGE.1).contains(&h)
        && (SAT_RANGE.0..=SAT_RANGE.1).contains(&s)
        && (VAL_RANGE.0..=VAL_RANGE.1).contains(&v)
}

/// Binary tissue mask at 1/16 resolution (stored 0/255).
#[derive(Debug, Clone, PartialEq)]
pub struct ForegroundMask {
    pub mask: GrayImage,
}

impl ForegroundMask {
    pub fn from_downsampled(img: &RgbImage) -> Self {
        let mask = GrayImage::from_fn(img.width(), img.height(), |x, y| {
            Luma([if is_foreground(hsv_of(img.get_pixel(x, y).0)) { 255 } else { 0 }])
        });
        Self { mask }
    }

    pub fn dimensions(&self) -> (u32, u32) {
        self.mask.dimensions()
    }

    pub fn is_set(&self, x: u32, y: u32) -> bool {
        self.mask.get_pixel(x, y).0[0] != 0
    }

    pub fn count(&self) -> usize {
        self.mask.pixels().filter(|p| p.0[0] != 0).count()
    }
}

pub fn foreground_mask(bundle: &SlideBundle) -> Result<ForegroundMask, SlideError> {
    if bundle.width < DOWNSAMPLE || bundle.height < DOWNSAMPLE {
        return Err(SlideError::Invalid(format!(
            "slide {}x{} is smaller than the downsample factor",
            bundle.width, bundle.height
        )));
    }
    Ok(ForegroundMask::from_downsampled(&downsample(bundle, DOWNSAMPLE)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TileRef {
    pub slide_id: String,
    pub x: u32,
    pub y: u32,
    pub size: u32,
    pub tissue_fraction: f64,
}

/// Grid tiles whose 14x14 mask footprint has at least `min_tissue` set pixels,
/// row-major. Counts come from a summed-area table.
pub fn tiles_from_mask(slide_id: &str, width: u32, height: u32, mask: &ForegroundMask, min_tissue: f64) -> Vec<TileRef> {
    let (mw, mh) = mask.dimensions();
    let (mw, mh) = (mw as usize, mh as usize);
    let mut sat = vec![0u32; (mw + 1) * (mh + 1)];
    for y in 0..mh {
        let mut row = 0u32;
        for x in 0..mw {
            row += mask.is_set(x as u32, y as u32) as u32;
            sat[(y + 1) * (mw + 1) + x + 1] = sat[y * (mw + 1) + x + 1] + row;
        }
    }
    let area = (FOOTPRINT * FOOTPRINT) as f64;
    let mut out = Vec::new();
    for ty in 0..height / TILE_SIZE {
        for tx in 0..width / TILE_SIZE {
            let (x0, y0) = ((tx * FOOTPRINT) as usize, (ty * FOOTPRINT) as usize);
            let (x1, y1) = (x0 + FOOTPRINT as usize, y0 + FOOTPRINT as usize);
            let at = |x: usize, y: usize| sat[y * (mw + 1) + x] as i64;
            let count = at(x1, y1) - at(x0, y1) - at(x1, y0) + at(x0, y0);
            let fraction = count as f64 / area;
            if fraction >= min_tissue {
                out.push(TileRef {
                    slide_id: slide_id.to_string(),
                    x: tx * TILE_SIZE,
                    y: ty * TILE_SIZE,
                    size: TILE_SIZE,
                    tissue_fraction: fraction,
                });
            }
        }
    }
    out
}

pub fn extract_tiles(bundle: &SlideBundle, min_tissue: f64) -> Result<Vec<TileRef>, SlideError> {
    if !(0.0..=1.0).contains(&min_tissue) {
        return Err(SlideError::Invalid(format!("min_tissue {min_tissue}")));
    }
    if bundle.width < DOWNSAMPLE || bundle.height < DOWNSAMPLE {
        return Ok(Vec::new());
    }
    let mask = foreground_mask(bundle)?;
    Ok(tiles_from_mask(&bundle.slide_id, bundle.width, bundle.height, &mask, min_tissue))
}

/// Copy a tile's pixels out of the slide raster.
pub fn tile_image(bundle: &SlideBundle, tile: &TileRef) -> RgbImage {
    image::imageops::crop_imm(&bundle.raster, tile.x, tile.y, tile.size, tile.size).to_image()
}

pub fn write_tiles_jsonl<W: Write>(tiles: &[TileRef], mut w: W) -> std::io::Result<()> {
    for t in tiles {
        serde_json::to_writer(&mut w, t)?;
        w.write_all(b"\n")?;
    }
    w.flush()
}

pub fn read_tiles_jsonl<R: BufRead>(r: R) -> std::io::Result<Vec<TileRef>> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::slide::{synth_slide, Region, StainPalette, SynthSpec};
    use image::Rgb;
    use proptest::prelude::*;

    /// Float reference HSV (half-degree hue).
    fn reference_hsv(rgb: [u8; 3]) -> [u8; 3] {
        let [r, g, b] = rgb.map(|c| c as f64);
        let v = r.max(g).max(b);
        let mn = r.min(g).min(b);
        let d = v - mn;
        let s = if v == 0.0 { 0.0 } else { 255.0 * d / v };
        let mut h = if d == 0.0 {
            0.0
        } else if v == r {
            60.0 * (g - b) / d
        } else if v == g {
            120.0 + 60.0 * (b - r) / d
        } else {
            240.0 + 60.0 * (r - g) / d
        };
        if h < 0.0 {
            h += 360.0;
        }
        [(h / 2.0).round() as u8, s.round() as u8, v as u8]
    }

    #[test]
    fn hsv_fixed_points() {
        assert_eq!(hsv_of([255, 255, 255]), [0, 0, 255]);
        assert_eq!(hsv_of([0, 0, 0]), [0, 0, 0]);
        assert_eq!(hsv_of([255, 105, 180]), reference_hsv([255, 105, 180]));
        assert_eq!(hsv_of([255, 105, 180]), [165, 150, 255]);
    }

    proptest! {
        #[test]
        fn hsv_matches_float_reference(r: u8, g: u8, b: u8) {
            let got = hsv_of([r, g, b]);
            let want = reference_hsv([r, g, b]);
            // Float rounding can straddle exact .5 cases; integers resolve them exactly.
            prop_assert!((got[0] as i32 - want[0] as i32).abs() <= 1);
            prop_assert!((got[1] as i32 - want[1] as i32).abs() <= 1);
            prop_assert_eq!(got[2], want[2]);
            prop_assert!(got[0] <= 180);
        }
    }

    fn uniform_slide(w: u32, h: u32, color: [u8; 3]) -> SlideBundle {
        SlideBundle::new("u", 0.5, RgbImage::from_pixel(w, h, Rgb(color))).unwrap()
    }

    #[test]
    fn white_and_black_slides_have_no_foreground() {
        for c in [[255, 255, 255], [0, 0, 0]] {
            let b = uniform_slide(448, 448, c);
            assert_eq!(foreground_mask(&b).unwrap().count(), 0);
            assert!(extract_tiles(&b, 0.25).unwrap().is_empty());
        }
    }

    #[test]
    fn fully_tissue_slide_gives_four_full_tiles() {
        let b = uniform_slide(448, 448, [220, 120, 190]);
        let tiles = extract_tiles(&b, 0.25).unwrap();
        assert_eq!(tiles.len(), 4);
        assert!(tiles.iter().all(|t| t.tissue_fraction == 1.0));
        let origins: Vec<(u32, u32)> = tiles.iter().map(|t| (t.x, t.y)).collect();
        assert_eq!(origins, vec![(0, 0), (224, 0), (0, 224), (224, 224)]);
    }

    #[test]
    fn small_slide_has_no_tiles() {
        let b = uniform_slide(200, 200, [220, 120, 190]);
        assert!(extract_tiles(&b, 0.25).unwrap().is_empty());
    }

    #[test]
    fn too_small_for_mask_is_an_error() {
        let b = uniform_slide(10, 30, [220, 120, 190]);
        assert!(foreground_mask(&b).is_err());
    }

    fn half_tissue(seed: u64) -> SlideBundle {
        let spec = SynthSpec {
            slide_id: "half".into(),
            width: 896,
            height: 672,
            mpp: 0.5,
            tissue: vec![Region::Rect { x: 0, y: 0, w: 448, h: 672 }],
            cancer: vec![],
            palette: StainPalette::default(),
        };
        synth_slide(&spec, seed).unwrap()
    }

    #[test]
    fn mask_matches_pooled_ground_truth_away_from_boundary() {
        let b = half_tissue(2);
        let fg = foreground_mask(&b).unwrap();
        let truth = b.tissue_mask.as_ref().unwrap();
        let (mw, mh) = fg.dimensions();
        for y in 0..mh {
            for x in 0..mw {
                // Majority pooling over the 16x16 block.
                let mut set = 0;
                for dy in 0..16 {
                    for dx in 0..16 {
                        let (px, py) = (x * 16 + dx, y * 16 + dy);
                        if px < b.width && py < b.height && truth.get_pixel(px, py).0[0] != 0 {
                            set += 1;
                        }
                    }
                }
                let majority = set * 2 > 256;
                // Low-res column 27 is the boundary (448 / 16 = 28).
                let near_boundary = (x as i32 - 27).abs() <= 1;
                if !near_boundary {
                    assert_eq!(fg.is_set(x, y), majority, "pixel ({x},{y})");
                }
            }
        }
    }

    fn brute_force_tiles(b: &SlideBundle, min_tissue: f64) -> Vec<TileRef> {
        let fg = foreground_mask(b).unwrap();
        let mut out = Vec::new();
        let mut y = 0;
        while y + 224 <= b.height {
            let mut x = 0;
            while x + 224 <= b.width {
                let mut count = 0;
                for my in y / 16..y / 16 + 14 {
                    for mx in x / 16..x / 16 + 14 {
                        if fg.is_set(mx, my) {
                            count += 1;
                        }
                    }
                }
                let frac = count as f64 / 196.0;
                if frac >= min_tissue {
                    out.push(TileRef {
                        slide_id: b.slide_id.clone(),
                        x,
                        y,
                        size: 224,
                        tissue_fraction: frac,
                    });
                }
                x += 224;
            }
            y += 224;
        }
        out
    }

    #[test]
    fn tiles_match_window_count_oracle() {
        let spec = SynthSpec {
            slide_id: "blobs".into(),
            width: 1000,
            height: 760,
            mpp: 0.5,
            tissue: vec![
                Region::Ellipse { cx: 300.0, cy: 300.0, rx: 250.0, ry: 180.0 },
                Region::Rect { x: 600, y: 400, w: 150, h: 300 },
            ],
            cancer: vec![Region::Ellipse { cx: 650.0, cy: 500.0, rx: 40.0, ry: 60.0 }],
            palette: StainPalette::default(),
        };
        let b = synth_slide(&spec, 4).unwrap();
        for t in [0.0, 0.1, 0.25, 0.5, 1.0] {
            assert_eq!(extract_tiles(&b, t).unwrap(), brute_force_tiles(&b, t));
        }
    }

    #[test]
    fn raising_threshold_never_adds_tiles() {
        let b = half_tissue(8);
        let mut prev = usize::MAX;
        for i in 0..=20 {
            let n = extract_tiles(&b, i as f64 / 20.0).unwrap().len();
            assert!(n <= prev);
            prev = n;
        }
    }

    #[test]
    fn tiles_do_not_overlap_and_stay_in_bounds() {
        let b = half_tissue(1);
        let tiles = extract_tiles(&b, 0.0).unwrap();
        for (i, a) in tiles.iter().enumerate() {
            assert!(a.x + a.size <= b.width && a.y + a.size <= b.height);
            assert_eq!(a.x % 224, 0);
            for c in &tiles[i + 1..] {
                assert!(a.x.abs_diff(c.x) >= 224 || a.y.abs_diff(c.y) >= 224);
            }
        }
    }

    #[test]
    fn mask_is_a_per_pixel_function() {
        let b = half_tissue(3);
        let low = downsample(&b, 16).unwrap();
        let fg = foreground_mask(&b).unwrap();
        for (x, y, p) in low.enumerate_pixels() {
            assert_eq!(fg.is_set(x, y), is_foreground(hsv_of(p.0)));
        }
    }

    #[test]
    fn jsonl_round_trip() {
        let b = half_tissue(3);
        let tiles = extract_tiles(&b, 0.25).unwrap();
        let mut buf = Vec::new();
        write_tiles_jsonl(&tiles, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.lines().next().unwrap().contains("\"tissue_fraction\""));
        assert_eq!(read_tiles_jsonl(buf.as_slice()).unwrap(), tiles);
    }
}
