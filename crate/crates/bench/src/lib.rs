//! Shared fixtures for the benchmarks.

use pathfound::slide::{Region, SlideBundle, SynthSpec};

/// A square synthetic slide with one elliptical tissue region.
pub fn bench_slide(size: u32, seed: u64) -> SlideBundle {
    let s = size as f64;
    let spec = SynthSpec {
        slide_id: format!("bench-{size}"),
        width: size,
        height: size,
        mpp: 0.5,
        tissue: vec![Region::Ellipse {
            cx: s / 2.0,
            cy: s / 2.0,
            rx: s * 0.4,
            ry: s * 0.35,
        }],
        cancer: Vec::new(),
        palette: Default::default(),
    };
    pathfound::slide::synth_slide(&spec, seed).expect("valid bench slide")
}
