use std::path::Path;

use anyhow::{bail, Context};
use image::{Rgb, RgbImage};
use plotters::prelude::*;

use ribcam::metrics::FrocResult;
use ribcam::sampling::{HU_MAX, HU_MIN};
use ribcam::{CtVolume, Shape3};

pub const FROC_FP_RANGE: (f64, f64) = (0.125, 8.0);
const GT_COLOUR: Rgb<u8> = Rgb([40, 200, 60]);
const PRED_COLOUR: Rgb<u8> = Rgb([230, 40, 40]);
const LEGEND_SWATCH: u32 = 6;

/// FROC curve on a log FP axis, as SVG.
pub fn froc_svg(froc: &FrocResult, path: &Path) -> anyhow::Result<()> {
    let root = SVGBackend::new(path, (640, 480)).into_drawing_area();
    root.fill(&WHITE)?;
    let mut chart = ChartBuilder::on(&root)
        .caption("FROC", ("sans-serif", 22))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(48)
        .build_cartesian_2d((FROC_FP_RANGE.0..FROC_FP_RANGE.1).log_scale(), 0.0f64..1.0)?;
    chart
        .configure_mesh()
        .x_desc("false positives per volume")
        .y_desc("sensitivity")
        .draw()?;
    // step curve: best sensitivity within each FP budget
    let mut steps = Vec::new();
    let mut best = 0.0f64;
    for p in &froc.operating_points {
        let fp = p.fp_per_volume.clamp(FROC_FP_RANGE.0, FROC_FP_RANGE.1);
        steps.push((fp, best));
        best = best.max(p.sensitivity);
        steps.push((fp, best));
    }
    steps.push((FROC_FP_RANGE.1, best));
    chart.draw_series(LineSeries::new(steps, &BLUE))?;
    chart.draw_series(
        froc.sensitivities_at
            .iter()
            .map(|&(t, s)| Circle::new((t, s), 4, RED.filled())),
    )?;
    root.present()?;
    Ok(())
}

fn grey(hu: f32) -> u8 {
    let t = ((hu - HU_MIN) / (HU_MAX - HU_MIN)).clamp(0.0, 1.0);
    (t * 255.0).round() as u8
}

fn check_slice(shape: Shape3, z: usize) -> anyhow::Result<()> {
    if z >= shape.d() {
        bail!("slice {z} out of range: volume depth is {}", shape.d());
    }
    Ok(())
}

/// Axial slice `z` in grey, without overlays.
pub fn base_slice(volume: &CtVolume, z: usize) -> anyhow::Result<RgbImage> {
    let s = volume.shape;
    check_slice(s, z)?;
    Ok(RgbImage::from_fn(s.w() as u32, s.h() as u32, |x, y| {
        let g = grey(volume.at(x as usize, y as usize, z));
        Rgb([g, g, g])
    }))
}

fn blend(a: Rgb<u8>, b: Rgb<u8>, alpha: f32) -> Rgb<u8> {
    Rgb([0, 1, 2].map(|i| (a[i] as f32 * (1.0 - alpha) + b[i] as f32 * alpha).round() as u8))
}

fn legend(img: &mut RgbImage) {
    for (row, colour) in [GT_COLOUR, PRED_COLOUR].into_iter().enumerate() {
        let y0 = 1 + row as u32 * (LEGEND_SWATCH + 1);
        for y in y0..(y0 + LEGEND_SWATCH).min(img.height()) {
            for x in 1..(1 + LEGEND_SWATCH).min(img.width()) {
                img.put_pixel(x, y, colour);
            }
        }
    }
}

/// Ground truth in green and thresholded prediction in red over slice `z`.
pub fn overlay(
    volume: &CtVolume,
    gt: Option<&[bool]>,
    pred: Option<&[f32]>,
    threshold: f32,
    z: usize,
) -> anyhow::Result<RgbImage> {
    let s = volume.shape;
    let mut img = base_slice(volume, z)?;
    for (x, y, px) in img.enumerate_pixels_mut() {
        let i = s.index(x as usize, y as usize, z);
        if gt.is_some_and(|g| g[i]) {
            *px = blend(*px, GT_COLOUR, 0.5);
        }
        if pred.is_some_and(|p| p[i] >= threshold) {
            *px = blend(*px, PRED_COLOUR, 0.5);
        }
    }
    legend(&mut img);
    Ok(img)
}

/// Trilinear resampling of an `from³` grid to `to³`, aligning cell centres.
pub fn upsample_trilinear(values: &[f32], from: usize, to: usize) -> anyhow::Result<Vec<f32>> {
    if values.len() != from.pow(3) || from == 0 || to == 0 {
        bail!("expected {}³ values, got {}", from, values.len());
    }
    let scale = from as f64 / to as f64;
    let coord = |i: usize| -> (usize, usize, f64) {
        let c = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (from - 1) as f64);
        let lo = c.floor() as usize;
        let hi = (lo + 1).min(from - 1);
        (lo, hi, c - lo as f64)
    };
    let at = |x: usize, y: usize, z: usize| values[x + from * (y + from * z)] as f64;
    let axis: Vec<(usize, usize, f64)> = (0..to).map(coord).collect();
    let mut out = Vec::with_capacity(to.pow(3));
    for &(z0, z1, tz) in &axis {
        for &(y0, y1, ty) in &axis {
            for &(x0, x1, tx) in &axis {
                let lerp = |a: f64, b: f64, t: f64| a + (b - a) * t;
                let plane = |z| {
                    lerp(
                        lerp(at(x0, y0, z), at(x1, y0, z), tx),
                        lerp(at(x0, y1, z), at(x1, y1, z), tx),
                        ty,
                    )
                };
                out.push(lerp(plane(z0), plane(z1), tz) as f32);
            }
        }
    }
    Ok(out)
}

fn heat(t: f32) -> Rgb<u8> {
    let t = t.clamp(0.0, 1.0);
    let r = (1.5 - (4.0 * t - 3.0).abs()).clamp(0.0, 1.0);
    let g = (1.5 - (4.0 * t - 2.0).abs()).clamp(0.0, 1.0);
    let b = (1.5 - (4.0 * t - 1.0).abs()).clamp(0.0, 1.0);
    Rgb([r, g, b].map(|v| (v * 255.0).round() as u8))
}

/// CAM heat map over slice `z` of a normalized patch. `cam` is already at
/// patch resolution.
pub fn cam_overlay(patch: &[f32], cam: &[f32], edge: usize, z: usize) -> anyhow::Result<RgbImage> {
    check_slice(Shape3::cube(edge), z)?;
    let n = edge * edge;
    let slice = &cam[z * n..(z + 1) * n];
    let (lo, hi) = slice
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    Ok(RgbImage::from_fn(edge as u32, edge as u32, |x, y| {
        let i = x as usize + edge * y as usize;
        let g = (((patch[z * n + i] + 1.0) / 2.0).clamp(0.0, 1.0) * 255.0) as u8;
        blend(Rgb([g, g, g]), heat((slice[i] - lo) / span), 0.45)
    }))
}

pub fn save_png(img: &RgbImage, path: &Path) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    img.save(path).with_context(|| format!("writing {}", path.display()))
}
