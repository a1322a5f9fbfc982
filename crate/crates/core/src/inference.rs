//! Whole-volume prediction by overlapping sliding windows.
//!
//! Windows start at `0, s, 2s, …` along each axis and a final window is
//! pinned to the far face, so every voxel is covered. Each voxel's output is
//! the plain mean of the window predictions covering it.

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::network::CamUNetParams;
use crate::sampling::{normalize_hu, HU_MIN};
use crate::tensor::Tensor;
use crate::volume::{CtVolume, Shape3};

pub const DEFAULT_STRIDE: usize = 64;

/// Window start offsets along one axis of length `n`. A stride above the
/// edge would leave gaps, so it is capped at `edge`.
pub fn axis_starts(n: usize, edge: usize, stride: usize) -> Vec<usize> {
    if n <= edge {
        return vec![0];
    }
    let stride = stride.min(edge);
    let mut out = Vec::new();
    let mut s = 0;
    while s + edge < n {
        out.push(s);
        s += stride;
    }
    out.push(n - edge);
    out.dedup();
    out
}

/// One cubic window, by its low corner.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Window {
    pub start: [usize; 3],
    pub edge: usize,
}

impl Window {
    pub fn centroid(&self) -> [usize; 3] {
        self.start.map(|s| s + self.edge / 2)
    }

    pub fn contains(&self, p: [usize; 3]) -> bool {
        (0..3).all(|a| p[a] >= self.start[a] && p[a] < self.start[a] + self.edge)
    }
}

pub fn sliding_windows(shape: Shape3, edge: usize, stride: usize) -> Result<Vec<Window>> {
    if stride == 0 {
        return Err(Error::InvalidArgument("stride must be >= 1".into()));
    }
    if edge == 0 {
        return Err(Error::InvalidArgument("patch edge must be >= 1".into()));
    }
    shape.validate()?;
    let xs = axis_starts(shape.w(), edge, stride);
    let ys = axis_starts(shape.h(), edge, stride);
    let zs = axis_starts(shape.d(), edge, stride);
    let mut out = Vec::with_capacity(xs.len() * ys.len() * zs.len());
    for &z in &zs {
        for &y in &ys {
            for &x in &xs {
                out.push(Window {
                    start: [x, y, z],
                    edge,
                });
            }
        }
    }
    Ok(out)
}

/// Normalized window contents; voxels beyond the volume read as −200 HU.
pub fn crop_normalized(volume: &CtVolume, window: &Window) -> Tensor {
    let e = window.edge;
    let s = volume.shape;
    let pad = normalize_hu(HU_MIN);
    let mut data = vec![pad; e * e * e];
    let [x0, y0, z0] = window.start;
    let xn = e.min(s.w().saturating_sub(x0));
    for dz in 0..e.min(s.d().saturating_sub(z0)) {
        for dy in 0..e.min(s.h().saturating_sub(y0)) {
            let src = s.index(x0, y0 + dy, z0 + dz);
            let dst = e * (dy + e * dz);
            for dx in 0..xn {
                data[dst + dx] = normalize_hu(volume.intensities[src + dx]);
            }
        }
    }
    Tensor::from_vec(1, Shape3::cube(e), data)
}

/// Probability field plus bookkeeping.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub probs: Vec<f32>,
    pub windows: usize,
}

/// Predict every voxel of `volume`.
pub fn predict_volume(
    params: &CamUNetParams,
    volume: &CtVolume,
    stride: usize,
    exec: Exec,
) -> Result<Prediction> {
    let edge = params.config.patch_edge;
    let windows = sliding_windows(volume.shape, edge, stride)?;
    let shape = volume.shape;
    let mut sum = vec![0.0f64; shape.len()];
    let mut count = vec![0u32; shape.len()];
    let chunk = exec.workers().max(1);
    for group in windows.chunks(chunk) {
        let outputs = exec.try_map(group, |w| {
            let out = params.forward(&crop_normalized(volume, w))?;
            if out.seg_probs.iter().any(|p| !p.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "network output in window at {:?}",
                    w.start
                )));
            }
            Ok(out.seg_probs)
        })?;
        for (w, probs) in group.iter().zip(outputs) {
            accumulate(shape, w, &probs, &mut sum, &mut count);
        }
    }
    let probs = sum
        .iter()
        .zip(&count)
        .map(|(&s, &c)| {
            debug_assert!(c > 0);
            (s / c as f64) as f32
        })
        .collect();
    Ok(Prediction {
        probs,
        windows: windows.len(),
    })
}

fn accumulate(shape: Shape3, w: &Window, probs: &[f32], sum: &mut [f64], count: &mut [u32]) {
    let e = w.edge;
    let [x0, y0, z0] = w.start;
    let xn = e.min(shape.w().saturating_sub(x0));
    for dz in 0..e.min(shape.d().saturating_sub(z0)) {
        for dy in 0..e.min(shape.h().saturating_sub(y0)) {
            let dst = shape.index(x0, y0 + dy, z0 + dz);
            let src = e * (dy + e * dz);
            for dx in 0..xn {
                sum[dst + dx] += probs[src + dx] as f64;
                count[dst + dx] += 1;
            }
        }
    }
}

/// How many windows cover each voxel.
pub fn coverage(shape: Shape3, windows: &[Window]) -> Vec<u32> {
    let mut sum = vec![0.0; shape.len()];
    let mut count = vec![0u32; shape.len()];
    for w in windows {
        let ones = vec![0.0f32; w.edge.pow(3)];
        accumulate(shape, w, &ones, &mut sum, &mut count);
    }
    count
}
