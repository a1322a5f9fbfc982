//! Brute-force reference implementations.
//!
//! Nothing here depends on `ribcam`; every routine is written from its
//! definition and kept deliberately naive so it can check the optimized
//! paths: recursive flood fill, exhaustive-threshold FROC, scalar losses,
//! and central finite differences.

use std::collections::BTreeSet;

/// Largest field the flood-fill oracle accepts (16³).
pub const FLOODFILL_MAX_VOXELS: usize = 16 * 16 * 16;

/// Label every foreground voxel by recursive flood fill.
///
/// Returns per-voxel component ids (0 = background, ids from 1 in raster
/// order of first voxel) and the component count.
pub fn floodfill_components(
    field: &[bool],
    dims: [usize; 3],
    connectivity: u8,
) -> Result<(Vec<u32>, usize), String> {
    let n = dims[0] * dims[1] * dims[2];
    if field.len() != n {
        return Err(format!("field has {} voxels, dims imply {n}", field.len()));
    }
    if n > FLOODFILL_MAX_VOXELS {
        return Err(format!("field of {n} voxels exceeds oracle guard"));
    }
    if ![6u8, 18, 26].contains(&connectivity) {
        return Err(format!("unsupported connectivity {connectivity}"));
    }

    fn adjacent(a: [i64; 3], b: [i64; 3], connectivity: u8) -> bool {
        let d: Vec<i64> = (0..3).map(|i| (a[i] - b[i]).abs()).collect();
        if d.iter().any(|&v| v > 1) {
            return false;
        }
        let moved = d.iter().filter(|&&v| v == 1).count();
        match connectivity {
            6 => moved == 1,
            18 => moved == 1 || moved == 2,
            _ => moved >= 1,
        }
    }

    fn visit(
        i: usize,
        id: u32,
        field: &[bool],
        dims: [usize; 3],
        connectivity: u8,
        labels: &mut [u32],
    ) {
        labels[i] = id;
        let here = [
            (i % dims[0]) as i64,
            ((i / dims[0]) % dims[1]) as i64,
            (i / (dims[0] * dims[1])) as i64,
        ];
        for dz in -1i64..=1 {
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let there = [here[0] + dx, here[1] + dy, here[2] + dz];
                    if (0..3).any(|a| there[a] < 0 || there[a] >= dims[a] as i64) {
                        continue;
                    }
                    if !adjacent(here, there, connectivity) {
                        continue;
                    }
                    let j = there[0] as usize
                        + dims[0] * (there[1] as usize + dims[1] * there[2] as usize);
                    if field[j] && labels[j] == 0 {
                        visit(j, id, field, dims, connectivity, labels);
                    }
                }
            }
        }
    }

    let mut labels = vec![0u32; n];
    let mut count = 0u32;
    for i in 0..n {
        if field[i] && labels[i] == 0 {
            count += 1;
            visit(i, count, field, dims, connectivity, &mut labels);
        }
    }
    Ok((labels, count as usize))
}

/// Group voxel indices by label, ignoring the numbering itself.
pub fn partition(labels: &[u32]) -> BTreeSet<Vec<usize>> {
    let max = labels.iter().copied().max().unwrap_or(0) as usize;
    let mut groups = vec![Vec::new(); max];
    for (i, &l) in labels.iter().enumerate() {
        if l > 0 {
            groups[l as usize - 1].push(i);
        }
    }
    groups.into_iter().filter(|g| !g.is_empty()).collect()
}

/// A detection for the FROC oracle: voxel indices inside one volume.
#[derive(Debug, Clone)]
pub struct OracleProposal {
    pub volume: usize,
    pub score: f64,
    pub voxels: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleCurve {
    /// `(threshold, fp_per_volume, sensitivity)` for every evaluated threshold.
    pub points: Vec<(f64, f64, f64)>,
    /// Best sensitivity with FP rate at most each target.
    pub at_targets: Vec<f64>,
}

/// FROC by evaluating every threshold in `{scores} ∪ {0, 1}` and just above
/// each score, with hits decided by any-voxel overlap.
///
/// `gt[v]` holds instance labels for volume `v` (0 = background).
pub fn froc_exhaustive(
    proposals: &[OracleProposal],
    gt: &[Vec<u32>],
    targets: &[f64],
) -> Result<OracleCurve, String> {
    if proposals.len() > 20 {
        return Err("oracle limited to 20 proposals".into());
    }
    let volumes = gt.len();
    if volumes == 0 {
        return Err("no volumes".into());
    }
    let total: usize = gt
        .iter()
        .map(|g| g.iter().copied().collect::<BTreeSet<u32>>().into_iter().filter(|&l| l > 0).count())
        .sum();
    if total == 0 {
        return Err("no ground-truth instances".into());
    }
    let mut thresholds: Vec<f64> = vec![0.0, 1.0];
    for p in proposals {
        thresholds.push(p.score);
        thresholds.push(p.score + 1e-9);
    }
    thresholds.sort_by(|a, b| a.partial_cmp(b).unwrap());
    thresholds.dedup();

    let mut points = Vec::new();
    for &t in &thresholds {
        let mut detected: BTreeSet<(usize, u32)> = BTreeSet::new();
        let mut fps = 0usize;
        for p in proposals.iter().filter(|p| p.score >= t) {
            let mut hit = false;
            for &v in &p.voxels {
                let l = gt[p.volume][v];
                if l > 0 {
                    hit = true;
                    detected.insert((p.volume, l));
                }
            }
            if !hit {
                fps += 1;
            }
        }
        points.push((
            t,
            fps as f64 / volumes as f64,
            detected.len() as f64 / total as f64,
        ));
    }
    let at_targets = targets
        .iter()
        .map(|&target| {
            points
                .iter()
                .filter(|p| p.1 <= target)
                .map(|p| p.2)
                .fold(0.0, f64::max)
        })
        .collect();
    Ok(OracleCurve { points, at_targets })
}

const CLAMP: f64 = 1e-7;

fn clamp(p: f64) -> f64 {
    p.clamp(CLAMP, 1.0 - CLAMP)
}

/// Mean focal loss over all voxels, `p_t = p` for positives.
pub fn focal_scalar(probs: &[f64], targets: &[f64], gamma: f64) -> f64 {
    let mut total = 0.0;
    for i in 0..probs.len() {
        let p = clamp(probs[i]);
        let pt = if targets[i] > 0.5 { p } else { 1.0 - p };
        total += -(1.0 - pt).powf(gamma) * pt.ln();
    }
    total / probs.len() as f64
}

/// Soft dice loss averaged over `batch` equal-sized samples.
pub fn dice_scalar(probs: &[f64], targets: &[f64], batch: usize, eps: f64) -> f64 {
    let n = probs.len() / batch;
    let mut total = 0.0;
    for b in 0..batch {
        let (mut inter, mut sg, mut sp) = (0.0, 0.0, 0.0);
        for i in b * n..(b + 1) * n {
            inter += targets[i] * probs[i];
            sg += targets[i];
            sp += probs[i];
        }
        total += 1.0 - (2.0 * inter + eps) / (sg + sp + eps);
    }
    total / batch as f64
}

/// Mean binary cross-entropy.
pub fn bce_scalar(probs: &[f64], labels: &[f64]) -> f64 {
    let mut total = 0.0;
    for i in 0..probs.len() {
        let p = clamp(probs[i]);
        total -= labels[i] * p.ln() + (1.0 - labels[i]) * (1.0 - p).ln();
    }
    total / probs.len() as f64
}

/// Central-difference gradient of `f` at `x`.
pub fn fd_gradient<F>(f: F, x: &[f64], step: f64) -> Result<Vec<f64>, String>
where
    F: Fn(&[f64]) -> f64,
{
    if !(step > 0.0) {
        return Err("step must be positive".into());
    }
    let mut point = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = point[i];
        point[i] = orig + step;
        let up = f(&point);
        point[i] = orig - step;
        let down = f(&point);
        point[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(format!("non-finite evaluation at coordinate {i}"));
        }
        grad.push((up - down) / (2.0 * step));
    }
    Ok(grad)
}

/// Dice coefficient of two binary masks by counting.
pub fn dice_count(a: &[bool], b: &[bool], eps: f64) -> f64 {
    let inter = a.iter().zip(b).filter(|(x, y)| **x && **y).count() as f64;
    let na = a.iter().filter(|x| **x).count() as f64;
    let nb = b.iter().filter(|x| **x).count() as f64;
    (2.0 * inter + eps) / (na + nb + eps)
}
