//! Synthetic rib CT phantoms with implanted fractures.
//!
//! Axes follow the rest of the crate: `x` is left-right (W), `y` is
//! anterior-posterior with posterior at large `y` (H), `z` is cranio-caudal
//! (D). Ribs are tubes swept along half-ellipses in axial planes, one per
//! side, and the spine is a vertical cylinder behind them.
//!
//! A fracture cuts a thin low-HU gap across one tube and displaces the
//! fragment on one side of it. Its mask is every tube voxel within an arc
//! window around the gap, plus the displaced fragment.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::components::{label, Connectivity};
use crate::error::{Error, Result};
use crate::volume::{CtVolume, FractureMask, Shape3};

pub const SOFT_TISSUE_HU: f32 = 40.0;
pub const CORTEX_HU: f32 = 800.0;
pub const MARROW_HU: f32 = 600.0;
pub const SPINE_HU: f32 = 500.0;
pub const GAP_HU: f32 = -100.0;

const MAX_ATTEMPTS: usize = 50;
const GAP_HALF_WIDTH: f64 = 1.0;
const FACE_MARGIN: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomSpec {
    pub shape: Shape3,
    /// Total rib count; ribs alternate right/left.
    pub n_ribs: usize,
    pub n_fractures: usize,
    /// Inclusive bounds on voxels per fracture component.
    pub fracture_size_range: (usize, usize),
    pub noise_sigma: f32,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            shape: Shape3::cube(192),
            n_ribs: 8,
            n_fractures: 2,
            fracture_size_range: (300, 2000),
            noise_sigma: 20.0,
            seed: 0,
        }
    }
}

/// Where one fracture was placed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FractureInfo {
    pub rib: usize,
    pub centroid: [f64; 3],
    pub size: usize,
}

/// Generator output including the noise-free intensities.
#[derive(Debug, Clone)]
pub struct Phantom {
    pub volume: CtVolume,
    pub mask: FractureMask,
    pub clean: Vec<f32>,
    pub fractures: Vec<FractureInfo>,
}

#[derive(Debug, Clone, Copy)]
struct TubeVoxel {
    rib: usize,
    arc: f64,
    dist: f64,
}

struct Geometry {
    shape: Shape3,
    center: [f64; 2],
    semi: [f64; 2],
    radius: f64,
    arc_range: (f64, f64),
    levels: Vec<f64>,
}

impl Geometry {
    fn new(spec: &PhantomSpec) -> Self {
        let [w, h, d] = spec.shape.0.map(|v| v as f64);
        let pairs = spec.n_ribs.div_ceil(2).max(1);
        let levels = (0..pairs)
            .map(|i| {
                if pairs == 1 {
                    0.5 * d
                } else {
                    d * (0.36 + 0.28 * i as f64 / (pairs - 1) as f64)
                }
            })
            .collect();
        Geometry {
            shape: spec.shape,
            center: [0.5 * w, 0.5 * h],
            semi: [0.155 * w, 0.15 * h],
            radius: (0.021 * w.min(h).min(d)).max(2.0),
            arc_range: (-1.1, 1.3),
            levels,
        }
    }

    fn side(rib: usize) -> f64 {
        if rib % 2 == 0 {
            1.0
        } else {
            -1.0
        }
    }

    fn centerline(&self, rib: usize, phi: f64) -> [f64; 3] {
        [
            self.center[0] + Self::side(rib) * self.semi[0] * phi.cos(),
            self.center[1] + self.semi[1] * phi.sin(),
            self.levels[rib / 2],
        ]
    }

    /// Centerline samples spaced about half a voxel apart, with arc length.
    fn samples(&self, rib: usize) -> Vec<(f64, [f64; 3])> {
        let (lo, hi) = self.arc_range;
        let steps = ((hi - lo) * self.semi[0].max(self.semi[1]) * 2.0).ceil() as usize;
        let mut out = Vec::with_capacity(steps + 1);
        let mut arc = 0.0;
        let mut prev = self.centerline(rib, lo);
        for i in 0..=steps {
            let p = self.centerline(rib, lo + (hi - lo) * i as f64 / steps as f64);
            arc += ((p[0] - prev[0]).powi(2) + (p[1] - prev[1]).powi(2)).sqrt();
            out.push((arc, p));
            prev = p;
        }
        out
    }

    /// Voxels of every rib tube, keyed by linear index.
    fn rasterize(&self, ribs: usize) -> HashMap<usize, TubeVoxel> {
        let mut tube: HashMap<usize, TubeVoxel> = HashMap::new();
        let r = self.radius;
        let ri = r.ceil() as i64;
        for rib in 0..ribs {
            for (arc, p) in self.samples(rib) {
                let base = p.map(|v| v.round() as i64);
                for dz in -ri..=ri {
                    for dy in -ri..=ri {
                        for dx in -ri..=ri {
                            let q = [base[0] + dx, base[1] + dy, base[2] + dz];
                            if !self.shape.contains(q) {
                                continue;
                            }
                            let d = ((q[0] as f64 - p[0]).powi(2)
                                + (q[1] as f64 - p[1]).powi(2)
                                + (q[2] as f64 - p[2]).powi(2))
                            .sqrt();
                            if d > r {
                                continue;
                            }
                            let idx = self.shape.index(q[0] as usize, q[1] as usize, q[2] as usize);
                            let v = TubeVoxel { rib, arc, dist: d };
                            tube.entry(idx)
                                .and_modify(|old| {
                                    if d < old.dist {
                                        *old = v;
                                    }
                                })
                                .or_insert(v);
                        }
                    }
                }
            }
        }
        tube
    }

    fn spine_contains(&self, x: usize, y: usize) -> bool {
        let [w, h, _] = self.shape.0.map(|v| v as f64);
        let rs = 0.07 * w.min(h);
        (x as f64 - 0.5 * w).powi(2) + (y as f64 - 0.75 * h).powi(2) <= rs * rs
    }

    fn margin(&self, axis: usize) -> f64 {
        FACE_MARGIN.min(self.shape.0[axis] / 3) as f64
    }

    fn centroid_ok(&self, c: [f64; 3]) -> bool {
        (0..3).all(|a| {
            let m = self.margin(a);
            c[a] >= m && c[a] <= (self.shape.0[a] - 1) as f64 - m
        })
    }

    /// Clear of the posterior central band used by the spine predicate.
    fn clear_of_spine(&self, c: [f64; 3]) -> bool {
        let [w, h, _] = self.shape.0.map(|v| v as f64);
        let pad = self.radius + 2.0;
        let in_band = (c[0] - 0.5 * w).abs() <= 0.1 * w + pad;
        let posterior = c[1] >= 0.5 * h - pad;
        !(in_band && posterior)
    }
}

struct Placement {
    rib: usize,
    arc: f64,
    half_window: f64,
    shift: [i64; 3],
}

fn place(
    geom: &Geometry,
    spec: &PhantomSpec,
    tube: &HashMap<usize, TubeVoxel>,
    rng: &mut ChaCha8Rng,
) -> Option<Vec<Placement>> {
    let ribs = spec.n_ribs;
    let area = std::f64::consts::PI * geom.radius * geom.radius;
    let (smin, smax) = spec.fracture_size_range;
    let wmin = (smin as f64 / (2.0 * area)).max(GAP_HALF_WIDTH + 1.5);
    let wmax = (smax as f64 / (2.0 * area)).max(wmin);
    let lengths: Vec<f64> = (0..ribs).map(|r| geom.samples(r).last().unwrap().0).collect();
    let mut chosen: Vec<Placement> = Vec::new();
    for _ in 0..spec.n_fractures {
        let mut found = None;
        for _ in 0..MAX_ATTEMPTS {
            let rib = rng.random_range(0..ribs);
            let half_window = rng.random_range(wmin..=wmax);
            let len = lengths[rib];
            if len < 2.0 * half_window + 4.0 {
                continue;
            }
            let arc = rng.random_range(half_window + 2.0..len - half_window - 2.0);
            let clash = chosen.iter().any(|c| {
                c.rib == rib && (c.arc - arc).abs() < c.half_window + half_window + 2.0 * geom.radius + 4.0
            });
            if clash {
                continue;
            }
            // Approximate centroid from the tube voxels in the window.
            let (mut sum, mut n) = ([0.0; 3], 0usize);
            for (&idx, v) in tube {
                if v.rib == rib && (v.arc - arc).abs() <= half_window {
                    let c = geom.shape.coords(idx);
                    for a in 0..3 {
                        sum[a] += c[a] as f64;
                    }
                    n += 1;
                }
            }
            if n == 0 {
                continue;
            }
            let c = sum.map(|s| s / n as f64);
            if !geom.centroid_ok(c) || !geom.clear_of_spine(c) {
                continue;
            }
            let shift_len = (geom.radius * 0.5).round().max(1.0) as i64;
            let shift = if rng.random_bool(0.5) {
                [0, 0, shift_len]
            } else {
                [0, 0, -shift_len]
            };
            found = Some(Placement {
                rib,
                arc,
                half_window,
                shift,
            });
            break;
        }
        chosen.push(found?);
    }
    Some(chosen)
}

fn validate_spec(spec: &PhantomSpec) -> Result<()> {
    spec.shape.validate()?;
    if spec.shape.0.iter().any(|&n| n < 64) {
        return Err(Error::InvalidArgument(format!(
            "phantom shape {:?} below 64 per axis",
            spec.shape.0
        )));
    }
    if spec.n_ribs == 0 && spec.n_fractures > 0 {
        return Err(Error::InfeasiblePhantom("fractures requested without ribs".into()));
    }
    let (lo, hi) = spec.fracture_size_range;
    if lo == 0 || lo > hi {
        return Err(Error::InvalidArgument(format!("bad fracture size range ({lo}, {hi})")));
    }
    if !(spec.noise_sigma >= 0.0) {
        return Err(Error::InvalidArgument("noise_sigma must be non-negative".into()));
    }
    Ok(())
}

/// Generate a phantom volume and its fracture instance mask.
pub fn generate(spec: &PhantomSpec) -> Result<(CtVolume, FractureMask)> {
    let p = generate_detailed(spec)?;
    Ok((p.volume, p.mask))
}

pub fn generate_detailed(spec: &PhantomSpec) -> Result<Phantom> {
    validate_spec(spec)?;
    let geom = Geometry::new(spec);
    let shape = spec.shape;
    let tube = geom.rasterize(spec.n_ribs);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    for _ in 0..MAX_ATTEMPTS {
        let Some(placements) = place(&geom, spec, &tube, &mut rng) else {
            continue;
        };
        if let Some(p) = render(&geom, spec, &tube, &placements)? {
            let mut noise_rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x9e37_79b9_7f4a_7c15);
            let mut intensities = p.0.clone();
            if spec.noise_sigma > 0.0 {
                let normal = Normal::new(0.0f32, spec.noise_sigma).expect("sigma is finite");
                for v in intensities.iter_mut() {
                    *v += normal.sample(&mut noise_rng);
                }
            }
            let volume = CtVolume::new(
                format!("phantom-{}", spec.seed),
                shape,
                [1.0; 3],
                intensities,
            )?;
            return Ok(Phantom {
                volume,
                mask: p.1,
                clean: p.0,
                fractures: p.2,
            });
        }
    }
    Err(Error::InfeasiblePhantom(format!(
        "could not place {} fractures within size range {:?} after {MAX_ATTEMPTS} attempts",
        spec.n_fractures, spec.fracture_size_range
    )))
}

type Rendered = (Vec<f32>, FractureMask, Vec<FractureInfo>);

fn render(
    geom: &Geometry,
    spec: &PhantomSpec,
    tube: &HashMap<usize, TubeVoxel>,
    placements: &[Placement],
) -> Result<Option<Rendered>> {
    let shape = spec.shape;
    let mut img = vec![SOFT_TISSUE_HU; shape.len()];
    for z in 0..shape.d() {
        for y in 0..shape.h() {
            for x in 0..shape.w() {
                if geom.spine_contains(x, y) {
                    img[shape.index(x, y, z)] = SPINE_HU;
                }
            }
        }
    }
    let bone = |v: &TubeVoxel| {
        if v.dist > geom.radius - 1.5 {
            CORTEX_HU
        } else {
            MARROW_HU
        }
    };
    let mut keys: Vec<usize> = tube.keys().copied().collect();
    keys.sort_unstable();
    for &idx in &keys {
        img[idx] = bone(&tube[&idx]);
    }

    let mut labels = vec![0u32; shape.len()];
    for (k, p) in placements.iter().enumerate() {
        let id = k as u32 + 1;
        let in_window = |v: &TubeVoxel| v.rib == p.rib && (v.arc - p.arc).abs() <= p.half_window;
        let fragment: Vec<usize> = keys
            .iter()
            .copied()
            .filter(|i| {
                let v = &tube[i];
                v.rib == p.rib && v.arc > p.arc + GAP_HALF_WIDTH && v.arc <= p.arc + p.half_window
            })
            .collect();
        for &i in &keys {
            let v = &tube[&i];
            if in_window(v) {
                labels[i] = id;
                if (v.arc - p.arc).abs() <= GAP_HALF_WIDTH {
                    img[i] = GAP_HU;
                }
            }
        }
        for &i in &fragment {
            img[i] = SOFT_TISSUE_HU;
        }
        for &i in &fragment {
            let c = shape.coords(i);
            let q = [c[0] as i64 + p.shift[0], c[1] as i64 + p.shift[1], c[2] as i64 + p.shift[2]];
            if !shape.contains(q) {
                continue;
            }
            let j = shape.index(q[0] as usize, q[1] as usize, q[2] as usize);
            if tube.get(&j).is_some_and(|v| v.arc <= p.arc + GAP_HALF_WIDTH && v.rib == p.rib) {
                continue;
            }
            img[j] = bone(&tube[&i]);
            labels[j] = id;
        }
    }

    let mask = FractureMask::new(shape, labels)?;
    let field: Vec<bool> = mask.labels.iter().map(|&l| l > 0).collect();
    let comps = label(&field, shape, Connectivity::TwentySix)?;
    if comps.count != placements.len() {
        return Ok(None);
    }
    let sizes = mask.instance_sizes();
    let centroids = mask.instance_centroids();
    let (lo, hi) = spec.fracture_size_range;
    let mut info = Vec::with_capacity(placements.len());
    for (k, p) in placements.iter().enumerate() {
        if sizes[k] < lo || sizes[k] > hi || !geom.centroid_ok(centroids[k]) {
            return Ok(None);
        }
        info.push(FractureInfo {
            rib: p.rib,
            centroid: centroids[k],
            size: sizes[k],
        });
    }
    Ok(Some((img, mask, info)))
}
