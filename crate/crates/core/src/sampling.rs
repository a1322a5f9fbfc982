//! Training patch selection, extraction and the on-disk patch cache.
//!
//! Every fracture instance yields one positive patch around its jittered
//! centroid. The same number of negative patches is drawn in thirds from
//! the spine region, from mirror images of the positives across the
//! midsagittal plane, and uniformly at random. A negative must not contain
//! a single fracture voxel.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::io::{self, RawHeader, RawPayload, VolumeFormat};
use crate::volume::{CtVolume, FractureMask, Shape3};

pub const HU_MIN: f32 = -200.0;
pub const HU_MAX: f32 = 1000.0;
pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const DIGEST_FILE: &str = "manifest.sha256";

/// Clamp to `[-200, 1000]` HU and map linearly onto `[-1, 1]`.
pub fn normalize_hu(hu: f32) -> f32 {
    (hu.clamp(HU_MIN, HU_MAX) - HU_MIN) / 600.0 - 1.0
}

/// Heuristic vertebral-column region.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SpineRegion {
    /// Width of the central band as a fraction of W.
    pub band_fraction: f64,
    /// Posterior share of H (largest `y`) included.
    pub posterior_fraction: f64,
    pub min_hu: f32,
}

impl Default for SpineRegion {
    fn default() -> Self {
        SpineRegion {
            band_fraction: 0.2,
            posterior_fraction: 0.5,
            min_hu: 200.0,
        }
    }
}

impl SpineRegion {
    /// Whether the geometric band (ignoring intensity) holds `(x, y)`.
    pub fn in_band(&self, shape: Shape3, x: usize, y: usize) -> bool {
        let w = shape.w() as f64;
        let h = shape.h() as f64;
        let half = 0.5 * self.band_fraction * w;
        let cx = 0.5 * (w - 1.0);
        (x as f64 - cx).abs() <= half && y as f64 >= h * (1.0 - self.posterior_fraction)
    }

    pub fn contains(&self, volume: &CtVolume, x: usize, y: usize, z: usize) -> bool {
        self.in_band(volume.shape, x, y) && volume.at(x, y, z) >= self.min_hu
    }

    /// Predicate evaluated at every voxel.
    pub fn mask(&self, volume: &CtVolume) -> Vec<bool> {
        let s = volume.shape;
        let mut out = vec![false; s.len()];
        for z in 0..s.d() {
            for y in 0..s.h() {
                for x in 0..s.w() {
                    if self.in_band(s, x, y) {
                        let i = s.index(x, y, z);
                        out[i] = volume.intensities[i] >= self.min_hu;
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplingConfig {
    pub patch_edge: usize,
    pub jitter: usize,
    pub max_retries: usize,
    pub spine: SpineRegion,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig {
            patch_edge: 128,
            jitter: 16,
            max_retries: 100,
            spine: SpineRegion::default(),
        }
    }
}

impl SamplingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_edge < 2 || self.patch_edge % 2 != 0 {
            return Err(Error::InvalidConfig("patch_edge must be even and >= 2".into()));
        }
        if self.jitter >= self.patch_edge / 2 {
            return Err(Error::InvalidConfig(format!(
                "jitter {} must be below half the patch edge ({})",
                self.jitter,
                self.patch_edge / 2
            )));
        }
        if self.max_retries == 0 {
            return Err(Error::InvalidConfig("max_retries must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NegativeSource {
    Spine,
    Mirror,
    Random,
}

impl NegativeSource {
    pub fn as_str(self) -> &'static str {
        match self {
            NegativeSource::Spine => "spine",
            NegativeSource::Mirror => "mirror",
            NegativeSource::Random => "random",
        }
    }
}

impl fmt::Display for NegativeSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PositiveEntry {
    pub volume_id: String,
    /// Instance label (1-based).
    pub instance: u32,
    pub centroid: [i64; 3],
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NegativeEntry {
    pub volume_id: String,
    pub source: NegativeSource,
    pub centroid: [i64; 3],
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplingPlan {
    pub positives: Vec<PositiveEntry>,
    pub negatives: Vec<NegativeEntry>,
    pub seed: u64,
}

impl SamplingPlan {
    pub fn source_counts(&self) -> BTreeMap<NegativeSource, usize> {
        let mut m = BTreeMap::new();
        for n in &self.negatives {
            *m.entry(n.source).or_insert(0) += 1;
        }
        m
    }
}

/// Negative slots per source: thirds, remainder to spine then mirror.
pub fn split_negatives(n: usize) -> [(NegativeSource, usize); 3] {
    let base = n / 3;
    let rem = n % 3;
    [
        (NegativeSource::Spine, base + usize::from(rem > 0)),
        (NegativeSource::Mirror, base + usize::from(rem > 1)),
        (NegativeSource::Random, base),
    ]
}

/// Reflect across the midsagittal plane: `x' = W − 1 − x`.
pub fn mirror_centroid(c: [i64; 3], shape: Shape3) -> [i64; 3] {
    let clamp = |v: i64, n: usize| v.clamp(0, n as i64 - 1);
    [
        clamp(shape.w() as i64 - 1 - c[0], shape.w()),
        clamp(c[1], shape.h()),
        clamp(c[2], shape.d()),
    ]
}

fn window_start(c: i64, edge: usize) -> i64 {
    c - (edge / 2) as i64
}

/// Positive voxel coordinates, for cheap window-occupancy queries.
fn positive_coords(mask: &FractureMask) -> Vec<[i64; 3]> {
    mask.labels
        .iter()
        .enumerate()
        .filter(|(_, &l)| l > 0)
        .map(|(i, _)| mask.shape.coords(i).map(|v| v as i64))
        .collect()
}

fn window_is_clean(positives: &[[i64; 3]], c: [i64; 3], edge: usize) -> bool {
    let lo = c.map(|v| window_start(v, edge));
    !positives
        .iter()
        .any(|p| (0..3).all(|a| p[a] >= lo[a] && p[a] < lo[a] + edge as i64))
}

fn random_voxel(rng: &mut ChaCha8Rng, shape: Shape3) -> [i64; 3] {
    [
        rng.random_range(0..shape.w()) as i64,
        rng.random_range(0..shape.h()) as i64,
        rng.random_range(0..shape.d()) as i64,
    ]
}

/// Choose patch centroids for one volume. Pure in `(inputs, seed)`.
pub fn plan_samples(
    volume: &CtVolume,
    mask: &FractureMask,
    config: &SamplingConfig,
    seed: u64,
) -> Result<SamplingPlan> {
    config.validate()?;
    mask.check_aligned(volume)?;
    let shape = volume.shape;
    let k = mask.instance_count();
    if k == 0 {
        return Err(Error::NoInstances(volume.id.clone()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let j = config.jitter as i64;

    let positives: Vec<PositiveEntry> = mask
        .instance_centroids()
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let mut p = [0i64; 3];
            for a in 0..3 {
                let jit = if j > 0 { rng.random_range(-j..=j) } else { 0 };
                p[a] = (c[a].round() as i64 + jit).clamp(0, shape.0[a] as i64 - 1);
            }
            PositiveEntry {
                volume_id: volume.id.clone(),
                instance: i as u32 + 1,
                centroid: p,
            }
        })
        .collect();

    let occupied = positive_coords(mask);
    let edge = config.patch_edge;
    let spine_voxels: Vec<[i64; 3]> = config
        .spine
        .mask(volume)
        .iter()
        .enumerate()
        .filter(|(_, &b)| b)
        .map(|(i, _)| shape.coords(i).map(|v| v as i64))
        .collect();

    let mut negatives = Vec::with_capacity(k);
    let mut mirror_slot = 0usize;
    for (source, count) in split_negatives(k) {
        for _ in 0..count {
            let mut found = None;
            for attempt in 0..config.max_retries {
                let cand = match source {
                    NegativeSource::Spine => {
                        if spine_voxels.is_empty() {
                            break;
                        }
                        spine_voxels[rng.random_range(0..spine_voxels.len())]
                    }
                    NegativeSource::Mirror => {
                        let base = mirror_centroid(positives[mirror_slot % k].centroid, shape);
                        if attempt == 0 {
                            base
                        } else {
                            // radius widens from edge/4 to edge over the retries
                            let grow = attempt * 3 * edge / (4 * config.max_retries.max(1));
                            let r = (edge / 4 + grow) as i64;
                            let mut c = base;
                            for a in 0..3 {
                                c[a] = (c[a] + rng.random_range(-r..=r)).clamp(0, shape.0[a] as i64 - 1);
                            }
                            c
                        }
                    }
                    NegativeSource::Random => random_voxel(&mut rng, shape),
                };
                if window_is_clean(&occupied, cand, edge) {
                    found = Some(cand);
                    break;
                }
            }
            if source == NegativeSource::Mirror {
                mirror_slot += 1;
            }
            let centroid = found.ok_or_else(|| Error::NegativeSamplingFailed {
                volume_id: volume.id.clone(),
                region: source.as_str(),
                attempts: config.max_retries,
            })?;
            negatives.push(NegativeEntry {
                volume_id: volume.id.clone(),
                source,
                centroid,
            });
        }
    }
    Ok(SamplingPlan {
        positives,
        negatives,
        seed,
    })
}

/// One normalized training patch.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSample {
    pub edge: usize,
    pub intensities: Vec<f32>,
    pub mask: Vec<u8>,
    pub label: bool,
    pub centroid: [i64; 3],
    pub volume_id: String,
}

impl PatchSample {
    pub fn shape(&self) -> Shape3 {
        Shape3::cube(self.edge)
    }

    pub fn positive_voxels(&self) -> usize {
        self.mask.iter().filter(|&&m| m > 0).count()
    }
}

/// Cut an `edge³` window centred at `centroid`; outside voxels read as
/// −200 HU and background mask.
pub fn extract_patch(
    volume: &CtVolume,
    mask: &FractureMask,
    centroid: [i64; 3],
    edge: usize,
) -> Result<PatchSample> {
    mask.check_aligned(volume)?;
    let shape = volume.shape;
    if !shape.contains(centroid) {
        return Err(Error::CentroidOutOfBounds {
            centroid,
            shape: shape.0,
        });
    }
    let n = edge * edge * edge;
    let mut img = vec![normalize_hu(HU_MIN); n];
    let mut msk = vec![0u8; n];
    let lo = centroid.map(|c| window_start(c, edge));
    let clip = |a: usize| {
        let s = lo[a].max(0);
        let e = (lo[a] + edge as i64).min(shape.0[a] as i64);
        (s, e)
    };
    let (xs, xe) = clip(0);
    let (ys, ye) = clip(1);
    let (zs, ze) = clip(2);
    let mut positive = false;
    for z in zs..ze {
        for y in ys..ye {
            let src = shape.index(xs as usize, y as usize, z as usize);
            let dst = (xs - lo[0]) as usize + edge * ((y - lo[1]) as usize + edge * (z - lo[2]) as usize);
            let len = (xe - xs).max(0) as usize;
            for i in 0..len {
                img[dst + i] = normalize_hu(volume.intensities[src + i]);
                if mask.labels[src + i] > 0 {
                    msk[dst + i] = 1;
                    positive = true;
                }
            }
        }
    }
    Ok(PatchSample {
        edge,
        intensities: img,
        mask: msk,
        label: positive,
        centroid,
        volume_id: volume.id.clone(),
    })
}

/// Supplies volumes and masks by id for cache building.
pub trait VolumeSource: Sync {
    fn load(&self, volume_id: &str) -> Result<(CtVolume, FractureMask)>;
}

/// Volumes already in memory.
#[derive(Debug, Default)]
pub struct InMemorySource {
    pub items: BTreeMap<String, (CtVolume, FractureMask)>,
}

impl InMemorySource {
    pub fn insert(&mut self, volume: CtVolume, mask: FractureMask) {
        self.items.insert(volume.id.clone(), (volume, mask));
    }
}

impl VolumeSource for InMemorySource {
    fn load(&self, volume_id: &str) -> Result<(CtVolume, FractureMask)> {
        self.items
            .get(volume_id)
            .cloned()
            .ok_or_else(|| Error::MissingVolume(volume_id.to_string()))
    }
}

/// Volume/mask file pairs keyed by id.
#[derive(Debug, Default)]
pub struct PairedFiles {
    pub pairs: BTreeMap<String, (PathBuf, PathBuf)>,
}

impl PairedFiles {
    /// Pair files in two directories by shared id; every volume needs a mask
    /// and vice versa.
    pub fn discover(volumes: &Path, masks: &Path) -> Result<Self> {
        let v = io::discover(volumes, io::VOLUME_SUFFIXES)?;
        let m = io::discover(masks, io::MASK_SUFFIXES)?;
        if let Some(id) = v.keys().find(|k| !m.contains_key(*k)) {
            return Err(Error::MissingVolume(format!("no mask for volume {id}")));
        }
        if let Some(id) = m.keys().find(|k| !v.contains_key(*k)) {
            return Err(Error::MissingVolume(format!("no volume for mask {id}")));
        }
        if v.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let pairs = v
            .into_iter()
            .map(|(id, vp)| {
                let mp = m[&id].clone();
                (id, (vp, mp))
            })
            .collect();
        Ok(PairedFiles { pairs })
    }
}

impl VolumeSource for PairedFiles {
    fn load(&self, volume_id: &str) -> Result<(CtVolume, FractureMask)> {
        let (vp, mp) = self
            .pairs
            .get(volume_id)
            .ok_or_else(|| Error::MissingVolume(volume_id.to_string()))?;
        let mut volume = io::load_volume(vp, VolumeFormat::from_path(vp))?;
        volume.id = volume_id.to_string();
        let mask = io::load_mask(mp, volume.shape)?;
        Ok((volume, mask))
    }
}

/// One cached patch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub id: String,
    pub label: u8,
    /// Image file relative to the cache directory; the mask sits beside it.
    pub path: String,
    pub mask_path: String,
    pub centroid: [i64; 3],
    pub volume_id: String,
    /// `positive`, `spine`, `mirror` or `random`.
    pub origin: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CacheManifest {
    pub dir: PathBuf,
    pub edge: usize,
    pub entries: Vec<CacheEntry>,
    pub digest: String,
}

impl CacheManifest {
    pub fn positives(&self) -> usize {
        self.entries.iter().filter(|e| e.label == 1).count()
    }

    pub fn load_patch(&self, entry: &CacheEntry) -> Result<PatchSample> {
        load_patch(&self.dir, entry)
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Extract every planned patch and write the cache. Volumes are loaded one
/// at a time; patches within a volume are extracted through `exec`.
pub fn build_cache(
    plans: &[SamplingPlan],
    source: &dyn VolumeSource,
    out_dir: &Path,
    edge: usize,
    exec: Exec,
) -> Result<CacheManifest> {
    fs::create_dir_all(out_dir)?;
    let mut entries = Vec::new();
    let mut hasher = Sha256::new();
    for plan in plans {
        let Some(volume_id) = plan
            .positives
            .first()
            .map(|p| p.volume_id.clone())
            .or_else(|| plan.negatives.first().map(|n| n.volume_id.clone()))
        else {
            continue;
        };
        let (volume, mask) = source.load(&volume_id)?;
        let mut jobs: Vec<(String, [i64; 3], String)> = Vec::new();
        for (i, p) in plan.positives.iter().enumerate() {
            jobs.push((format!("{volume_id}-pos{i:03}"), p.centroid, "positive".into()));
        }
        for (i, n) in plan.negatives.iter().enumerate() {
            jobs.push((format!("{volume_id}-neg{i:03}"), n.centroid, n.source.as_str().into()));
        }
        let patches = exec.try_map(&jobs, |(_, c, _)| extract_patch(&volume, &mask, *c, edge))?;
        for ((id, centroid, origin), patch) in jobs.into_iter().zip(patches) {
            let img_name = format!("{id}.img.raw");
            let msk_name = format!("{id}.msk.raw");
            let header = RawHeader {
                shape: [edge; 3],
                spacing: volume.spacing,
                dtype: io::Dtype::F32,
                id: id.clone(),
            };
            io::write_raw(&out_dir.join(&img_name), &header, &RawPayload::F32(patch.intensities))?;
            io::write_raw(&out_dir.join(&msk_name), &header, &RawPayload::U8(patch.mask))?;
            for name in [&img_name, &msk_name] {
                hasher.update(fs::read(out_dir.join(name))?);
            }
            entries.push(CacheEntry {
                id,
                label: u8::from(patch.label),
                path: img_name,
                mask_path: msk_name,
                centroid,
                volume_id: volume_id.clone(),
                origin,
            });
        }
    }
    if entries.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut text = Vec::new();
    for e in &entries {
        serde_json::to_writer(&mut text, e)?;
        text.push(b'\n');
    }
    hasher.update(&text);
    let digest = hex(&hasher.finalize());
    fs::write(out_dir.join(MANIFEST_FILE), &text)?;
    let mut f = fs::File::create(out_dir.join(DIGEST_FILE))?;
    writeln!(f, "{digest}")?;
    Ok(CacheManifest {
        dir: out_dir.to_path_buf(),
        edge,
        entries,
        digest,
    })
}

/// Read a manifest written by [`build_cache`]. `path` may be the manifest
/// file or its directory.
pub fn load_manifest(path: &Path) -> Result<CacheManifest> {
    let (dir, file) = if path.is_dir() {
        (path.to_path_buf(), path.join(MANIFEST_FILE))
    } else {
        (
            path.parent().map(Path::to_path_buf).unwrap_or_default(),
            path.to_path_buf(),
        )
    };
    let text = fs::read_to_string(&file).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::FileMissing(file.clone()),
        _ => Error::Io(e),
    })?;
    let mut entries = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        entries.push(serde_json::from_str::<CacheEntry>(line)?);
    }
    if entries.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let digest = fs::read_to_string(dir.join(DIGEST_FILE))
        .map(|s| s.trim().to_string())
        .unwrap_or_default();
    let (header, _) = io::read_raw(&dir.join(&entries[0].path))?;
    Ok(CacheManifest {
        dir,
        edge: header.shape[0],
        entries,
        digest,
    })
}

pub fn load_patch(dir: &Path, entry: &CacheEntry) -> Result<PatchSample> {
    let (h, img) = io::read_raw(&dir.join(&entry.path))?;
    let (hm, msk) = io::read_raw(&dir.join(&entry.mask_path))?;
    if h.shape != hm.shape || h.shape[0] != h.shape[1] || h.shape[1] != h.shape[2] {
        return Err(Error::ShapeMismatch {
            expected: h.shape.to_vec(),
            actual: hm.shape.to_vec(),
        });
    }
    let (RawPayload::F32(intensities), RawPayload::U8(mask)) = (img, msk) else {
        return Err(Error::MalformedHeader {
            path: dir.join(&entry.path),
            reason: "expected f32 image and u8 mask".into(),
        });
    };
    Ok(PatchSample {
        edge: h.shape[0],
        label: mask.iter().any(|&m| m > 0),
        intensities,
        mask,
        centroid: entry.centroid,
        volume_id: entry.volume_id.clone(),
    })
}

/// Per-volume seed derived from a run seed.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(index.wrapping_mul(0xbf58_476d_1ce4_e5b9)) ^ index
}
