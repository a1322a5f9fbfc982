//! From a probability field to scored detection proposals.
//!
//! Voxel filters run before labeling so a discarded voxel can never bridge
//! two components:
//!
//! 1. keep voxels with probability ≥ `prob_threshold`
//! 2. drop voxels below `bone_hu_threshold`
//! 3. drop voxels in the spine region
//! 4. label connected components
//! 5. drop components smaller than `size_threshold`
//! 6. score each survivor by its mean probability

use serde::{Deserialize, Serialize};

use crate::components::{label, Connectivity};
use crate::error::{Error, Result};
use crate::sampling::SpineRegion;
use crate::volume::{CtVolume, Shape3};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PostprocessConfig {
    pub prob_threshold: f64,
    pub size_threshold: usize,
    pub bone_hu_threshold: f32,
    pub connectivity: Connectivity,
    pub spine_exclusion: bool,
    pub spine: SpineRegion,
}

impl Default for PostprocessConfig {
    fn default() -> Self {
        PostprocessConfig {
            prob_threshold: 0.6,
            size_threshold: 150,
            bone_hu_threshold: 300.0,
            connectivity: Connectivity::TwentySix,
            spine_exclusion: true,
            spine: SpineRegion::default(),
        }
    }
}

impl PostprocessConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.prob_threshold > 0.0 && self.prob_threshold < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "prob_threshold {} outside (0, 1)",
                self.prob_threshold
            )));
        }
        Ok(())
    }
}

/// One connected detection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionProposal {
    pub volume_id: String,
    pub size: usize,
    pub score: f64,
    /// Inclusive low and high corners.
    pub bbox: [[usize; 3]; 2],
    pub centroid: [f64; 3],
    /// Linear voxel indices, ascending.
    #[serde(skip)]
    pub voxels: Vec<usize>,
}

impl DetectionProposal {
    fn from_voxels(volume_id: &str, shape: Shape3, voxels: Vec<usize>, probs: &[f32]) -> Self {
        let mut lo = [usize::MAX; 3];
        let mut hi = [0usize; 3];
        let mut sum = [0.0f64; 3];
        let mut score = 0.0f64;
        for &i in &voxels {
            let c = shape.coords(i);
            for a in 0..3 {
                lo[a] = lo[a].min(c[a]);
                hi[a] = hi[a].max(c[a]);
                sum[a] += c[a] as f64;
            }
            score += probs[i] as f64;
        }
        let n = voxels.len() as f64;
        DetectionProposal {
            volume_id: volume_id.to_string(),
            size: voxels.len(),
            score: score / n,
            bbox: [lo, hi],
            centroid: sum.map(|s| s / n),
            voxels,
        }
    }
}

/// Voxels that survive the threshold, bone and spine filters.
pub fn candidate_voxels(probs: &[f32], volume: &CtVolume, config: &PostprocessConfig) -> Result<Vec<bool>> {
    config.validate()?;
    let shape = volume.shape;
    if probs.len() != shape.len() {
        return Err(Error::ShapeMismatch {
            expected: shape.0.to_vec(),
            actual: vec![probs.len()],
        });
    }
    let t = config.prob_threshold;
    let mut keep: Vec<bool> = probs
        .iter()
        .zip(&volume.intensities)
        .map(|(&p, &hu)| p as f64 >= t && hu >= config.bone_hu_threshold)
        .collect();
    if config.spine_exclusion {
        let spine = config.spine.mask(volume);
        keep.iter_mut().zip(spine).for_each(|(k, s)| *k &= !s);
    }
    Ok(keep)
}

pub fn extract_proposals(
    probs: &[f32],
    volume: &CtVolume,
    config: &PostprocessConfig,
) -> Result<Vec<DetectionProposal>> {
    let keep = candidate_voxels(probs, volume, config)?;
    let labeling = label(&keep, volume.shape, config.connectivity)?;
    Ok(labeling
        .components()
        .into_iter()
        .filter(|c| c.len() >= config.size_threshold.max(1))
        .map(|c| DetectionProposal::from_voxels(&volume.id, volume.shape, c, probs))
        .collect())
}

/// Union of proposal voxels as a binary field.
pub fn proposals_to_mask(proposals: &[DetectionProposal], shape: Shape3) -> Result<Vec<bool>> {
    let mut out = vec![false; shape.len()];
    for p in proposals {
        for &i in &p.voxels {
            if i >= out.len() {
                return Err(Error::OutOfRange {
                    index: i,
                    value: i as f64,
                });
            }
            if out[i] {
                return Err(Error::InvalidArgument(format!("proposals overlap at voxel {i}")));
            }
            out[i] = true;
        }
    }
    Ok(out)
}
