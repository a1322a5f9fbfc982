//! In-memory CT volumes and fracture masks.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Volume extent `(W, H, D)` in voxels, W fastest in memory.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape3(pub [usize; 3]);

impl Shape3 {
    pub fn new(w: usize, h: usize, d: usize) -> Self {
        Shape3([w, h, d])
    }

    pub fn cube(edge: usize) -> Self {
        Shape3([edge; 3])
    }

    pub fn w(&self) -> usize {
        self.0[0]
    }

    pub fn h(&self) -> usize {
        self.0[1]
    }

    pub fn d(&self) -> usize {
        self.0[2]
    }

    pub fn len(&self) -> usize {
        self.0[0] * self.0[1] * self.0[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.0[0] * (y + self.0[1] * z)
    }

    #[inline]
    pub fn coords(&self, index: usize) -> [usize; 3] {
        let w = self.0[0];
        let h = self.0[1];
        [index % w, (index / w) % h, index / (w * h)]
    }

    /// In-bounds check for signed coordinates.
    pub fn contains(&self, p: [i64; 3]) -> bool {
        (0..3).all(|a| p[a] >= 0 && (p[a] as usize) < self.0[a])
    }

    pub fn validate(&self) -> Result<()> {
        if self.0.iter().any(|&n| n == 0) {
            return Err(Error::InvalidArgument(format!(
                "shape components must be >= 1, got {:?}",
                self.0
            )));
        }
        Ok(())
    }
}

impl From<[usize; 3]> for Shape3 {
    fn from(a: [usize; 3]) -> Self {
        Shape3(a)
    }
}

/// A CT scan: Hounsfield-unit intensities with voxel spacing in mm.
#[derive(Debug, Clone, PartialEq)]
pub struct CtVolume {
    pub id: String,
    pub shape: Shape3,
    pub spacing: [f64; 3],
    pub intensities: Vec<f32>,
}

impl CtVolume {
    pub fn new(
        id: impl Into<String>,
        shape: Shape3,
        spacing: [f64; 3],
        intensities: Vec<f32>,
    ) -> Result<Self> {
        shape.validate()?;
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "spacing components must be > 0, got {spacing:?}"
            )));
        }
        if intensities.len() != shape.len() {
            return Err(Error::PayloadMismatch {
                expected: shape.len(),
                actual: intensities.len(),
            });
        }
        Ok(CtVolume {
            id: id.into(),
            shape,
            spacing,
            intensities,
        })
    }

    pub fn filled(id: impl Into<String>, shape: Shape3, hu: f32) -> Self {
        CtVolume {
            id: id.into(),
            shape,
            spacing: [1.0; 3],
            intensities: vec![hu; shape.len()],
        }
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, z: usize) -> f32 {
        self.intensities[self.shape.index(x, y, z)]
    }
}

/// Instance-labelled fracture mask: 0 is background, `1..=K` are instances.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FractureMask {
    pub shape: Shape3,
    pub labels: Vec<u32>,
}

impl FractureMask {
    /// Build a mask, checking that labels form the contiguous set `{0..K}`.
    pub fn new(shape: Shape3, labels: Vec<u32>) -> Result<Self> {
        shape.validate()?;
        if labels.len() != shape.len() {
            return Err(Error::PayloadMismatch {
                expected: shape.len(),
                actual: labels.len(),
            });
        }
        let max = labels.iter().copied().max().unwrap_or(0) as usize;
        let mut seen = vec![false; max + 1];
        for &l in &labels {
            seen[l as usize] = true;
        }
        if let Some(gap) = seen.iter().skip(1).position(|s| !s) {
            return Err(Error::InvalidArgument(format!(
                "mask labels are not contiguous: label {} missing below max {max}",
                gap + 1
            )));
        }
        Ok(FractureMask { shape, labels })
    }

    pub fn empty(shape: Shape3) -> Self {
        FractureMask {
            shape,
            labels: vec![0; shape.len()],
        }
    }

    pub fn instance_count(&self) -> usize {
        self.labels.iter().copied().max().unwrap_or(0) as usize
    }

    pub fn binary(&self) -> Vec<bool> {
        self.labels.iter().map(|&l| l > 0).collect()
    }

    /// Mean voxel coordinate of every instance, indexed by `label - 1`.
    pub fn instance_centroids(&self) -> Vec<[f64; 3]> {
        let k = self.instance_count();
        let mut sums = vec![[0.0f64; 3]; k];
        let mut counts = vec![0usize; k];
        for (i, &l) in self.labels.iter().enumerate() {
            if l > 0 {
                let c = self.shape.coords(i);
                let s = &mut sums[l as usize - 1];
                for a in 0..3 {
                    s[a] += c[a] as f64;
                }
                counts[l as usize - 1] += 1;
            }
        }
        sums.iter()
            .zip(&counts)
            .map(|(s, &n)| {
                let n = n.max(1) as f64;
                [s[0] / n, s[1] / n, s[2] / n]
            })
            .collect()
    }

    /// Voxel count of every instance, indexed by `label - 1`.
    pub fn instance_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0usize; self.instance_count()];
        for &l in &self.labels {
            if l > 0 {
                sizes[l as usize - 1] += 1;
            }
        }
        sizes
    }

    pub fn check_aligned(&self, volume: &CtVolume) -> Result<()> {
        if self.shape != volume.shape {
            return Err(Error::ShapeMismatch {
                expected: volume.shape.0.to_vec(),
                actual: self.shape.0.to_vec(),
            });
        }
        Ok(())
    }
}
