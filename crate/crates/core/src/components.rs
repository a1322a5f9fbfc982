//! 3D connected-component labeling.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::Shape3;

/// Voxel adjacency: faces (6), faces and edges (18), or full 3×3×3 (26).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Connectivity {
    Six,
    Eighteen,
    TwentySix,
}

impl Connectivity {
    pub fn offsets(self) -> Vec<[i64; 3]> {
        let mut out = Vec::with_capacity(26);
        for dz in -1i64..=1 {
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let n = dx.abs() + dy.abs() + dz.abs();
                    let keep = match self {
                        Connectivity::Six => n == 1,
                        Connectivity::Eighteen => n == 1 || n == 2,
                        Connectivity::TwentySix => n >= 1,
                    };
                    if keep {
                        out.push([dx, dy, dz]);
                    }
                }
            }
        }
        out
    }
}

impl TryFrom<u8> for Connectivity {
    type Error = Error;

    fn try_from(v: u8) -> Result<Self> {
        match v {
            6 => Ok(Connectivity::Six),
            18 => Ok(Connectivity::Eighteen),
            26 => Ok(Connectivity::TwentySix),
            other => Err(Error::InvalidArgument(format!(
                "connectivity must be 6, 18 or 26, got {other}"
            ))),
        }
    }
}

impl From<Connectivity> for u8 {
    fn from(c: Connectivity) -> u8 {
        match c {
            Connectivity::Six => 6,
            Connectivity::Eighteen => 18,
            Connectivity::TwentySix => 26,
        }
    }
}

/// Result of labeling: `labels[i]` is 0 for background or the 1-based
/// component id. Ids are assigned in raster order of each component's
/// first voxel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Labeling {
    pub shape: Shape3,
    pub labels: Vec<u32>,
    pub count: usize,
}

impl Labeling {
    /// Voxel indices of each component, indexed by `label - 1`.
    pub fn components(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.count];
        for (i, &l) in self.labels.iter().enumerate() {
            if l > 0 {
                out[l as usize - 1].push(i);
            }
        }
        out
    }
}

/// Label the foreground of `field` under `connectivity` with a BFS sweep.
pub fn label(field: &[bool], shape: Shape3, connectivity: Connectivity) -> Result<Labeling> {
    if field.len() != shape.len() {
        return Err(Error::PayloadMismatch {
            expected: shape.len(),
            actual: field.len(),
        });
    }
    let offsets = connectivity.offsets();
    let mut labels = vec![0u32; field.len()];
    let mut count = 0u32;
    let mut queue = VecDeque::new();
    for start in 0..field.len() {
        if !field[start] || labels[start] != 0 {
            continue;
        }
        count += 1;
        labels[start] = count;
        queue.push_back(start);
        while let Some(i) = queue.pop_front() {
            let [x, y, z] = shape.coords(i);
            for o in &offsets {
                let p = [x as i64 + o[0], y as i64 + o[1], z as i64 + o[2]];
                if !shape.contains(p) {
                    continue;
                }
                let j = shape.index(p[0] as usize, p[1] as usize, p[2] as usize);
                if field[j] && labels[j] == 0 {
                    labels[j] = count;
                    queue.push_back(j);
                }
            }
        }
    }
    Ok(Labeling {
        shape,
        labels,
        count: count as usize,
    })
}
