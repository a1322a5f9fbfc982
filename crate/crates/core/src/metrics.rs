//! Detection (FROC) and overlap (DSC) metrics.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::postprocess::DetectionProposal;
use crate::volume::FractureMask;

pub const FP_TARGETS: [f64; 5] = [0.5, 1.0, 2.0, 4.0, 8.0];
pub const DSC_EPS: f64 = 1e-5;

/// When a proposal counts as hitting a ground-truth instance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum HitRule {
    /// At least one shared voxel.
    #[default]
    AnyOverlap,
    /// Intersection over union at least this value.
    Iou(f64),
}

/// A proposal reduced to what FROC needs.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchedProposal {
    pub volume: usize,
    pub score: f64,
    /// Instance labels this proposal hits; empty means false positive.
    pub hits: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchedSet {
    pub proposals: Vec<MatchedProposal>,
    pub volumes: usize,
    pub total_instances: usize,
}

/// Match proposals in each volume against that volume's instances.
pub fn match_proposals(
    proposals: &[Vec<DetectionProposal>],
    gt: &[FractureMask],
    rule: HitRule,
) -> Result<MatchedSet> {
    if proposals.len() != gt.len() {
        return Err(Error::ShapeMismatch {
            expected: vec![gt.len()],
            actual: vec![proposals.len()],
        });
    }
    let mut out = Vec::new();
    for (v, (props, mask)) in proposals.iter().zip(gt).enumerate() {
        let sizes = mask.instance_sizes();
        for p in props {
            if let Some(&bad) = p.voxels.iter().find(|&&i| i >= mask.labels.len()) {
                return Err(Error::OutOfRange {
                    index: bad,
                    value: bad as f64,
                });
            }
            let mut overlap = vec![0usize; sizes.len()];
            for &i in &p.voxels {
                let l = mask.labels[i];
                if l > 0 {
                    overlap[l as usize - 1] += 1;
                }
            }
            let hits = overlap
                .iter()
                .enumerate()
                .filter(|&(k, &o)| match rule {
                    HitRule::AnyOverlap => o > 0,
                    HitRule::Iou(t) => {
                        let union = p.voxels.len() + sizes[k] - o;
                        o > 0 && o as f64 / union as f64 >= t
                    }
                })
                .map(|(k, _)| k as u32 + 1)
                .collect();
            out.push(MatchedProposal {
                volume: v,
                score: p.score,
                hits,
            });
        }
    }
    Ok(MatchedSet {
        proposals: out,
        volumes: gt.len(),
        total_instances: gt.iter().map(FractureMask::instance_count).sum(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoint {
    /// `+∞` for the empty-set point, written as `null` in JSON.
    #[serde(deserialize_with = "null_as_infinity")]
    pub threshold: f64,
    pub fp_per_volume: f64,
    pub sensitivity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrocResult {
    /// Starts at the empty-set point, then one point per distinct score,
    /// in decreasing threshold order.
    pub operating_points: Vec<OperatingPoint>,
    /// `(fp target, sensitivity)` pairs.
    pub sensitivities_at: Vec<(f64, f64)>,
    pub average: f64,
}

impl FrocResult {
    pub fn at(&self, target: f64) -> Option<f64> {
        self.sensitivities_at.iter().find(|(t, _)| *t == target).map(|(_, s)| *s)
    }
}

fn null_as_infinity<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
}

/// Best sensitivity achieved with FP rate at most `target`.
pub fn sensitivity_at(points: &[OperatingPoint], target: f64) -> f64 {
    points
        .iter()
        .filter(|p| p.fp_per_volume <= target)
        .map(|p| p.sensitivity)
        .fold(0.0, f64::max)
}

pub fn froc(matched: &MatchedSet, targets: &[f64]) -> Result<FrocResult> {
    if matched.volumes == 0 {
        return Err(Error::EmptyDataset);
    }
    if matched.total_instances == 0 {
        return Err(Error::NoGroundTruth);
    }
    let v = matched.volumes as f64;
    let m = matched.total_instances as f64;
    let mut order: Vec<&MatchedProposal> = matched.proposals.iter().collect();
    order.sort_by(|a, b| b.score.total_cmp(&a.score));

    let mut points = vec![OperatingPoint {
        threshold: f64::INFINITY,
        fp_per_volume: 0.0,
        sensitivity: 0.0,
    }];
    let mut detected: BTreeSet<(usize, u32)> = BTreeSet::new();
    let mut fps = 0usize;
    let mut i = 0;
    while i < order.len() {
        let t = order[i].score;
        while i < order.len() && order[i].score == t {
            let p = order[i];
            if p.hits.is_empty() {
                fps += 1;
            }
            for &h in &p.hits {
                detected.insert((p.volume, h));
            }
            i += 1;
        }
        points.push(OperatingPoint {
            threshold: t,
            fp_per_volume: fps as f64 / v,
            sensitivity: detected.len() as f64 / m,
        });
    }
    let sensitivities_at: Vec<(f64, f64)> = targets.iter().map(|&t| (t, sensitivity_at(&points, t))).collect();
    let average = if targets.is_empty() {
        0.0
    } else {
        sensitivities_at.iter().map(|(_, s)| s).sum::<f64>() / targets.len() as f64
    };
    Ok(FrocResult {
        operating_points: points,
        sensitivities_at,
        average,
    })
}

/// `(2·|s∩g| + ε) / (|s| + |g| + ε)`.
pub fn dsc_volume(s: &[bool], g: &[bool], eps: f64) -> Result<f64> {
    if s.len() != g.len() {
        return Err(Error::ShapeMismatch {
            expected: vec![g.len()],
            actual: vec![s.len()],
        });
    }
    let (mut inter, mut ns, mut ng) = (0usize, 0usize, 0usize);
    for (&a, &b) in s.iter().zip(g) {
        inter += usize::from(a && b);
        ns += usize::from(a);
        ng += usize::from(b);
    }
    Ok((2.0 * inter as f64 + eps) / ((ns + ng) as f64 + eps))
}

/// The evaluation document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub volumes: usize,
    pub dsc_mean: f64,
    /// Population standard deviation.
    pub dsc_std: f64,
    #[serde(rename = "froc_0.5")]
    pub froc_0_5: f64,
    pub froc_1: f64,
    pub froc_2: f64,
    pub froc_4: f64,
    pub froc_8: f64,
    pub froc_avg: f64,
}

pub fn report(dsc: &[f64], froc: &FrocResult) -> Result<EvaluationReport> {
    if dsc.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let n = dsc.len() as f64;
    let mean = dsc.iter().sum::<f64>() / n;
    let var = dsc.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / n;
    let at = |t: f64| froc.at(t).unwrap_or_else(|| sensitivity_at(&froc.operating_points, t));
    let levels = FP_TARGETS.map(at);
    Ok(EvaluationReport {
        volumes: dsc.len(),
        dsc_mean: mean,
        dsc_std: var.sqrt(),
        froc_0_5: levels[0],
        froc_1: levels[1],
        froc_2: levels[2],
        froc_4: levels[3],
        froc_8: levels[4],
        froc_avg: levels.iter().sum::<f64>() / 5.0,
    })
}

impl EvaluationReport {
    /// Plain-text table for terminals.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "volumes   {}", self.volumes);
        let _ = writeln!(s, "DSC       {:.4} ± {:.4}", self.dsc_mean, self.dsc_std);
        let _ = writeln!(s, "FP/vol    0.5     1       2       4       8       avg");
        let _ = writeln!(
            s,
            "sens      {:.4}  {:.4}  {:.4}  {:.4}  {:.4}  {:.4}",
            self.froc_0_5, self.froc_1, self.froc_2, self.froc_4, self.froc_8, self.froc_avg
        );
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Shape3;

    #[test]
    fn operating_points_survive_json() {
        let r = FrocResult {
            operating_points: vec![
                OperatingPoint { threshold: f64::INFINITY, fp_per_volume: 0.0, sensitivity: 0.0 },
                OperatingPoint { threshold: 0.7, fp_per_volume: 0.5, sensitivity: 0.25 },
            ],
            sensitivities_at: vec![(0.5, 0.25)],
            average: 0.25,
        };
        let back: FrocResult = serde_json::from_str(&serde_json::to_string(&r).unwrap()).unwrap();
        assert_eq!(back, r);
    }

    fn prop(voxels: Vec<usize>, score: f64) -> DetectionProposal {
        DetectionProposal {
            volume_id: "v".into(),
            size: voxels.len(),
            score,
            bbox: [[0; 3]; 2],
            centroid: [0.0; 3],
            voxels,
        }
    }

    fn mask(labels: Vec<u32>) -> FractureMask {
        let n = labels.len();
        FractureMask::new(Shape3::new(n, 1, 1), labels).unwrap()
    }

    #[test]
    fn hit_rules() {
        let gt = vec![mask(vec![0, 1, 1, 0, 2, 2])];
        let props = vec![vec![
            prop(vec![1, 2], 0.9),
            prop(vec![0], 0.8),
            prop(vec![2, 3], 0.7),
            prop(vec![3, 4, 5], 0.6),
        ]];
        let m = match_proposals(&props, &gt, HitRule::AnyOverlap).unwrap();
        let hits: Vec<Vec<u32>> = m.proposals.iter().map(|p| p.hits.clone()).collect();
        assert_eq!(hits, vec![vec![1], vec![], vec![1], vec![2]]);
        let m = match_proposals(&props, &gt, HitRule::Iou(0.5)).unwrap();
        let hits: Vec<Vec<u32>> = m.proposals.iter().map(|p| p.hits.clone()).collect();
        assert_eq!(hits, vec![vec![1], vec![], vec![], vec![2]]);
    }

    #[test]
    fn froc_examples() {
        let gt = vec![mask(vec![1, 0, 2, 0])];
        let perfect = vec![vec![prop(vec![0], 1.0), prop(vec![2], 1.0)]];
        let r = froc(&match_proposals(&perfect, &gt, HitRule::AnyOverlap).unwrap(), &FP_TARGETS).unwrap();
        assert!(r.sensitivities_at.iter().all(|&(_, s)| s == 1.0));

        let none = vec![vec![]];
        let r = froc(&match_proposals(&none, &gt, HitRule::AnyOverlap).unwrap(), &FP_TARGETS).unwrap();
        assert!(r.sensitivities_at.iter().all(|&(_, s)| s == 0.0));

        let empty_gt = vec![mask(vec![0, 0])];
        let m = match_proposals(&[vec![]], &empty_gt, HitRule::AnyOverlap).unwrap();
        assert!(matches!(froc(&m, &FP_TARGETS), Err(Error::NoGroundTruth)));
    }

    #[test]
    fn double_hit_counts_once() {
        let gt = vec![mask(vec![1, 1, 0])];
        let props = vec![vec![prop(vec![0], 0.9), prop(vec![1], 0.8)]];
        let m = match_proposals(&props, &gt, HitRule::AnyOverlap).unwrap();
        assert!(m.proposals.iter().all(|p| !p.hits.is_empty()));
        let r = froc(&m, &[0.5]).unwrap();
        assert_eq!(r.operating_points.last().unwrap().sensitivity, 1.0);
        assert_eq!(r.operating_points.last().unwrap().fp_per_volume, 0.0);
    }

    #[test]
    fn dsc_examples() {
        let g = [true, true, false, false];
        assert!((dsc_volume(&g, &g, DSC_EPS).unwrap() - 1.0).abs() < 1e-6);
        let s = [false, false, true, true];
        assert!(dsc_volume(&s, &g, DSC_EPS).unwrap() < 1e-5);
        let s = [true, false, true, false];
        assert!((dsc_volume(&s, &g, 0.0).unwrap() - 0.5).abs() < 1e-12);
        assert!(dsc_volume(&s, &g[..3], DSC_EPS).is_err());
    }

    #[test]
    fn report_statistics() {
        let r = FrocResult {
            operating_points: vec![],
            sensitivities_at: FP_TARGETS.iter().map(|&t| (t, t / 8.0)).collect(),
            average: 0.0,
        };
        let rep = report(&[0.5, 0.7], &r).unwrap();
        assert!((rep.dsc_mean - 0.6).abs() < 1e-12);
        assert!((rep.dsc_std - 0.1).abs() < 1e-12);
        assert_eq!(report(&[0.3], &r).unwrap().dsc_std, 0.0);
        let json = serde_json::to_string(&rep).unwrap();
        assert!(json.contains("\"froc_0.5\""));
        let back: EvaluationReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, rep);
        assert!(report(&[], &r).is_err());
    }
}
