//! Postprocessing plus metrics over a set of predicted volumes, and the
//! probability/size threshold sweep.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::metrics::{dsc_volume, froc, match_proposals, report, EvaluationReport, FrocResult, HitRule, DSC_EPS, FP_TARGETS};
use crate::postprocess::{extract_proposals, proposals_to_mask, DetectionProposal, PostprocessConfig};
use crate::volume::{CtVolume, FractureMask};

pub const SWEEP_PROB_THRESHOLDS: [f64; 3] = [0.4, 0.5, 0.6];
pub const SWEEP_SIZE_THRESHOLDS: [usize; 4] = [50, 100, 150, 200];

/// One volume's prediction with its ground truth.
#[derive(Debug, Clone)]
pub struct EvalCase {
    pub volume: CtVolume,
    pub mask: FractureMask,
    pub probs: Vec<f32>,
}

impl EvalCase {
    pub fn new(volume: CtVolume, mask: FractureMask, probs: Vec<f32>) -> Result<Self> {
        mask.check_aligned(&volume)?;
        if probs.len() != volume.shape.len() {
            return Err(Error::PayloadMismatch {
                expected: volume.shape.len(),
                actual: probs.len(),
            });
        }
        Ok(EvalCase { volume, mask, probs })
    }
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub report: EvaluationReport,
    pub froc: FrocResult,
    pub dsc: Vec<f64>,
    pub proposals: Vec<Vec<DetectionProposal>>,
}

pub fn evaluate(cases: &[EvalCase], config: &PostprocessConfig, rule: HitRule, exec: Exec) -> Result<Evaluation> {
    if cases.is_empty() {
        return Err(Error::EmptyDataset);
    }
    config.validate()?;
    let per_volume = exec.try_map(cases, |c| -> Result<_> {
        let props = extract_proposals(&c.probs, &c.volume, config)?;
        let s = proposals_to_mask(&props, c.volume.shape)?;
        let d = dsc_volume(&s, &c.mask.binary(), DSC_EPS)?;
        Ok((props, d))
    })?;
    let (proposals, dsc): (Vec<_>, Vec<_>) = per_volume.into_iter().unzip();
    let masks: Vec<FractureMask> = cases.iter().map(|c| c.mask.clone()).collect();
    let matched = match_proposals(&proposals, &masks, rule)?;
    let froc = froc(&matched, &FP_TARGETS)?;
    Ok(Evaluation {
        report: report(&dsc, &froc)?,
        froc,
        dsc,
        proposals,
    })
}

/// One cell of the threshold grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub prob_threshold: f64,
    pub size_threshold: usize,
    pub proposals: usize,
    pub proposal_voxels: usize,
    #[serde(flatten)]
    pub report: EvaluationReport,
}

/// Evaluate every (probability, size) threshold pair, probability-major.
pub fn sweep(
    cases: &[EvalCase],
    base: &PostprocessConfig,
    prob_thresholds: &[f64],
    size_thresholds: &[usize],
    rule: HitRule,
    exec: Exec,
) -> Result<Vec<SweepCell>> {
    let mut out = Vec::with_capacity(prob_thresholds.len() * size_thresholds.len());
    for &p in prob_thresholds {
        for &s in size_thresholds {
            let cfg = PostprocessConfig {
                prob_threshold: p,
                size_threshold: s,
                ..*base
            };
            let ev = evaluate(cases, &cfg, rule, exec)?;
            let flat = ev.proposals.iter().flatten();
            out.push(SweepCell {
                prob_threshold: p,
                size_threshold: s,
                proposals: flat.clone().count(),
                proposal_voxels: flat.map(|d| d.size).sum(),
                report: ev.report,
            });
        }
    }
    Ok(out)
}
