//! Segmentation and classification losses and the composite objective.
//!
//! `L = α1·focal + α2·dice + θ(τ)·bce`, where `θ` decays with the epoch so
//! the auxiliary classification term fades out late in training.
//!
//! Focal loss follows the usual convention `p_t = p` for positive voxels and
//! `p_t = 1 − p` for negatives. Probabilities are clamped to `[δ, 1 − δ]`
//! before logs; gradients are zero where the clamp is active.

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    /// `λ0 · (1 − τ/T)`
    Linear,
    /// `λ0 · exp(−5τ/T)`
    Exponential,
}

/// Weight schedule of the classification term.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ThetaSchedule {
    pub kind: ScheduleKind,
    pub lambda0: f64,
    pub total_epochs: usize,
}

impl Default for ThetaSchedule {
    fn default() -> Self {
        ThetaSchedule {
            kind: ScheduleKind::Linear,
            lambda0: 1.0,
            total_epochs: 100,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub alpha_focal: f64,
    pub alpha_dice: f64,
    pub gamma: f64,
    pub dice_eps: f64,
    pub schedule: ThetaSchedule,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha_focal: 1.0,
            alpha_dice: 1.0,
            gamma: 2.0,
            dice_eps: 1e-5,
            schedule: ThetaSchedule::default(),
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if !(self.alpha_focal >= 0.0) || !(self.alpha_dice >= 0.0) {
            return bad("loss weights must be non-negative");
        }
        if !(self.gamma >= 0.0) {
            return bad("focal gamma must be non-negative");
        }
        if !(self.dice_eps > 0.0) {
            return bad("dice epsilon must be positive");
        }
        if !(self.schedule.lambda0 >= 0.0) {
            return bad("theta lambda0 must be non-negative");
        }
        if self.schedule.total_epochs == 0 {
            return bad("theta schedule needs at least one epoch");
        }
        Ok(())
    }
}

fn check<T: Float>(probs: &[T], targets: &[T]) -> Result<()> {
    if probs.len() != targets.len() {
        return Err(Error::ShapeMismatch {
            expected: vec![targets.len()],
            actual: vec![probs.len()],
        });
    }
    if probs.is_empty() {
        return Err(Error::InvalidArgument("empty input".into()));
    }
    if probs.iter().chain(targets).any(|v| v.is_nan()) {
        return Err(Error::NonFinite("NaN in loss input".into()));
    }
    Ok(())
}

fn c<T: Float>(v: f64) -> T {
    T::from(v).expect("representable")
}

/// Clamped probability and whether the clamp was inactive.
fn clamp<T: Float>(p: T) -> (T, bool) {
    let lo = c::<T>(PROB_CLAMP);
    let hi = T::one() - lo;
    if p < lo {
        (lo, false)
    } else if p > hi {
        (hi, false)
    } else {
        (p, true)
    }
}

/// Mean focal loss over every voxel of the batch.
pub fn focal_loss<T: Float>(probs: &[T], targets: &[T], gamma: T) -> Result<T> {
    check(probs, targets)?;
    let half = c::<T>(0.5);
    let mut total = T::zero();
    for (&p, &y) in probs.iter().zip(targets) {
        let (p, _) = clamp(p);
        let pt = if y > half { p } else { T::one() - p };
        total = total - (T::one() - pt).powf(gamma) * pt.ln();
    }
    Ok(total / c(probs.len() as f64))
}

/// Gradient of [`focal_loss`] w.r.t. each probability.
pub fn focal_loss_grad<T: Float>(probs: &[T], targets: &[T], gamma: T) -> Result<Vec<T>> {
    check(probs, targets)?;
    let half = c::<T>(0.5);
    let n: T = c(probs.len() as f64);
    Ok(probs
        .iter()
        .zip(targets)
        .map(|(&p, &y)| {
            let (p, live) = clamp(p);
            if !live {
                return T::zero();
            }
            let pos = y > half;
            let pt = if pos { p } else { T::one() - p };
            let q = T::one() - pt;
            // d/dpt of −q^γ ln pt
            let dpt = if gamma == T::zero() {
                -T::one() / pt
            } else {
                gamma * q.powf(gamma - T::one()) * pt.ln() - q.powf(gamma) / pt
            };
            let d = if pos { dpt } else { -dpt };
            d / n
        })
        .collect())
}

fn batch_len<T>(probs: &[T], batch: usize) -> Result<usize> {
    if batch == 0 || probs.len() % batch != 0 {
        return Err(Error::InvalidArgument(format!(
            "{} values cannot be split into {batch} samples",
            probs.len()
        )));
    }
    Ok(probs.len() / batch)
}

/// Soft dice loss `1 − (2Σgp + ε)/(Σg + Σp + ε)` averaged over samples.
pub fn dice_loss<T: Float>(probs: &[T], targets: &[T], batch: usize, eps: T) -> Result<T> {
    check(probs, targets)?;
    let n = batch_len(probs, batch)?;
    let mut total = T::zero();
    for (p, g) in probs.chunks(n).zip(targets.chunks(n)) {
        let (mut inter, mut sg, mut sp) = (T::zero(), T::zero(), T::zero());
        for (&pv, &gv) in p.iter().zip(g) {
            inter = inter + pv * gv;
            sg = sg + gv;
            sp = sp + pv;
        }
        total = total + T::one() - (c::<T>(2.0) * inter + eps) / (sg + sp + eps);
    }
    Ok(total / c(batch as f64))
}

pub fn dice_loss_grad<T: Float>(probs: &[T], targets: &[T], batch: usize, eps: T) -> Result<Vec<T>> {
    check(probs, targets)?;
    let n = batch_len(probs, batch)?;
    let b: T = c(batch as f64);
    let two = c::<T>(2.0);
    let mut out = Vec::with_capacity(probs.len());
    for (p, g) in probs.chunks(n).zip(targets.chunks(n)) {
        let (mut inter, mut sg, mut sp) = (T::zero(), T::zero(), T::zero());
        for (&pv, &gv) in p.iter().zip(g) {
            inter = inter + pv * gv;
            sg = sg + gv;
            sp = sp + pv;
        }
        let num = two * inter + eps;
        let den = sg + sp + eps;
        for &gv in g {
            out.push(-(two * gv * den - num) / (den * den) / b);
        }
    }
    Ok(out)
}

/// Mean binary cross-entropy of patch probabilities against labels.
pub fn bce_cls_loss<T: Float>(probs: &[T], labels: &[T]) -> Result<T> {
    check(probs, labels)?;
    let mut total = T::zero();
    for (&p, &y) in probs.iter().zip(labels) {
        let (p, _) = clamp(p);
        total = total - (y * p.ln() + (T::one() - y) * (T::one() - p).ln());
    }
    Ok(total / c(probs.len() as f64))
}

pub fn bce_cls_grad<T: Float>(probs: &[T], labels: &[T]) -> Result<Vec<T>> {
    check(probs, labels)?;
    let n: T = c(probs.len() as f64);
    Ok(probs
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let (p, live) = clamp(p);
            if !live {
                return T::zero();
            }
            -(y / p - (T::one() - y) / (T::one() - p)) / n
        })
        .collect())
}

/// Classification weight at epoch `epoch` (0-based, at most `T`).
pub fn theta(epoch: usize, schedule: &ThetaSchedule) -> Result<f64> {
    let t = schedule.total_epochs;
    if epoch > t {
        return Err(Error::InvalidArgument(format!(
            "epoch {epoch} beyond schedule length {t}"
        )));
    }
    let frac = epoch as f64 / t as f64;
    Ok(match schedule.kind {
        ScheduleKind::Linear => schedule.lambda0 * (1.0 - frac),
        ScheduleKind::Exponential => schedule.lambda0 * (-5.0 * frac).exp(),
    })
}

/// Loss components and their weighted total.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub focal: f64,
    pub dice: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub cls: Option<f64>,
}

/// Combine components: `α1·focal + α2·dice + θ·cls`. A missing `cls`
/// (classifier disabled) contributes nothing.
pub fn total_loss(
    focal: f64,
    dice: f64,
    cls: Option<f64>,
    theta: f64,
    config: &LossConfig,
) -> Result<LossBreakdown> {
    let parts = [Some(focal), Some(dice), cls, Some(theta)];
    if parts.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!(
            "loss components focal={focal} dice={dice} cls={cls:?} theta={theta}"
        )));
    }
    let total =
        config.alpha_focal * focal + config.alpha_dice * dice + cls.map_or(0.0, |c| theta * c);
    Ok(LossBreakdown {
        total,
        focal,
        dice,
        cls,
    })
}

impl LossBreakdown {
    /// Recompute the total from components.
    pub fn recombine(&self, theta: f64, config: &LossConfig) -> f64 {
        config.alpha_focal * self.focal + config.alpha_dice * self.dice + self.cls.map_or(0.0, |c| theta * c)
    }
}
