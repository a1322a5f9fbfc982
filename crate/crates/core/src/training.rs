//! Training loop, per-epoch validation and best-checkpoint selection.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{save_checkpoint, CheckpointMeta};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::losses::{self, LossBreakdown, LossConfig};
use crate::metrics::{dsc_volume, DSC_EPS};
use crate::network::{init_params, CamUNetConfig, CamUNetParams};
use crate::optim::{clip_grad_norm, AdamW, AdamWConfig};
use crate::sampling::{derive_seed, load_manifest, CacheManifest, PatchSample};
use crate::tensor::Tensor;

pub const HISTORY_FILE: &str = "history.jsonl";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";

/// Which validation loss picks the best checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SelectionLoss {
    /// `α1·focal + α2·dice + θ(τ)·bce`.
    #[default]
    Total,
    /// `α1·focal + α2·dice`.
    Segmentation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub betas: (f64, f64),
    pub weight_decay: f64,
    pub batch_size: usize,
    /// Also the horizon `T` of the classification-weight schedule.
    pub epochs: usize,
    pub seed: u64,
    pub loss: LossConfig,
    pub model: CamUNetConfig,
    pub cache_manifest: PathBuf,
    /// Defaults to the training manifest when empty.
    pub val_manifest: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub selection: SelectionLoss,
    /// Global L2 gradient-norm cap; off when `None`.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let opt = AdamWConfig::default();
        TrainConfig {
            lr: opt.lr,
            betas: opt.betas,
            weight_decay: opt.weight_decay,
            batch_size: 16,
            epochs: 100,
            seed: 0,
            loss: LossConfig::default(),
            model: CamUNetConfig::default(),
            cache_manifest: PathBuf::from("cache/manifest.jsonl"),
            val_manifest: None,
            out_dir: PathBuf::from("runs/default"),
            selection: SelectionLoss::Total,
            grad_clip: None,
        }
    }
}

impl TrainConfig {
    /// Every problem at once, so a bad config file can be fixed in one pass.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.batch_size == 0 {
            out.push("batch_size must be >= 1".to_string());
        }
        if self.epochs == 0 {
            out.push("epochs must be >= 1".to_string());
        }
        if let Err(e) = self.optimizer().validate() {
            out.push(e.to_string());
        }
        if let Err(e) = self.loss_config().validate() {
            out.push(e.to_string());
        }
        if let Err(e) = self.model.validate() {
            out.push(e.to_string());
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                out.push("grad_clip must be positive".to_string());
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(p.join("; ")))
        }
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            betas: self.betas,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }

    /// Loss config with the schedule horizon tied to `epochs`.
    pub fn loss_config(&self) -> LossConfig {
        let mut l = self.loss;
        l.schedule.total_epochs = self.epochs.max(1);
        l
    }
}

/// One line of the training history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub theta: f64,
    pub train: LossBreakdown,
    pub val: LossBreakdown,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_accuracy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_dsc: Option<f64>,
    pub selection_loss: f64,
    pub best_val: f64,
    pub wall_time: f64,
}

impl EpochRecord {
    /// Copy with timing zeroed, for run-to-run comparisons.
    pub fn without_timing(&self) -> Self {
        EpochRecord {
            wall_time: 0.0,
            ..self.clone()
        }
    }
}

/// Validation pass results.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub losses: LossBreakdown,
    /// Patch-classifier accuracy at 0.5; `None` without a classifier.
    pub accuracy: Option<f64>,
    /// Mean DSC at 0.5 over patches with fracture voxels.
    pub dsc: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub best_checkpoint: PathBuf,
    pub best_epoch: usize,
    pub best_val: f64,
    pub history: Vec<EpochRecord>,
    pub params: CamUNetParams,
}

struct SampleResult {
    grads: Vec<f32>,
    focal: f64,
    dice: f64,
    cls: Option<f64>,
}

fn as_tensor(p: &PatchSample) -> Tensor {
    Tensor::from_vec(1, p.shape(), p.intensities.clone())
}

fn targets(p: &PatchSample) -> Vec<f32> {
    p.mask.iter().map(|&m| f32::from(m > 0)).collect()
}

/// Per-sample loss values and, when `scale > 0`, parameter gradients of the
/// batch loss contribution `scale · (α1·focal + α2·dice + θ·bce)`.
fn sample_step(
    params: &CamUNetParams,
    patch: &PatchSample,
    loss: &LossConfig,
    theta: f64,
    scale: f32,
) -> Result<SampleResult> {
    let (out, tape) = params.forward_train(&as_tensor(patch))?;
    let y = targets(patch);
    let gamma = loss.gamma as f32;
    let eps = loss.dice_eps as f32;
    let focal = losses::focal_loss(&out.seg_probs, &y, gamma)? as f64;
    let dice = losses::dice_loss(&out.seg_probs, &y, 1, eps)? as f64;
    let label = [f32::from(patch.label)];
    let cls = match out.cls_prob {
        Some(p) => Some(losses::bce_cls_loss(&[p], &label)? as f64),
        None => None,
    };
    let gf = losses::focal_loss_grad(&out.seg_probs, &y, gamma)?;
    let gd = losses::dice_loss_grad(&out.seg_probs, &y, 1, eps)?;
    let (a1, a2) = (loss.alpha_focal as f32, loss.alpha_dice as f32);
    let dprobs: Vec<f32> = gf.iter().zip(&gd).map(|(f, d)| scale * (a1 * f + a2 * d)).collect();
    let dcls = match out.cls_prob {
        Some(p) => scale * theta as f32 * losses::bce_cls_grad(&[p], &label)?[0],
        None => 0.0,
    };
    let grads = params.backward(&tape, &dprobs, dcls);
    Ok(SampleResult {
        grads,
        focal,
        dice,
        cls,
    })
}

fn mean_breakdown(
    parts: &[(f64, f64, Option<f64>)],
    theta: f64,
    loss: &LossConfig,
) -> Result<LossBreakdown> {
    let n = parts.len() as f64;
    let focal = parts.iter().map(|p| p.0).sum::<f64>() / n;
    let dice = parts.iter().map(|p| p.1).sum::<f64>() / n;
    let cls = if parts.iter().all(|p| p.2.is_some()) {
        Some(parts.iter().map(|p| p.2.unwrap()).sum::<f64>() / n)
    } else {
        None
    };
    losses::total_loss(focal, dice, cls, theta, loss)
}

fn load_all(manifest: &CacheManifest, idx: &[usize], exec: Exec) -> Result<Vec<PatchSample>> {
    exec.try_map(idx, |&i| manifest.load_patch(&manifest.entries[i]))
}

/// Losses and accuracies of `params` on every patch of `manifest`.
pub fn evaluate_epoch(
    params: &CamUNetParams,
    manifest: &CacheManifest,
    loss: &LossConfig,
    epoch: usize,
    exec: Exec,
) -> Result<Evaluation> {
    if manifest.entries.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let theta = losses::theta(epoch, &loss.schedule)?;
    let idx: Vec<usize> = (0..manifest.entries.len()).collect();
    let mut parts = Vec::with_capacity(idx.len());
    let mut correct = 0usize;
    let mut dscs = Vec::new();
    for chunk in idx.chunks(exec.workers().max(1) * 2) {
        let patches = load_all(manifest, chunk, exec)?;
        let rows = exec.try_map(&patches, |p| -> Result<_> {
            let out = params.forward(&as_tensor(p))?;
            let y = targets(p);
            let focal = losses::focal_loss(&out.seg_probs, &y, loss.gamma as f32)? as f64;
            let dice = losses::dice_loss(&out.seg_probs, &y, 1, loss.dice_eps as f32)? as f64;
            let label = f32::from(p.label);
            let cls = match out.cls_prob {
                Some(pr) => Some((losses::bce_cls_loss(&[pr], &[label])? as f64, (pr >= 0.5) == p.label)),
                None => None,
            };
            let dsc = if p.label {
                let s: Vec<bool> = out.seg_probs.iter().map(|&v| v >= 0.5).collect();
                let g: Vec<bool> = p.mask.iter().map(|&m| m > 0).collect();
                Some(dsc_volume(&s, &g, DSC_EPS)?)
            } else {
                None
            };
            Ok((focal, dice, cls, dsc))
        })?;
        for (focal, dice, cls, dsc) in rows {
            parts.push((focal, dice, cls.map(|c| c.0)));
            correct += usize::from(cls.is_some_and(|c| c.1));
            dscs.extend(dsc);
        }
    }
    let losses = mean_breakdown(&parts, theta, loss)?;
    let accuracy = params
        .config
        .classifier_enabled
        .then(|| correct as f64 / parts.len() as f64);
    let dsc = (!dscs.is_empty()).then(|| dscs.iter().sum::<f64>() / dscs.len() as f64);
    Ok(Evaluation {
        losses,
        accuracy,
        dsc,
    })
}

fn selection_value(l: &LossBreakdown, kind: SelectionLoss, loss: &LossConfig) -> f64 {
    match kind {
        SelectionLoss::Total => l.total,
        SelectionLoss::Segmentation => loss.alpha_focal * l.focal + loss.alpha_dice * l.dice,
    }
}

/// Train as configured.
pub fn train(config: &TrainConfig, exec: Exec) -> Result<TrainOutcome> {
    train_with_observer(config, exec, |_, _| true)
}

/// Train, calling `observer` after each epoch; returning `false` stops
/// early.
pub fn train_with_observer<F>(config: &TrainConfig, exec: Exec, mut observer: F) -> Result<TrainOutcome>
where
    F: FnMut(&EpochRecord, &CamUNetParams) -> bool,
{
    config.validate()?;
    let train_set = load_manifest(&config.cache_manifest)?;
    let val_set = match &config.val_manifest {
        Some(p) => load_manifest(p)?,
        None => train_set.clone(),
    };
    for m in [&train_set, &val_set] {
        if m.edge != config.model.patch_edge {
            return Err(Error::InvalidConfig(format!(
                "cache patches are {}³ but the model expects {}³",
                m.edge, config.model.patch_edge
            )));
        }
    }
    let loss = config.loss_config();
    let mut params = init_params(&config.model, config.seed)?;
    let mut opt = AdamW::new(config.optimizer(), params.count());
    fs::create_dir_all(&config.out_dir)?;
    let best_path = config.out_dir.join(BEST_CHECKPOINT);
    let mut history_file = BufWriter::new(File::create(config.out_dir.join(HISTORY_FILE))?);

    let mut history = Vec::new();
    let mut best = (usize::MAX, f64::INFINITY);
    let mut order: Vec<usize> = (0..train_set.entries.len()).collect();
    for epoch in 0..config.epochs {
        let started = Instant::now();
        let theta = losses::theta(epoch, &loss.schedule)?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, epoch as u64));
        order.sort_unstable();
        order.shuffle(&mut rng);

        let mut parts = Vec::with_capacity(order.len());
        for batch in order.chunks(config.batch_size) {
            let patches = load_all(&train_set, batch, exec)?;
            let scale = 1.0 / batch.len() as f32;
            let results = exec.try_map(&patches, |p| sample_step(&params, p, &loss, theta, scale))?;
            let mut grads = vec![0.0f32; params.count()];
            for r in &results {
                grads.iter_mut().zip(&r.grads).for_each(|(g, s)| *g += s);
                parts.push((r.focal, r.dice, r.cls));
            }
            if let Some(bad) = results
                .iter()
                .find(|r| !r.focal.is_finite() || !r.dice.is_finite() || r.cls.is_some_and(|c| !c.is_finite()))
            {
                writeln!(
                    history_file,
                    "{}",
                    serde_json::json!({"epoch": epoch, "error": "non-finite loss",
                        "focal": bad.focal, "dice": bad.dice, "cls": bad.cls})
                )?;
                history_file.flush()?;
                return Err(Error::NonFinite(format!("loss at epoch {epoch}")));
            }
            if let Some(max) = config.grad_clip {
                clip_grad_norm(&mut grads, max);
            }
            opt.step(&mut params.values, &grads)?;
        }
        let train_losses = mean_breakdown(&parts, theta, &loss)?;
        let eval = evaluate_epoch(&params, &val_set, &loss, epoch, exec)?;
        let sel = selection_value(&eval.losses, config.selection, &loss);
        if !sel.is_finite() {
            return Err(Error::NonFinite(format!("validation loss at epoch {epoch}")));
        }
        if sel < best.1 {
            best = (epoch, sel);
            save_checkpoint(
                &best_path,
                &params,
                &CheckpointMeta {
                    seed: config.seed,
                    epoch: Some(epoch),
                    val_loss: Some(sel),
                },
            )?;
        }
        let record = EpochRecord {
            epoch,
            theta,
            train: train_losses,
            val: eval.losses,
            val_accuracy: eval.accuracy,
            val_dsc: eval.dsc,
            selection_loss: sel,
            best_val: best.1,
            wall_time: started.elapsed().as_secs_f64(),
        };
        serde_json::to_writer(&mut history_file, &record)?;
        writeln!(history_file)?;
        history_file.flush()?;
        let go_on = observer(&record, &params);
        history.push(record);
        if !go_on {
            break;
        }
    }
    save_checkpoint(
        &config.out_dir.join(LAST_CHECKPOINT),
        &params,
        &CheckpointMeta {
            seed: config.seed,
            epoch: history.last().map(|r| r.epoch),
            val_loss: history.last().map(|r| r.selection_loss),
        },
    )?;
    Ok(TrainOutcome {
        best_checkpoint: best_path,
        best_epoch: best.0,
        best_val: best.1,
        history,
        params,
    })
}

/// Read a history file written during training.
pub fn read_history(path: &Path) -> Result<Vec<EpochRecord>> {
    let text = fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::FileMissing(path.to_path_buf()),
        _ => Error::Io(e),
    })?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}
