use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context as _};
use log::info;
use serde::{Deserialize, Serialize};

use ribcam::checkpoint::load_checkpoint;
use ribcam::evaluation::{evaluate, sweep, EvalCase, SweepCell, SWEEP_PROB_THRESHOLDS, SWEEP_SIZE_THRESHOLDS};
use ribcam::inference::{crop_normalized, predict_volume, Window};
use ribcam::io::{self, VolumeFormat};
use ribcam::metrics::{EvaluationReport, FrocResult, HitRule};
use ribcam::phantom::{generate, PhantomSpec};
use ribcam::postprocess::{DetectionProposal, PostprocessConfig};
use ribcam::sampling::{build_cache, derive_seed, plan_samples, NegativeSource, PairedFiles, VolumeSource};
use ribcam::training::{self, TrainConfig};
use ribcam::{CtVolume, Exec, Shape3};

use crate::config::{output_path, RunConfig};
use crate::plot;
use crate::{ConfigArgs, Failure, Format, PlotArgs, PlotKind};

pub struct Context {
    pub output_root: Option<PathBuf>,
    pub exec: Exec,
}

impl Context {
    fn out(&self, p: &Path) -> PathBuf {
        output_path(self.output_root.as_deref(), p)
    }
}

type CmdResult = Result<(), Failure>;

fn invalid(msg: impl Into<String>) -> Failure {
    Failure::Validation(anyhow!(msg.into()))
}

fn load_config(cfg: &ConfigArgs) -> Result<RunConfig, Failure> {
    RunConfig::load(cfg.config.as_deref(), &cfg.overrides)
}

#[allow(clippy::too_many_arguments)]
pub fn prepare(
    ctx: &Context,
    volumes: &Path,
    masks: &Path,
    out: &Path,
    jitter: Option<usize>,
    seed: u64,
    patch_edge: Option<usize>,
    cfg: &ConfigArgs,
) -> CmdResult {
    let mut run = load_config(cfg)?;
    if let Some(j) = jitter {
        run.sampling.jitter = j;
    }
    if let Some(e) = patch_edge {
        run.sampling.patch_edge = e;
    }
    run.sampling.validate()?;
    let files = PairedFiles::discover(volumes, masks)?;
    let mut plans = Vec::with_capacity(files.pairs.len());
    for (i, id) in files.pairs.keys().enumerate() {
        let (v, m) = files.load(id)?;
        let plan = plan_samples(&v, &m, &run.sampling, derive_seed(seed, i as u64))?;
        info!("{id}: {} positive, {} negative", plan.positives.len(), plan.negatives.len());
        plans.push(plan);
    }
    let out = ctx.out(out);
    let manifest = build_cache(&plans, &files, &out, run.sampling.patch_edge, ctx.exec)?;
    let mut by_source: BTreeMap<NegativeSource, usize> = BTreeMap::new();
    for p in &plans {
        for (k, n) in p.source_counts() {
            *by_source.entry(k).or_default() += n;
        }
    }
    let count = |s| by_source.get(&s).copied().unwrap_or(0);
    println!(
        "{} patches: {} positive, {} negative (spine {}, mirror {}, random {})",
        manifest.entries.len(),
        manifest.positives(),
        manifest.entries.len() - manifest.positives(),
        count(NegativeSource::Spine),
        count(NegativeSource::Mirror),
        count(NegativeSource::Random),
    );
    println!("manifest {} sha256 {}", out.join(ribcam::sampling::MANIFEST_FILE).display(), manifest.digest);
    Ok(())
}

pub fn train(ctx: &Context, cfg: &ConfigArgs, no_classifier: bool, repeats: usize) -> CmdResult {
    if repeats == 0 {
        return Err(invalid("--repeats must be >= 1"));
    }
    let mut run = load_config(cfg)?;
    if no_classifier {
        run.train.model.classifier_enabled = false;
    }
    let base_dir = ctx.out(&run.train.out_dir);
    for r in 0..repeats {
        let mut tc: TrainConfig = run.train.clone();
        if repeats > 1 {
            tc.seed = derive_seed(run.train.seed, r as u64);
            tc.out_dir = base_dir.join(format!("repeat-{r}"));
        } else {
            tc.out_dir = base_dir.clone();
        }
        fs::create_dir_all(&tc.out_dir)?;
        let record = RunConfig {
            train: tc.clone(),
            ..run.clone()
        };
        fs::write(tc.out_dir.join("config.toml"), record.to_toml()?)?;
        info!("run {r}: seed {} -> {}", tc.seed, tc.out_dir.display());
        let outcome = training::train(&tc, ctx.exec)?;
        println!(
            "run {r}: seed {} params {} best epoch {} val {:.6} -> {}",
            tc.seed,
            outcome.params.count(),
            outcome.best_epoch,
            outcome.best_val,
            outcome.best_checkpoint.display()
        );
    }
    Ok(())
}

fn load_any_volume(path: &Path, id: Option<&str>) -> Result<CtVolume, Failure> {
    let mut v = io::load_volume(path, VolumeFormat::from_path(path))?;
    if let Some(id) = id {
        v.id = id.to_string();
    } else if v.id.is_empty() {
        let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        v.id = io::strip_known_suffix(&name).to_string();
    }
    Ok(v)
}

pub fn infer(
    ctx: &Context,
    checkpoint: &Path,
    volume: &Path,
    stride: Option<usize>,
    out: &Path,
    cfg: &ConfigArgs,
) -> CmdResult {
    let run = load_config(cfg)?;
    let stride = stride.unwrap_or(run.infer.stride);
    if stride == 0 {
        return Err(invalid("--stride must be >= 1"));
    }
    let (params, meta) = load_checkpoint(checkpoint)?;
    info!(
        "checkpoint {}: {} parameters, epoch {:?}",
        checkpoint.display(),
        params.count(),
        meta.epoch
    );
    let jobs: Vec<(PathBuf, Option<String>, PathBuf)> = if volume.is_dir() {
        let dir = ctx.out(out);
        io::discover(volume, io::VOLUME_SUFFIXES)?
            .into_iter()
            .map(|(id, p)| {
                let target = dir.join(format!("{id}.prob.raw"));
                (p, Some(id), target)
            })
            .collect()
    } else {
        vec![(volume.to_path_buf(), None, ctx.out(out))]
    };
    if jobs.is_empty() {
        return Err(invalid(format!("no volumes found in {}", volume.display())));
    }
    for (path, id, target) in jobs {
        let v = load_any_volume(&path, id.as_deref())?;
        let pred = predict_volume(&params, &v, stride, ctx.exec)?;
        if let Some(dir) = target.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        io::save_prediction(&v.id, v.shape, &pred.probs, &target)?;
        info!("{}: {} windows at stride {stride}", v.id, pred.windows);
        println!("{}: {} windows -> {}", v.id, pred.windows, target.display());
    }
    Ok(())
}

/// Evaluation document written by `eval`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalDocument {
    pub report: EvaluationReport,
    pub froc: FrocResult,
    pub per_volume: Vec<VolumeResult>,
    pub postprocess: PostprocessConfig,
    pub hit_rule: HitRule,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VolumeResult {
    pub id: String,
    pub dsc: f64,
    pub proposals: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepDocument {
    pub hit_rule: HitRule,
    pub cells: Vec<SweepCell>,
}

fn load_cases(pred: &Path, gt: &Path, volumes: &Path) -> Result<(Vec<String>, Vec<EvalCase>), Failure> {
    let preds = io::discover(pred, io::PREDICTION_SUFFIXES)?;
    let masks = io::discover(gt, io::MASK_SUFFIXES)?;
    let vols = io::discover(volumes, io::VOLUME_SUFFIXES)?;
    if preds.is_empty() {
        return Err(invalid(format!("no predictions found in {}", pred.display())));
    }
    for id in preds.keys() {
        if !masks.contains_key(id) {
            return Err(invalid(format!("prediction {id} has no ground-truth mask")));
        }
        if !vols.contains_key(id) {
            return Err(invalid(format!("prediction {id} has no volume")));
        }
    }
    if let Some(id) = masks.keys().find(|k| !preds.contains_key(*k)) {
        return Err(invalid(format!("ground-truth mask {id} has no prediction")));
    }
    let mut ids = Vec::new();
    let mut cases = Vec::new();
    for (id, p) in &preds {
        let v = load_any_volume(&vols[id], Some(id))?;
        let m = io::load_mask(&masks[id], v.shape)?;
        let (_, shape, probs) = io::load_prediction(p)?;
        if shape != v.shape {
            return Err(invalid(format!("prediction {id} has shape {:?}, volume {:?}", shape.0, v.shape.0)));
        }
        cases.push(EvalCase::new(v, m, probs)?);
        ids.push(id.clone());
    }
    Ok((ids, cases))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), Failure> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut text = serde_json::to_string_pretty(value).context("serializing")?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn write_proposals(path: &Path, proposals: &[Vec<DetectionProposal>]) -> Result<(), Failure> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    for p in proposals.iter().flatten() {
        serde_json::to_writer(&mut f, p).context("serializing proposal")?;
        writeln!(f)?;
    }
    f.flush()?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn eval(
    ctx: &Context,
    pred: &Path,
    gt: &Path,
    volumes: &Path,
    prob_th: Option<f64>,
    size_th: Option<usize>,
    do_sweep: bool,
    out: Option<&Path>,
    cfg: &ConfigArgs,
) -> CmdResult {
    let mut run = load_config(cfg)?;
    if let Some(p) = prob_th {
        run.postprocess.prob_threshold = p;
    }
    if let Some(s) = size_th {
        run.postprocess.size_threshold = s;
    }
    run.postprocess.validate()?;
    let (ids, cases) = load_cases(pred, gt, volumes)?;
    let rule = run.eval.hit_rule;

    if do_sweep {
        let cells = sweep(
            &cases,
            &run.postprocess,
            &SWEEP_PROB_THRESHOLDS,
            &SWEEP_SIZE_THRESHOLDS,
            rule,
            ctx.exec,
        )?;
        println!("prob  size  proposals  dsc      froc@0.5 froc@1  froc@2  froc@4  froc@8  froc_avg");
        for c in &cells {
            let r = &c.report;
            println!(
                "{:<5} {:<5} {:<10} {:.4}   {:.4}   {:.4}  {:.4}  {:.4}  {:.4}  {:.4}",
                c.prob_threshold, c.size_threshold, c.proposals, r.dsc_mean, r.froc_0_5, r.froc_1, r.froc_2, r.froc_4, r.froc_8, r.froc_avg
            );
        }
        if let Some(o) = out {
            write_json(&ctx.out(o), &SweepDocument { hit_rule: rule, cells })?;
        }
        return Ok(());
    }

    let ev = evaluate(&cases, &run.postprocess, rule, ctx.exec)?;
    print!("{}", ev.report.to_table());
    if let Some(o) = out {
        let o = ctx.out(o);
        let doc = EvalDocument {
            report: ev.report.clone(),
            froc: ev.froc.clone(),
            per_volume: ids
                .iter()
                .zip(&ev.dsc)
                .zip(&ev.proposals)
                .map(|((id, &dsc), p)| VolumeResult {
                    id: id.clone(),
                    dsc,
                    proposals: p.len(),
                })
                .collect(),
            postprocess: run.postprocess,
            hit_rule: rule,
        };
        write_json(&o, &doc)?;
        write_proposals(&o.with_extension("proposals.jsonl"), &ev.proposals)?;
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn phantom(
    ctx: &Context,
    out: &Path,
    count: usize,
    size: usize,
    fractures: usize,
    ribs: usize,
    min_fracture: usize,
    seed: u64,
    format: Format,
) -> CmdResult {
    let out = ctx.out(out);
    let (vdir, mdir) = (out.join("volumes"), out.join("masks"));
    fs::create_dir_all(&vdir)?;
    fs::create_dir_all(&mdir)?;
    for i in 0..count {
        let spec = PhantomSpec {
            shape: Shape3::cube(size),
            n_ribs: ribs,
            n_fractures: fractures,
            fracture_size_range: (min_fracture, min_fracture.max(2000)),
            seed: derive_seed(seed, i as u64),
            ..PhantomSpec::default()
        };
        let id = format!("phantom{i:03}");
        let (mut v, m) = generate(&spec)?;
        v.id = id.clone();
        let (vp, mp) = match format {
            Format::Raw => (vdir.join(format!("{id}.img.raw")), mdir.join(format!("{id}.msk.raw"))),
            Format::Nifti => (
                vdir.join(format!("{id}-image.nii.gz")),
                mdir.join(format!("{id}-label.nii.gz")),
            ),
        };
        let vf = match format {
            Format::Raw => VolumeFormat::Raw,
            Format::Nifti => VolumeFormat::Nifti,
        };
        io::save_volume(&v, &vp, vf)?;
        io::save_mask(&m, &id, &mp)?;
        println!("{id}: {} fractures, sizes {:?}", m.instance_count(), m.instance_sizes());
    }
    Ok(())
}

fn need<'a>(v: &'a Option<PathBuf>, flag: &str, kind: &str) -> Result<&'a Path, Failure> {
    v.as_deref().ok_or_else(|| invalid(format!("--kind {kind} needs --{flag}")))
}

pub fn plot(ctx: &Context, args: &PlotArgs) -> CmdResult {
    let out = ctx.out(&args.out);
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    match args.kind {
        PlotKind::Froc => {
            let path = need(&args.eval, "eval", "froc")?;
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let doc: EvalDocument = serde_json::from_str(&text)
                .map_err(|e| invalid(format!("{} is not an evaluation document: {e}", path.display())))?;
            plot::froc_svg(&doc.froc, &out)?;
        }
        PlotKind::Overlay => {
            let v = load_any_volume(need(&args.volume, "volume", "overlay")?, None)?;
            let gt = match &args.mask {
                Some(p) => Some(io::load_mask(p, v.shape)?.binary()),
                None => None,
            };
            let pred = match &args.pred {
                Some(p) => Some(io::load_prediction(p)?.2),
                None => None,
            };
            let z = args.slice.unwrap_or(v.shape.d() / 2);
            let img = plot::overlay(&v, gt.as_deref(), pred.as_deref(), args.threshold, z).map_err(Failure::Validation)?;
            plot::save_png(&img, &out)?;
        }
        PlotKind::Cam => {
            let (params, _) = load_checkpoint(need(&args.checkpoint, "checkpoint", "cam")?)?;
            let v = load_any_volume(need(&args.volume, "volume", "cam")?, None)?;
            let e = params.config.patch_edge;
            let c = match &args.center {
                Some(c) => [c[0], c[1], c[2]],
                None => [v.shape.w() / 2, v.shape.h() / 2, v.shape.d() / 2],
            };
            if !v.shape.contains(c.map(|x| x as i64)) {
                return Err(invalid(format!("centre {c:?} outside volume {:?}", v.shape.0)));
            }
            let window = Window {
                start: c.map(|x| x.saturating_sub(e / 2)),
                edge: e,
            };
            let patch = crop_normalized(&v, &window);
            let fwd = params.forward(&patch)?;
            let cam = fwd
                .activation_map
                .ok_or_else(|| invalid("checkpoint has no classifier, so there is no activation map"))?;
            let full = plot::upsample_trilinear(&cam, params.config.bottleneck_edge(), e)?;
            let z = args.slice.unwrap_or(e / 2);
            let img = plot::cam_overlay(&patch.data, &full, e, z).map_err(Failure::Validation)?;
            plot::save_png(&img, &out)?;
        }
    }
    println!("wrote {}", out.display());
    Ok(())
}
