//! `ribcam`: prepare patch caches, train, infer, evaluate, generate
//! phantoms and draw figures.
//!
//! Exit status is 0 on success, 1 when the inputs or configuration are
//! invalid, and 2 when a run fails for any other reason.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;
mod config;
mod plot;

/// Command failure, split by who has to fix it.
#[derive(Debug)]
pub enum Failure {
    Validation(anyhow::Error),
    Runtime(anyhow::Error),
}

impl From<ribcam::Error> for Failure {
    fn from(e: ribcam::Error) -> Self {
        if e.is_validation() {
            Failure::Validation(e.into())
        } else {
            Failure::Runtime(e.into())
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        match e.downcast::<ribcam::Error>() {
            Ok(r) => r.into(),
            Err(e) => Failure::Runtime(e),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

#[derive(Parser, Debug)]
#[command(name = "ribcam", version, about = "CAM-gated 3D UNet rib fracture segmentation")]
struct Cli {
    /// Directory that relative output paths are placed under.
    #[arg(long, global = true, env = config::OUTPUT_ROOT_ENV)]
    output_root: Option<PathBuf>,

    /// Run loops sequentially instead of on the thread pool.
    #[arg(long, global = true)]
    sequential: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct ConfigArgs {
    /// TOML run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one config key, e.g. `--set train.epochs=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Sample patches from paired volumes and masks into a cache.
    Prepare {
        #[arg(long)]
        volumes: PathBuf,
        #[arg(long)]
        masks: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Positive-centroid jitter in voxels (overrides sampling.jitter).
        #[arg(long)]
        jitter: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Patch edge in voxels (overrides sampling.patch_edge).
        #[arg(long)]
        patch_edge: Option<usize>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train the network from a cache manifest.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Drop the bottleneck classifier and its loss term.
        #[arg(long)]
        no_classifier: bool,
        /// Independent runs with derived seeds.
        #[arg(long, default_value_t = 1)]
        repeats: usize,
    },
    /// Predict a probability field for one volume or every volume in a directory.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        volume: PathBuf,
        /// Window stride (overrides infer.stride).
        #[arg(long)]
        stride: Option<usize>,
        /// Output file, or directory when `--volume` is a directory.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Postprocess predictions and score them against ground truth.
    Eval {
        /// Directory of probability fields.
        #[arg(long)]
        pred: PathBuf,
        /// Directory of ground-truth masks.
        #[arg(long)]
        gt: PathBuf,
        /// Directory of CT volumes for the bone and spine filters.
        #[arg(long)]
        volumes: PathBuf,
        /// Probability threshold (overrides postprocess.prob_threshold).
        #[arg(long = "prob-th")]
        prob_th: Option<f64>,
        /// Component size threshold in voxels (overrides postprocess.size_threshold).
        #[arg(long = "size-th")]
        size_th: Option<usize>,
        /// Evaluate the 3×4 probability/size threshold grid.
        #[arg(long)]
        sweep: bool,
        /// Evaluation document (JSON).
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Write synthetic phantom volumes and masks.
    Phantom {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        count: usize,
        #[arg(long, default_value_t = 192)]
        size: usize,
        #[arg(long, default_value_t = 2)]
        fractures: usize,
        #[arg(long, default_value_t = 8)]
        ribs: usize,
        /// Smallest fracture component in voxels.
        #[arg(long, default_value_t = 300)]
        min_fracture: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = Format::Raw)]
        format: Format,
    },
    /// Draw a FROC curve, a slice overlay or a CAM heat map.
    Plot(PlotArgs),
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Raw,
    Nifti,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlotKind {
    Froc,
    Overlay,
    Cam,
}

#[derive(Args, Debug)]
pub struct PlotArgs {
    #[arg(long, value_enum)]
    pub kind: PlotKind,
    #[arg(long)]
    pub out: PathBuf,
    /// Evaluation document, for `froc`.
    #[arg(long)]
    pub eval: Option<PathBuf>,
    /// CT volume, for `overlay` and `cam`.
    #[arg(long)]
    pub volume: Option<PathBuf>,
    /// Ground-truth mask, for `overlay`.
    #[arg(long)]
    pub mask: Option<PathBuf>,
    /// Probability field, for `overlay`.
    #[arg(long)]
    pub pred: Option<PathBuf>,
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f32,
    /// Axial slice; the volume (or patch) centre when omitted.
    #[arg(long)]
    pub slice: Option<usize>,
    /// Checkpoint, for `cam`.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Patch centre `x,y,z`, for `cam`; the volume centre when omitted.
    #[arg(long, value_delimiter = ',', num_args = 3)]
    pub center: Option<Vec<usize>>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let ctx = commands::Context {
        output_root: cli.output_root.clone(),
        exec: if cli.sequential {
            ribcam::Exec::Sequential
        } else {
            ribcam::Exec::default()
        },
    };
    let result = match cli.command {
        Command::Prepare {
            volumes,
            masks,
            out,
            jitter,
            seed,
            patch_edge,
            cfg,
        } => commands::prepare(&ctx, &volumes, &masks, &out, jitter, seed, patch_edge, &cfg),
        Command::Train {
            cfg,
            no_classifier,
            repeats,
        } => commands::train(&ctx, &cfg, no_classifier, repeats),
        Command::Infer {
            checkpoint,
            volume,
            stride,
            out,
            cfg,
        } => commands::infer(&ctx, &checkpoint, &volume, stride, &out, &cfg),
        Command::Eval {
            pred,
            gt,
            volumes,
            prob_th,
            size_th,
            sweep,
            out,
            cfg,
        } => commands::eval(&ctx, &pred, &gt, &volumes, prob_th, size_th, sweep, out.as_deref(), &cfg),
        Command::Phantom {
            out,
            count,
            size,
            fractures,
            ribs,
            min_fracture,
            seed,
            format,
        } => commands::phantom(&ctx, &out, count, size, fractures, ribs, min_fracture, seed, format),
        Command::Plot(args) => commands::plot(&ctx, &args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Validation(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
