//! `deformsplat` command-line driver.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use deformsplat::sceneio::{CHECKPOINT_VERSION, DATASET_LAYOUT_VERSION};

use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(name = "deformsplat", about = "Deformable 2D Gaussian splatting reconstruction")]
struct Cli {
    /// Seed for every random choice; overrides the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker thread cap. Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// TOML or JSON configuration file; flags take precedence over it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset with exact ground truth.
    Synth(SynthArgs),
    /// Fit a deformable splat scene to a dataset.
    Train(TrainArgs),
    /// Render a checkpoint at dataset cameras.
    Render(RenderArgs),
    /// Compare a predicted sequence with ground truth.
    Eval(EvalArgs),
    /// Inpaint masked regions of a clip with the latent diffusion simulator.
    InpaintSim(InpaintArgs),
    /// Compare analytic and finite-difference gradients.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// Scene specification (TOML or JSON).
    #[arg(long)]
    spec: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint path.
    #[arg(long)]
    out: PathBuf,
    /// Training log path; defaults to the checkpoint path with `.log.jsonl`.
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long)]
    iters: Option<usize>,
    /// Initial position learning rate, relative to the scene extent.
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    w_init: Option<f64>,
    #[arg(long)]
    w_final: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    /// Basis functions per deformation bank; 0 trains a static scene.
    #[arg(long)]
    basis: Option<usize>,
}

#[derive(Debug, Args)]
struct RenderArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Dataset providing cameras and timestamps.
    #[arg(long)]
    data: PathBuf,
    /// A time in [0, 1] or `all` for every dataset frame.
    #[arg(long, default_value = "all")]
    t: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    /// Directory with `mask_%05d.png` files enabling the region split.
    #[arg(long)]
    masked: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct InpaintArgs {
    /// Clip directory with RGB and mask PNGs.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Strided DDIM steps.
    #[arg(long)]
    steps: Option<usize>,
    /// Predictor training iterations on the clip itself.
    #[arg(long)]
    train_iters: Option<usize>,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    #[arg(long)]
    splats: Option<usize>,
    #[arg(long)]
    res: Option<usize>,
    #[arg(long)]
    basis: Option<usize>,
    /// Check the static pipeline only.
    #[arg(long)]
    no_deform: bool,
    #[arg(long, hide = true)]
    inject_gradient_fault: bool,
}

fn version() -> String {
    format!(
        "{} (checkpoint format {CHECKPOINT_VERSION}, dataset layout {DATASET_LAYOUT_VERSION})",
        env!("CARGO_PKG_VERSION")
    )
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Usage("--threads must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(format!("thread pool: {e}")))?;
    }
    let file = config::FileConfig::load(cli.config.as_deref())?;
    let seed = cli.seed.or(file.seed);
    match cli.command {
        Command::Synth(a) => commands::synth(&a.spec, &a.out, seed),
        Command::Train(a) => {
            let mut cfg = file.train.clone();
            if let Some(s) = seed {
                cfg.seed = s;
            }
            config::override_train(&mut cfg, &a);
            commands::train(&a.data, &a.out, a.log.as_deref(), cfg)
        }
        Command::Render(a) => commands::render(&a.ckpt, &a.data, &a.t, &a.out),
        Command::Eval(a) => commands::eval(&a.pred, &a.gt, a.masked.as_deref(), &a.out),
        Command::InpaintSim(a) => {
            let mut cfg = file.inpaint.clone();
            if let Some(s) = seed {
                cfg.seed = s;
            }
            cfg.steps = a.steps.unwrap_or(cfg.steps);
            cfg.train_iters = a.train_iters.unwrap_or(cfg.train_iters);
            commands::inpaint_sim(&a.data, &a.out, &cfg)
        }
        Command::Gradcheck(a) => {
            let mut cfg = file.gradcheck.clone();
            if let Some(s) = seed {
                cfg.seed = s;
            }
            cfg.splats = a.splats.unwrap_or(cfg.splats);
            cfg.res = a.res.unwrap_or(cfg.res);
            cfg.basis = a.basis.unwrap_or(cfg.basis);
            cfg.deform &= !a.no_deform;
            commands::gradcheck(&cfg, a.inject_gradient_fault)
        }
    }
}

fn main() -> ExitCode {
    let matches = Cli::command().version(version()).get_matches();
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
