use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gaze_core::GazeError;

mod commands;
mod config;

use commands::{Ctx, ModelKind, RunLock, SplitArg};

#[derive(Parser, Debug)]
#[command(name = "gaze", version, about = "Anchor-state gaze estimation from frames and events")]
struct Cli {
    /// TOML run configuration layered over a profile.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Base profile: desk, compact or paper.
    #[arg(long, global = true)]
    profile: Option<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    manifest: Option<PathBuf>,
    /// Repeat for more log output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Render the synthetic dataset and write its manifest.
    GenerateData {
        #[arg(long)]
        grid: Option<usize>,
        #[arg(long)]
        repeats: Option<usize>,
        /// Output directory; defaults to the manifest's directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one regional expert, or all of them.
    TrainExpert {
        #[arg(long)]
        region: Option<usize>,
    },
    TrainSelector,
    /// Fit latent statistics and train the latent denoiser.
    TrainDenoiser,
    /// Distill the experts into the full-grid student.
    Distill(DistillArgs),
    /// Single-anchor full-grid reference model.
    TrainBaseline,
    FinetuneContinuous {
        /// Also update the student trunk.
        #[arg(long)]
        unfreeze: bool,
    },
    Evaluate {
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        #[arg(long, value_enum, default_value = "student")]
        model: ModelKind,
        #[arg(long)]
        continuous: bool,
    },
    /// Predict gaze for one frame and event file.
    Infer {
        #[arg(long)]
        frame: PathBuf,
        #[arg(long)]
        events: PathBuf,
        #[arg(long, requires = "t1")]
        t0: Option<u64>,
        #[arg(long, requires = "t0")]
        t1: Option<u64>,
        #[arg(long)]
        continuous: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Statistical checks of the reverse-process posterior.
    DiffusionVerify {
        #[arg(long, default_value_t = 200_000)]
        samples: usize,
    },
    /// Write the student's attention over the current frame as a PGM image.
    AttentionMap {
        #[arg(long, conflicts_with_all = ["frame", "events"])]
        sample: Option<usize>,
        #[arg(long, requires = "events")]
        frame: Option<PathBuf>,
        #[arg(long, requires = "frame")]
        events: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the effective configuration as TOML.
    Config,
}

#[derive(Args, Debug)]
struct DistillArgs {
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    /// Draw new reconstructions every step instead of a fixed pool.
    #[arg(long)]
    fresh_noise: bool,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<GazeError>() {
        Some(GazeError::Config(_)) | Some(GazeError::Validation(_)) => 2,
        Some(GazeError::MissingArtifact(_)) => 3,
        Some(GazeError::NumericFailure { .. }) => 4,
        _ => 1,
    }
}

fn run(cli: Cli) -> anyhow::Result<u8> {
    let mut cfg = config::load(cli.config.as_deref(), cli.profile.as_deref())?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(d) = cli.output_dir {
        cfg.output_dir = d;
    }
    if let Some(m) = cli.manifest {
        cfg.data.manifest = m;
    }
    match &cli.cmd {
        Cmd::GenerateData { grid, repeats, .. } => {
            if let Some(g) = grid {
                cfg.data.grid = *g;
                cfg.transformer.classes = g * g;
            }
            if let Some(r) = repeats {
                cfg.data.repeats = *r;
            }
        }
        Cmd::Distill(a) => {
            let d = &mut cfg.distill;
            d.lambda = a.lambda.unwrap_or(d.lambda);
            d.samples = a.samples.unwrap_or(d.samples);
            d.alpha = a.alpha.unwrap_or(d.alpha);
            d.beta = a.beta.unwrap_or(d.beta);
            if a.fresh_noise {
                d.bank_size = None;
            }
        }
        _ => {}
    }
    cfg.validate()?;
    let ctx = Ctx::new(cfg);
    if let Cmd::Config = cli.cmd {
        print!("{}", config::render(&ctx.cfg)?);
        return Ok(0);
    }
    let _lock = RunLock::acquire(&ctx.layout)?;
    match cli.cmd {
        Cmd::GenerateData { out, .. } => commands::generate_data(&ctx, out)?,
        Cmd::TrainExpert { region } => commands::train_expert(&ctx, region)?,
        Cmd::TrainSelector => commands::train_selector(&ctx)?,
        Cmd::TrainDenoiser => commands::train_denoiser(&ctx)?,
        Cmd::Distill(_) => commands::distill(&ctx, &ctx.cfg.distill)?,
        Cmd::TrainBaseline => commands::train_baseline(&ctx)?,
        Cmd::FinetuneContinuous { unfreeze } => commands::finetune_continuous(&ctx, unfreeze)?,
        Cmd::Evaluate {
            split,
            model,
            continuous,
        } => commands::evaluate_cmd(&ctx, model, split, continuous)?,
        Cmd::Infer {
            frame,
            events,
            t0,
            t1,
            continuous,
            out,
        } => {
            let window = t0.zip(t1).map(|(a, b)| [a, b]);
            commands::infer(&ctx, &frame, &events, window, continuous, out.as_deref())?
        }
        Cmd::DiffusionVerify { samples } => {
            if !commands::diffusion_verify(&ctx, samples)? {
                eprintln!("error: diffusion verification failed");
                return Ok(4);
            }
        }
        Cmd::AttentionMap {
            sample,
            frame,
            events,
            out,
        } => commands::attention_map(&ctx, sample, frame.zip(events), &out)?,
        Cmd::Config => unreachable!(),
    }
    Ok(0)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp_millis()
        .init();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
