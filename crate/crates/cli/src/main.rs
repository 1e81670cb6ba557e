use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use spanet_cli::commands::{cmd_eval, cmd_infer, cmd_params, cmd_synth, cmd_train};
use spanet_cli::config::{RunConfig, Stage};
use spanet_cli::error::CliError;

#[derive(Debug, Parser)]
#[command(name = "spanet", version, about = "Proposal-free nuclear instance segmentation")]
struct Cli {
    /// TOML file overriding the built-in defaults.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Overrides the `seed` key of the configuration.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,

    /// Replace the outputs of a previous run in `--out`.
    #[arg(long, global = true)]
    force: bool,

    /// Output directory.
    #[arg(long, global = true, value_name = "DIR", default_value = "out")]
    out: PathBuf,

    /// Worker threads for the data-parallel kernels.
    #[arg(long, env = "SPANET_NUM_WORKERS", global = true, hide = true)]
    num_workers: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate synthetic train and test tiles.
    Synth,
    /// Train the segmentation/detection network or the embedding network.
    Train {
        /// `segdet` or `instance`.
        #[arg(long)]
        stage: Stage,
        /// Dataset directory with `images/` and `masks/`.
        #[arg(long)]
        data: PathBuf,
        /// Trained segdet checkpoint; required by the instance stage.
        #[arg(long)]
        segdet: Option<PathBuf>,
    },
    /// Segment images with a trained pair of networks.
    Infer {
        #[arg(long)]
        segdet: PathBuf,
        #[arg(long)]
        instance: PathBuf,
        /// Image files or directories of PNGs.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
    /// Score predicted instance maps against ground truth.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
    },
    /// Print parameter counts of the configured networks.
    Params,
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if let Some(n) = cli.num_workers {
        spanet::exec::init_workers(n);
    }
    let cfg = RunConfig::load(cli.config.as_deref(), cli.seed).context("loading configuration")?;
    let out: &Path = &cli.out;
    match cli.command {
        Command::Synth => {
            let s = cmd_synth(&cfg, out, cli.force)?;
            println!("synth: {} train, {} test tiles in {}", s.train.len(), s.test.len(), out.display());
        }
        Command::Train { stage, data, segdet } => {
            let s = cmd_train(&cfg, stage, &data, segdet.as_deref(), out, cli.force)
                .with_context(|| format!("training the {} stage", stage.as_str()))?;
            let losses: Vec<String> = s.final_losses.iter().map(|(n, v)| format!("{n}={v:.6}")).collect();
            println!("train {}: {} epochs, {} snapshots, {}", s.stage, s.epochs, s.snapshots, losses.join(" "));
        }
        Command::Infer { segdet, instance, inputs } => {
            let s = cmd_infer(&cfg, &segdet, &instance, &inputs, out, cli.force)?;
            let total: usize = s.images.iter().map(|r| r.instances).sum();
            println!("infer: {} images, {} instances, written to {}", s.images.len(), total, out.display());
        }
        Command::Eval { pred, gt } => {
            let report = cmd_eval(&pred, &gt, Some(out))?;
            print!("{}", report.to_text());
        }
        Command::Params => {
            let p = cmd_params(&cfg)?;
            println!("instance {}", p.instance);
            println!("segdet {}", p.segdet);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e.downcast_ref::<CliError>().map_or(1, CliError::exit_code);
            ExitCode::from(code as u8)
        }
    }
}
