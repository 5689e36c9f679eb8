use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

mod commands;
mod config;

use config::Profile;

/// Semi-supervised few-shot detection experiments.
#[derive(Debug, Parser)]
#[command(name = "ledet", version)]
struct Cli {
    /// Built-in profile the config is overlaid on (default: the file's `profile`, else desk).
    #[arg(long, global = true, value_enum)]
    profile: Option<Profile>,
    /// TOML config file.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// `key.path=value` override, applied after the file; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Experiment seed (overrides `seed`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render the synthetic train/test datasets.
    Synth,
    /// Sample the labeled fraction and the few-shot instances.
    Split,
    /// Semi-supervised base pre-training.
    Pretrain {
        /// Retrain even if a checkpoint from a different config exists.
        #[arg(long)]
        force: bool,
    },
    /// Novel-head training and the balanced fine-tune.
    Finetune {
        #[arg(long)]
        force: bool,
    },
    /// Base/novel report for stage checkpoints, or for one given checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Dump test-set proposals as JSON lines.
    Proposals {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Plot loss logs and reports.
    Plot,
    /// Print the resolved config.
    Config,
}

fn run(cli: Cli) -> Result<()> {
    let text = match &cli.config {
        Some(p) => Some(std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?),
        None => None,
    };
    let mut set = cli.set.clone();
    if let Some(seed) = cli.seed {
        set.push(format!("seed={seed}"));
    }
    let cfg = config::resolve(cli.profile, text.as_deref(), &set)?;
    if let Command::Config = cli.command {
        print!("{}", cfg.to_toml()?);
        return Ok(());
    }
    let ctx = commands::Context::new(cfg)?;
    match cli.command {
        Command::Synth => ctx.synth(),
        Command::Split => ctx.split(),
        Command::Pretrain { force } => ctx.pretrain(force),
        Command::Finetune { force } => ctx.finetune(force),
        Command::Eval { checkpoint } => ctx.eval(checkpoint.as_deref()),
        Command::Proposals { checkpoint } => ctx.proposals(checkpoint.as_deref()),
        Command::Plot => ctx.plot(),
        Command::Config => unreachable!("handled above"),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
