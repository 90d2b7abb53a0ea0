//! The `trajforge` command line: config-driven pipeline stages that read and
//! write a single run directory.

pub mod commands;
pub mod config;
pub mod error;
pub mod manifest;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use crate::commands::Run;
use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::manifest::Manifest;

#[derive(Debug, Parser)]
#[command(name = "trajforge", version, about = "Trajectory generation pipeline")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Run configuration (JSON).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true, env = "TRAJFORGE_SEED")]
    pub seed: Option<u64>,
    /// Run directory; overrides the config `out`.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads for the data-parallel kernels.
    #[arg(long, global = true, env = "TRAJFORGE_THREADS")]
    pub threads: Option<usize>,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Sample a dataset from the synthetic oracle.
    Synth,
    /// Map GPS fixes onto the grid.
    Ingest,
    /// Behavioural-clone the policy.
    Pretrain {
        /// Continue from the run's policy checkpoint.
        #[arg(long)]
        resume: bool,
    },
    /// Fit the critic by inverse RL.
    Reward,
    /// Fine-tune the policy against the critic's rewards.
    Finetune,
    /// Roll out the policy from held-out contexts.
    Generate {
        /// Checkpoint file in the run directory (default: newest policy).
        #[arg(long)]
        checkpoint: Option<String>,
        /// Number of trajectories (default: eval.trajectories).
        #[arg(long)]
        n: Option<usize>,
    },
    /// Compare a generated corpus with a reference corpus.
    Eval {
        #[arg(long)]
        generated: Option<PathBuf>,
        #[arg(long)]
        reference: Option<PathBuf>,
    },
    /// Attention profile, token combinations and user projection.
    Analyze {
        #[arg(long)]
        checkpoint: Option<String>,
    },
    /// Per-trajectory generation latency.
    Bench {
        #[arg(long)]
        checkpoint: Option<String>,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Synth => "synth",
            Command::Ingest => "ingest",
            Command::Pretrain { .. } => "pretrain",
            Command::Reward => "reward",
            Command::Finetune => "finetune",
            Command::Generate { .. } => "generate",
            Command::Eval { .. } => "eval",
            Command::Analyze { .. } => "analyze",
            Command::Bench { .. } => "bench",
        }
    }
}

pub fn run(cli: &Cli) -> Result<Manifest> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Usage(
                "TRAJFORGE_THREADS must be at least 1".into(),
            ));
        }
        if !trajforge::par::init_threads(n) {
            log::warn!("thread pool already initialised; ignoring {n} threads");
        }
    }
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| CliError::Usage("--config is required".into()))?;
    let mut cfg = RunConfig::load(path)?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let out = cli.out.clone().or_else(|| cfg.out.clone()).ok_or_else(|| {
        CliError::Usage("no run directory: pass --out or set `out` in the config".into())
    })?;
    let seed = cfg.seed;
    let r = Run::new(cli.command.name(), cfg, out, seed)?;
    match &cli.command {
        Command::Synth => commands::synth(r),
        Command::Ingest => commands::ingest(r),
        Command::Pretrain { resume } => commands::pretrain_cmd(r, *resume),
        Command::Reward => commands::reward(r),
        Command::Finetune => commands::finetune_cmd(r),
        Command::Generate { checkpoint, n } => commands::generate_cmd(r, checkpoint.as_deref(), *n),
        Command::Eval {
            generated,
            reference,
        } => commands::eval_cmd(r, generated.as_deref(), reference.as_deref()),
        Command::Analyze { checkpoint } => commands::analyze(r, checkpoint.as_deref()),
        Command::Bench { checkpoint } => commands::bench(r, checkpoint.as_deref()),
    }
}
