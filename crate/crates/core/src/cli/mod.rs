//! Command-line front end: run configuration, checkpoints, and the five commands.
//!
//! All commands read the same flat config file (see [`config`]) and write into its output
//! directory. Set `REWARDGEN_OUT_ROOT` to place relative output directories under another
//! root.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod plot;

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::error::{Error, Result};
use crate::generator::EtaPolicy;
pub use checkpoint::Checkpoint;
pub use commands::{cmd_eval, cmd_oracle, cmd_pretrain, cmd_sample, cmd_train, Manifest, Outcome};
pub use config::RunConfig;

/// Environment variable that relocates relative output directories.
pub const OUT_ROOT_ENV: &str = "REWARDGEN_OUT_ROOT";

#[derive(Debug, Parser)]
#[command(name = "rewardgen", version, about = "Reward-maximizing few-step generators on toy data")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone, Default)]
pub struct Common {
    /// Run configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides `seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides `out`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the denoisers used as initialization and guidance.
    Pretrain(#[command(flatten)] Common),
    /// Fine-tune the pretrained generator on the configured rewards.
    Train(#[command(flatten)] Common),
    /// Draw samples from a checkpoint.
    Sample {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        count: Option<usize>,
        /// `random` or a value in [0, 1].
        #[arg(long)]
        eta: Option<EtaPolicy>,
        /// Also write every intermediate state.
        #[arg(long)]
        trajectory: bool,
    },
    /// Score a samples file against the rewards and the grid oracle.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        samples: Option<PathBuf>,
    },
    /// Locate the maximizer of the combined reward by grid search.
    Oracle(#[command(flatten)] Common),
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Pretrain(c) | Command::Train(c) | Command::Oracle(c) => c,
            Command::Sample { common, .. } | Command::Eval { common, .. } => common,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Command::Pretrain(_) => "pretrain",
            Command::Train(_) => "train",
            Command::Sample { .. } => "sample",
            Command::Eval { .. } => "eval",
            Command::Oracle(_) => "oracle",
        }
    }
}

/// Loads the config, applies overrides and resolves every path.
pub fn prepare(command: &Command, out_root: Option<&Path>) -> Result<RunConfig> {
    let common = command.common();
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None if matches!(command, Command::Sample { .. }) => RunConfig::parse("")?,
        None => return Err(Error::config(None, format!("`{}` needs --config", command.name()))),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(o) = &common.out {
        cfg.out = o.clone();
    }
    if let Some(root) = out_root {
        if cfg.out.is_relative() {
            cfg.out = root.join(&cfg.out);
        }
    }
    cfg.train.init = cfg.resolve(&cfg.train.init);
    cfg.train.psi = cfg.resolve(&cfg.train.psi);
    cfg.train.smooth = cfg.resolve(&cfg.train.smooth);
    cfg.sample.checkpoint = cfg.resolve(&cfg.sample.checkpoint);
    cfg.eval.samples = cfg.resolve(&cfg.eval.samples);
    match command {
        Command::Sample {
            checkpoint,
            count,
            eta,
            trajectory,
            ..
        } => {
            if let Some(c) = checkpoint {
                cfg.sample.checkpoint = c.clone();
            }
            if let Some(n) = count {
                cfg.sample.count = *n;
            }
            if let Some(e) = eta {
                cfg.sample.eta = *e;
            }
            cfg.sample.trajectory |= *trajectory;
        }
        Command::Eval { samples: Some(s), .. } => cfg.eval.samples = s.clone(),
        _ => {}
    }
    Ok(cfg)
}

/// Runs one command.
pub fn run(command: &Command, out_root: Option<&Path>) -> Result<Outcome> {
    let cfg = prepare(command, out_root)?;
    match command {
        Command::Pretrain(_) => cmd_pretrain(&cfg),
        Command::Train(_) => cmd_train(&cfg),
        Command::Sample { .. } => cmd_sample(&cfg),
        Command::Eval { .. } => cmd_eval(&cfg),
        Command::Oracle(_) => cmd_oracle(&cfg),
    }
}

/// Writes `bytes` to a sibling temp file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    std::fs::write(&tmp, bytes).map_err(|e| Error::file(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::file(path, e))
}
