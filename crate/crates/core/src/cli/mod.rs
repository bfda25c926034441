//! Command-line front end.
//!
//! Every subcommand writes its files atomically and exits non-zero on any
//! error, so a failed run never leaves partial outputs behind.

mod config;

pub use config::RunConfig;

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::attention::{build_mask, SegmentLayout};
use crate::env::{reset, EnvMode, ACTION_DIM};
use crate::error::{Error, Result};
use crate::flow::{sample_block_sde, write_trace, NoiseSchedule};
use crate::numcore::{
    load_checkpoint, save_checkpoint, write_atomic, ParamVector, RngStream, VelocityNet,
};
use crate::policy_opt::Surrogate;
use crate::trainer::{
    evaluate, generate_demos, metrics_csv, pretrain_cfm, train_rl, STREAM_INIT, STREAM_TRACE,
};

pub const THREADS_ENV: &str = "FLOWGSPO_THREADS";

#[derive(Debug, Parser)]
#[command(
    name = "flowgspo",
    version,
    about = "Stochastic flow policies trained with block-level GSPO"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Flat key=value configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the configured root seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModeArg {
    Standard,
    Shifted,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum AlgoArg {
    FlowGspo,
    Grpo,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Behavior cloning on scripted demonstrations.
    Pretrain {
        #[command(flatten)]
        common: Common,
        /// Output directory for `sft.ckpt` and `pretrain_metrics.csv`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Online RL fine-tuning from a checkpoint.
    Rl {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "flow-gspo")]
        algo: AlgoArg,
        /// Output directory for `metrics.csv` and checkpoints.
        #[arg(long)]
        out: PathBuf,
    },
    /// Success rate of the deterministic sampler.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Overrides `eval_episodes`.
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Per-step trace of one stochastic denoising chain from a reset state.
    Trace {
        #[command(flatten)]
        common: Common,
        /// Randomly initialized network when omitted.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Writes to this file instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Prints the block-wise causal attention mask as a grid.
    MaskDemo {
        #[arg(long, default_value_t = 2)]
        spatial: usize,
        #[arg(long, default_value_t = 2)]
        semantic: usize,
        #[arg(long, default_value_t = 2)]
        action: usize,
        #[arg(long, default_value_t = 1)]
        chunk: usize,
    },
}

fn threads_from_env() -> Result<usize> {
    match std::env::var(THREADS_ENV) {
        Ok(v) if !v.trim().is_empty() => v.trim().parse().map_err(|_| {
            Error::InvalidInput(format!(
                "{THREADS_ENV} must be a non-negative integer, got `{v}`"
            ))
        }),
        _ => Ok(0),
    }
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.train.seed = seed;
    }
    if let Some(mode) = common.mode {
        cfg.train.env.mode = match mode {
            ModeArg::Standard => EnvMode::Standard,
            ModeArg::Shifted => EnvMode::Shifted,
        };
    }
    cfg.train.env.seed = cfg.train.seed;
    cfg.train.threads = threads_from_env()?;
    Ok(cfg)
}

fn load_params(net: &VelocityNet, path: &Path) -> Result<ParamVector> {
    let params = load_checkpoint(path).map_err(|e| {
        Error::InvalidInput(format!("cannot load checkpoint {}: {e}", path.display()))
    })?;
    net.check_params(&params)?;
    Ok(params)
}

fn cmd_pretrain(common: &Common, out: &Path) -> Result<String> {
    let cfg = load_config(common)?;
    let net = cfg.net();
    let t = &cfg.train;
    let init = net.init_params(&mut RngStream::new(t.seed, STREAM_INIT));
    let demos = generate_demos(
        &t.env,
        t.horizon,
        cfg.pretrain.demos,
        cfg.pretrain.demo_noise,
        t.seed,
    )?;
    let outcome = pretrain_cfm(&net, init, &demos, &cfg.pretrain, t.seed, t.threads)?;
    std::fs::create_dir_all(out)?;
    write_atomic(
        &out.join("pretrain_metrics.csv"),
        outcome.csv(t.log_wall_time).as_bytes(),
    )?;
    let ckpt = out.join("sft.ckpt");
    save_checkpoint(&ckpt, &outcome.params)?;
    let last = outcome.epoch_losses.last().copied().unwrap_or(f64::NAN);
    Ok(format!("final_loss={last} checkpoint={}", ckpt.display()))
}

fn cmd_rl(common: &Common, checkpoint: &Path, algo: AlgoArg, out: &Path) -> Result<String> {
    let cfg = load_config(common)?;
    let net = cfg.net();
    let params = load_params(&net, checkpoint)?;
    let surrogate = match algo {
        AlgoArg::FlowGspo => Surrogate::FlowGspo,
        AlgoArg::Grpo => Surrogate::GrpoStep,
    };
    std::fs::create_dir_all(out)?;
    let outcome = train_rl(&net, params, &cfg.train, surrogate, Some(out))?;
    write_atomic(
        &out.join("metrics.csv"),
        metrics_csv(&outcome.history).as_bytes(),
    )?;
    Ok(format!(
        "steps={} checkpoint={}",
        outcome.history.len(),
        out.join("final.ckpt").display()
    ))
}

fn cmd_eval(common: &Common, checkpoint: &Path, episodes: Option<usize>) -> Result<String> {
    let cfg = load_config(common)?;
    let net = cfg.net();
    let params = load_params(&net, checkpoint)?;
    let n = episodes.unwrap_or(cfg.train.eval_episodes);
    let result = evaluate(&net, &params, &cfg.train, n, cfg.train.env.mode)?;
    Ok(result.to_string())
}

fn cmd_trace(common: &Common, checkpoint: Option<&Path>, out: Option<&Path>) -> Result<String> {
    let cfg = load_config(common)?;
    let net = cfg.net();
    let t = &cfg.train;
    let params = match checkpoint {
        Some(path) => load_params(&net, path)?,
        None => net.init_params(&mut RngStream::new(t.seed, STREAM_INIT)),
    };
    let mut rng = RngStream::new(t.seed, STREAM_TRACE);
    let state = reset(&t.env, &mut rng);
    let schedule = NoiseSchedule::new(t.sigma_max)?;
    let traj = sample_block_sde(
        &net,
        &params,
        &state.observation(),
        t.denoise_steps,
        t.horizon,
        ACTION_DIM,
        &schedule,
        &mut rng,
    )?;
    let mut buf = Vec::new();
    write_trace(&mut buf, &traj, &schedule)?;
    match out {
        Some(path) => {
            write_atomic(path, &buf)?;
            Ok(format!("trace={}", path.display()))
        }
        None => Ok(String::from_utf8_lossy(&buf).trim_end().to_string()),
    }
}

fn cmd_mask_demo(spatial: usize, semantic: usize, action: usize, chunk: usize) -> Result<String> {
    let layout = SegmentLayout::new(spatial, semantic, action, chunk)?;
    Ok(build_mask(&layout)?.to_string().trim_end().to_string())
}

/// Executes one parsed command and returns what it prints on success.
pub fn execute(cli: &Cli) -> Result<String> {
    match &cli.command {
        Command::Pretrain { common, out } => cmd_pretrain(common, out),
        Command::Rl {
            common,
            checkpoint,
            algo,
            out,
        } => cmd_rl(common, checkpoint, *algo, out),
        Command::Eval {
            common,
            checkpoint,
            episodes,
        } => cmd_eval(common, checkpoint, *episodes),
        Command::Trace {
            common,
            checkpoint,
            out,
        } => cmd_trace(common, checkpoint.as_deref(), out.as_deref()),
        Command::MaskDemo {
            spatial,
            semantic,
            action,
            chunk,
        } => cmd_mask_demo(*spatial, *semantic, *action, *chunk),
    }
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(&cli) {
        Ok(text) => {
            let mut stdout = std::io::stdout().lock();
            if writeln!(stdout, "{text}").is_err() {
                return 1;
            }
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
