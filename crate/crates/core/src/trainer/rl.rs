use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use crate::env::reset;
use crate::error::{Error, Result};
use crate::numcore::{save_checkpoint, ParamVector, RngStream, VelocityNet};
use crate::policy_opt::{batch_objective_and_grad, Diagnostics, Surrogate};

use super::optim::{clip_grad_norm, AdamW};
use super::rollout::{collect_group, RolloutBuffer};
use super::{with_threads, TrainConfig, STREAM_RL};

pub const METRICS_CSV_HEADER: &str =
    "step,objective,mean_reward,success_rate,mean_ratio,clip_frac,kl,grad_norm,wall_ms";

/// One line of the RL metrics file.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    pub objective: f64,
    /// Mean block reward of the group collected at this step.
    pub mean_reward: f64,
    /// Fraction of that group's blocks that reached the target.
    pub success_rate: f64,
    pub mean_ratio: f64,
    pub clip_frac: f64,
    pub kl: f64,
    /// Gradient norm before clipping.
    pub grad_norm: f64,
    pub wall_ms: u128,
}

impl MetricsRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.step,
            self.objective,
            self.mean_reward,
            self.success_rate,
            self.mean_ratio,
            self.clip_frac,
            self.kl,
            self.grad_norm,
            self.wall_ms
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub metrics: MetricsRow,
    pub diagnostics: Diagnostics,
    /// The frozen parameters were replaced just before this update.
    pub refreshed: bool,
    pub grad_clipped: bool,
}

#[derive(Debug, Clone)]
pub struct RlOutcome {
    pub params: ParamVector,
    pub history: Vec<StepRecord>,
}

pub fn metrics_csv(history: &[StepRecord]) -> String {
    let mut out = String::from(METRICS_CSV_HEADER);
    out.push('\n');
    for rec in history {
        let _ = writeln!(out, "{}", rec.metrics.csv_line());
    }
    out
}

pub fn train_flow_gspo(
    net: &VelocityNet,
    params_init: ParamVector,
    cfg: &TrainConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<RlOutcome> {
    train_rl(net, params_init, cfg, Surrogate::FlowGspo, checkpoint_dir)
}

pub fn train_grpo_baseline(
    net: &VelocityNet,
    params_init: ParamVector,
    cfg: &TrainConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<RlOutcome> {
    train_rl(net, params_init, cfg, Surrogate::GrpoStep, checkpoint_dir)
}

/// Online fine-tuning by gradient ascent on a group-relative surrogate.
///
/// Every update collects one group from the current state of a running
/// episode, which then advances along member 0's block. The surrogate is
/// averaged over all groups gathered since the last refresh of the frozen
/// sampling parameters. With `checkpoint_dir` set, parameters are saved every
/// `checkpoint_every` updates and at the end; if an update turns non-finite
/// the parameters before it are saved as `last_good.ckpt` and the run fails.
pub fn train_rl(
    net: &VelocityNet,
    params_init: ParamVector,
    cfg: &TrainConfig,
    surrogate: Surrogate,
    checkpoint_dir: Option<&Path>,
) -> Result<RlOutcome> {
    cfg.validate()?;
    net.check_params(&params_init)?;
    let start = Instant::now();
    with_threads(cfg.threads, move |parallel| {
        let mut params = params_init;
        let mut params_old = params.clone();
        let mut opt = AdamW::new(params.len(), cfg.lr, cfg.weight_decay)?;
        let mut buffer = RolloutBuffer::new(cfg.buffer_refresh);
        let root = RngStream::new(cfg.seed, STREAM_RL);
        let episodes = root.derive(0);
        let mut episode = 0u64;
        let mut state = reset(&cfg.env, &mut episodes.derive(episode));
        let mut history = Vec::with_capacity(cfg.rl_steps);

        for step in 1..=cfg.rl_steps {
            let refreshed = step == 1 || buffer.needs_refresh();
            if refreshed {
                params_old = params.clone();
                buffer.refresh();
            }
            if state.done {
                episode += 1;
                state = reset(&cfg.env, &mut episodes.derive(episode));
            }
            let group = collect_group(
                &state,
                net,
                &params_old,
                cfg,
                &root.derive(step as u64),
                parallel,
            )
            .map_err(|e| numeric_abort(e, step, &params, checkpoint_dir))?;
            state = group.end_states[0].clone();
            let g = group.rollout.group_size() as f64;
            let mean_reward = group.rollout.rewards.iter().sum::<f64>() / g;
            let success_rate = group.rollout.successes.iter().filter(|&&s| s).count() as f64 / g;
            buffer.push(group.rollout);

            let (diag, grad) = batch_objective_and_grad(
                surrogate,
                buffer.entries(),
                net,
                &params,
                &cfg.gspo,
                parallel,
            )
            .map_err(|e| numeric_abort(e, step, &params, checkpoint_dir))?;
            let mut ascent: Vec<f64> = grad.into_values().into_iter().map(|x| -x).collect();
            let grad_norm = clip_grad_norm(&mut ascent, cfg.grad_clip);
            if !diag.objective.is_finite() || !grad_norm.is_finite() {
                let msg = format!("objective {} gradient norm {grad_norm}", diag.objective);
                return Err(abort(step, &msg, &params, checkpoint_dir));
            }
            let last_good = params.clone();
            opt.step(&mut params, &ascent)?;
            if !params.is_finite() {
                return Err(abort(
                    step,
                    "parameters overflowed",
                    &last_good,
                    checkpoint_dir,
                ));
            }
            buffer.record_update();

            let wall_ms = if cfg.log_wall_time {
                start.elapsed().as_millis()
            } else {
                0
            };
            history.push(StepRecord {
                metrics: MetricsRow {
                    step,
                    objective: diag.objective,
                    mean_reward,
                    success_rate,
                    mean_ratio: diag.mean_ratio,
                    clip_frac: diag.clip_frac,
                    kl: diag.kl,
                    grad_norm,
                    wall_ms,
                },
                diagnostics: diag,
                refreshed,
                grad_clipped: grad_norm > cfg.grad_clip,
            });
            if let Some(dir) = checkpoint_dir {
                if step % cfg.checkpoint_every == 0 {
                    save_checkpoint(&dir.join(format!("step_{step:05}.ckpt")), &params)?;
                }
            }
        }
        if let Some(dir) = checkpoint_dir {
            save_checkpoint(&dir.join("final.ckpt"), &params)?;
        }
        Ok(RlOutcome { params, history })
    })
}

fn numeric_abort(
    e: Error,
    step: usize,
    params: &ParamVector,
    checkpoint_dir: Option<&Path>,
) -> Error {
    match e {
        Error::NonFinite(_) | Error::DegenerateDensity { .. } => {
            abort(step, &e.to_string(), params, checkpoint_dir)
        }
        other => other,
    }
}

/// Saves `last_good` next to the other checkpoints and builds the error that
/// ends the run.
fn abort(step: usize, what: &str, last_good: &ParamVector, checkpoint_dir: Option<&Path>) -> Error {
    let mut msg = format!("update {step}: {what}");
    if let Some(dir) = checkpoint_dir {
        let path = dir.join("last_good.ckpt");
        match save_checkpoint(&path, last_good) {
            Ok(()) => msg.push_str(&format!(
                "; last good parameters saved to {}",
                path.display()
            )),
            Err(e) => msg.push_str(&format!("; saving last good parameters failed: {e}")),
        }
    }
    Error::NonFinite(msg)
}
