//! Behavior-cloning pretraining and group-relative RL fine-tuning.
//!
//! All randomness derives from one root seed. Each subsystem draws from its
//! own stream id, and per-item streams (episodes, group members, epochs) are
//! derived from those by index, so results never depend on scheduling order.

mod demos;
mod eval;
mod optim;
mod pretrain;
mod rl;
mod rollout;

pub use demos::{generate_demos, Demo};
pub use eval::{evaluate, evaluate_policy, EvalResult};
pub use optim::{clip_grad_norm, AdamW};
pub use pretrain::{pretrain_cfm, PretrainConfig, PretrainOutcome, PRETRAIN_CSV_HEADER};
pub use rl::{
    metrics_csv, train_flow_gspo, train_grpo_baseline, train_rl, MetricsRow, RlOutcome, StepRecord,
    METRICS_CSV_HEADER,
};
pub use rollout::{collect_group, CollectedGroup, RolloutBuffer};

use crate::env::EnvConfig;
use crate::error::{Error, Result};
use crate::policy_opt::GspoConfig;

pub const STREAM_INIT: u64 = 1;
pub const STREAM_DEMOS: u64 = 2;
pub const STREAM_PRETRAIN: u64 = 3;
pub const STREAM_RL: u64 = 4;
pub const STREAM_EVAL: u64 = 5;
pub const STREAM_TRACE: u64 = 6;

/// Settings shared by RL fine-tuning and evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Denoising steps per action block, `K`.
    pub denoise_steps: usize,
    /// Actions per block, `H`.
    pub horizon: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub rl_steps: usize,
    /// Updates between refreshes of the frozen sampling parameters.
    pub buffer_refresh: usize,
    pub sigma_max: f64,
    pub eval_episodes: usize,
    pub seed: u64,
    pub grad_clip: f64,
    pub checkpoint_every: usize,
    /// Worker threads for rollouts and gradients; 0 runs everything inline.
    pub threads: usize,
    /// Record elapsed milliseconds in metrics. Off by default because it makes
    /// the files differ between runs.
    pub log_wall_time: bool,
    pub gspo: GspoConfig,
    pub env: EnvConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            denoise_steps: 10,
            horizon: 16,
            lr: 1e-5,
            weight_decay: 0.01,
            rl_steps: 200,
            buffer_refresh: 10,
            sigma_max: 0.1,
            eval_episodes: 200,
            seed: 0,
            grad_clip: 10.0,
            checkpoint_every: 50,
            threads: 0,
            log_wall_time: false,
            gspo: GspoConfig::default(),
            env: EnvConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn group_size(&self) -> usize {
        self.gspo.group_size
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("denoise_steps", self.denoise_steps),
            ("horizon", self.horizon),
            ("buffer_refresh", self.buffer_refresh),
            ("eval_episodes", self.eval_episodes),
            ("checkpoint_every", self.checkpoint_every),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::InvalidInput(format!("{name} must be positive")));
            }
        }
        if !(self.sigma_max >= 0.0 && self.sigma_max.is_finite()) {
            return Err(Error::InvalidInput(
                "sigma_max must be finite and >= 0".into(),
            ));
        }
        if !(self.grad_clip > 0.0) {
            return Err(Error::InvalidInput("grad_clip must be positive".into()));
        }
        if !(self.lr >= 0.0 && self.weight_decay >= 0.0) {
            return Err(Error::InvalidInput(
                "lr and weight_decay must be >= 0".into(),
            ));
        }
        self.gspo.validate()?;
        self.env.validate()
    }
}

/// Runs `f` on a dedicated pool of `threads` workers, or inline when zero.
/// The flag passed to `f` says whether parallel iteration is allowed.
pub(crate) fn with_threads<T: Send>(
    threads: usize,
    f: impl FnOnce(bool) -> Result<T> + Send,
) -> Result<T> {
    if threads == 0 {
        return f(false);
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::InvalidInput(format!("thread pool: {e}")))?;
    pool.install(|| f(true))
}
