use rayon::prelude::*;

use crate::env::{reset, rollout_block, EnvConfig, EnvMode, EnvState, ACTION_DIM};
use crate::error::{Error, Result};
use crate::flow::{sample_block_ode, ActionBlock};
use crate::numcore::{ParamVector, RngStream, VelocityNet};

use super::{with_threads, TrainConfig, STREAM_EVAL};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalResult {
    pub success_rate: f64,
    pub mean_return: f64,
    pub episodes: usize,
}

impl std::fmt::Display for EvalResult {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "success_rate={} mean_return={}",
            self.success_rate, self.mean_return
        )
    }
}

/// Runs `n_episodes` episodes of an arbitrary block policy. Episode `e`
/// resets from, and hands the policy, the stream `derive(e)` of the
/// evaluation stream of `seed`, so two policies evaluated with one seed face
/// the same targets.
pub fn evaluate_policy<P>(
    env: &EnvConfig,
    n_episodes: usize,
    seed: u64,
    threads: usize,
    policy: P,
) -> Result<EvalResult>
where
    P: Fn(&EnvState, &mut RngStream) -> Result<ActionBlock> + Sync,
{
    if n_episodes == 0 {
        return Err(Error::InvalidInput(
            "evaluation needs at least one episode".into(),
        ));
    }
    env.validate()?;
    let root = RngStream::new(seed, STREAM_EVAL);
    let episode = |e: usize| -> Result<(bool, f64)> {
        let mut rng = root.derive(e as u64);
        let mut state = reset(env, &mut rng);
        let mut ret = 0.0;
        while !state.done {
            let block = policy(&state, &mut rng)?;
            let (next, rewards) = rollout_block(&state, &block, env)?;
            ret += rewards.iter().sum::<f64>();
            state = next;
        }
        Ok((state.success, ret))
    };
    let results: Vec<(bool, f64)> = with_threads(threads, |parallel| {
        if parallel {
            (0..n_episodes).into_par_iter().map(episode).collect()
        } else {
            (0..n_episodes).map(episode).collect()
        }
    })?;
    let n = n_episodes as f64;
    Ok(EvalResult {
        success_rate: results.iter().filter(|r| r.0).count() as f64 / n,
        mean_return: results.iter().map(|r| r.1).sum::<f64>() / n,
        episodes: n_episodes,
    })
}

/// Success rate and mean return of the deterministic ODE sampler. Only the
/// initial noise block of each sample is random.
pub fn evaluate(
    net: &VelocityNet,
    params: &ParamVector,
    cfg: &TrainConfig,
    n_episodes: usize,
    mode: EnvMode,
) -> Result<EvalResult> {
    net.check_params(params)?;
    let env = cfg.env.with_mode(mode);
    evaluate_policy(&env, n_episodes, cfg.seed, cfg.threads, |state, rng| {
        sample_block_ode(
            net,
            params,
            &state.observation(),
            cfg.denoise_steps,
            cfg.horizon,
            ACTION_DIM,
            rng,
        )
    })
}
