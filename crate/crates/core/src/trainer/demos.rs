use crate::env::{reset, rollout_block, scripted_expert, EnvConfig, OBS_DIM};
use crate::error::{Error, Result};
use crate::numcore::RngStream;

use super::STREAM_DEMOS;

/// Observation at a block boundary and the expert's next action block.
#[derive(Debug, Clone, PartialEq)]
pub struct Demo {
    pub obs: [f64; OBS_DIM],
    pub block: Vec<f64>,
}

/// Runs noisy expert episodes and records one demo per executed block until
/// `count` demos exist. Episode `e` uses its own stream derived from `seed`.
pub fn generate_demos(
    env: &EnvConfig,
    horizon: usize,
    count: usize,
    noise: f64,
    seed: u64,
) -> Result<Vec<Demo>> {
    env.validate()?;
    if horizon == 0 {
        return Err(Error::InvalidInput("horizon must be positive".into()));
    }
    let root = RngStream::new(seed, STREAM_DEMOS);
    let mut demos = Vec::with_capacity(count);
    let mut episode = 0u64;
    while demos.len() < count {
        let mut rng = root.derive(episode);
        episode += 1;
        let mut state = reset(env, &mut rng);
        while !state.done && demos.len() < count {
            let block = scripted_expert(&state, env, horizon, noise, &mut rng);
            let (next, _) = rollout_block(&state, &block, env)?;
            demos.push(Demo {
                obs: state.observation(),
                block: block.into_flat(),
            });
            state = next;
        }
    }
    Ok(demos)
}
