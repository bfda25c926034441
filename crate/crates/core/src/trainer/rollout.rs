use rayon::prelude::*;

use crate::env::{rollout_block, EnvState, ACTION_DIM};
use crate::error::{Error, Result};
use crate::flow::{sample_block_sde, NoiseSchedule};
use crate::numcore::{ParamVector, RngStream, VelocityNet};
use crate::policy_opt::{block_reward, GroupRollout};

use super::TrainConfig;

#[derive(Debug, Clone)]
pub struct CollectedGroup {
    pub rollout: GroupRollout,
    /// Environment state after each member's block.
    pub end_states: Vec<EnvState>,
}

/// Samples `G` blocks from `state` under the frozen parameters and executes
/// each in its own copy of the environment. Member `i` draws from
/// `rng.derive(i)`.
pub fn collect_group(
    state: &EnvState,
    net: &VelocityNet,
    params_old: &ParamVector,
    cfg: &TrainConfig,
    rng: &RngStream,
    parallel: bool,
) -> Result<CollectedGroup> {
    if state.done {
        return Err(Error::EpisodeDone);
    }
    let schedule = NoiseSchedule::new(cfg.sigma_max)?;
    let obs = state.observation().to_vec();
    let member = |i: usize| {
        let mut stream = rng.derive(i as u64);
        let traj = sample_block_sde(
            net,
            params_old,
            &obs,
            cfg.denoise_steps,
            cfg.horizon,
            ACTION_DIM,
            &schedule,
            &mut stream,
        )?;
        let (end, rewards) = rollout_block(state, &traj.final_block(), &cfg.env)?;
        Ok((traj, block_reward(&rewards, cfg.gspo.gamma), end))
    };
    let g = cfg.group_size();
    let members: Vec<_> = if parallel {
        (0..g).into_par_iter().map(member).collect::<Result<_>>()?
    } else {
        (0..g).map(member).collect::<Result<_>>()?
    };
    let mut trajs = Vec::with_capacity(g);
    let mut rewards = Vec::with_capacity(g);
    let mut end_states = Vec::with_capacity(g);
    for (t, r, e) in members {
        trajs.push(t);
        rewards.push(r);
        end_states.push(e);
    }
    let successes = end_states.iter().map(|e| e.success).collect();
    let rollout = GroupRollout::new(obs, trajs, rewards, successes, schedule, cfg.gspo.adv_guard)?;
    Ok(CollectedGroup {
        rollout,
        end_states,
    })
}

/// Groups sampled under one frozen parameter snapshot.
#[derive(Debug, Clone)]
pub struct RolloutBuffer {
    entries: Vec<GroupRollout>,
    capacity: usize,
    refresh_age: usize,
}

impl RolloutBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            entries: Vec::with_capacity(capacity),
            capacity,
            refresh_age: 0,
        }
    }

    pub fn entries(&self) -> &[GroupRollout] {
        &self.entries
    }

    /// Updates performed since the last refresh.
    pub fn refresh_age(&self) -> usize {
        self.refresh_age
    }

    pub fn needs_refresh(&self) -> bool {
        self.refresh_age >= self.capacity
    }

    pub fn refresh(&mut self) {
        self.entries.clear();
        self.refresh_age = 0;
    }

    pub fn push(&mut self, group: GroupRollout) {
        self.entries.push(group);
    }

    pub fn record_update(&mut self) {
        self.refresh_age += 1;
    }
}
