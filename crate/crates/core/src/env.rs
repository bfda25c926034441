//! Point-mass reaching task on the square arena `[-1, 1]^2`.
//!
//! The effector starts at the origin and must come within `success_radius`
//! of a target drawn uniformly from the annulus `0.4 <= r <= 0.9`. Each step
//! moves the effector by `action_scale * clip(action, -1, 1)`. The reward is a
//! success indicator plus a potential-difference shaping term on the distance
//! to the target.
//!
//! In [`EnvMode::Shifted`] the observed target (the cue) is offset from the
//! real target by a fixed bias, so a policy that trusts the cue falls short.

use std::str::FromStr;

use crate::error::{check_len, Error, Result};
use crate::flow::ActionBlock;
use crate::numcore::RngStream;

pub const ARENA_HALF_WIDTH: f64 = 1.0;
pub const TARGET_RADIUS_MIN: f64 = 0.4;
pub const TARGET_RADIUS_MAX: f64 = 0.9;
pub const ACTION_DIM: usize = 2;
pub const OBS_DIM: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnvMode {
    Standard,
    Shifted,
}

impl FromStr for EnvMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(EnvMode::Standard),
            "shifted" => Ok(EnvMode::Shifted),
            other => Err(Error::InvalidInput(format!(
                "unknown mode `{other}` (standard|shifted)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvConfig {
    pub success_radius: f64,
    pub episode_limit: usize,
    pub action_scale: f64,
    pub shaping_weight: f64,
    pub seed: u64,
    pub mode: EnvMode,
    /// Real target minus observed cue in shifted mode.
    pub target_bias: [f64; 2],
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            success_radius: 0.05,
            episode_limit: 64,
            action_scale: 0.05,
            shaping_weight: 1.0,
            seed: 0,
            mode: EnvMode::Standard,
            target_bias: [0.1, 0.0],
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.success_radius > 0.0) {
            return Err(Error::InvalidInput(
                "success_radius must be positive".into(),
            ));
        }
        if !(self.action_scale > 0.0) {
            return Err(Error::InvalidInput("action_scale must be positive".into()));
        }
        if self.episode_limit == 0 {
            return Err(Error::InvalidInput("episode_limit must be positive".into()));
        }
        Ok(())
    }

    pub fn with_mode(&self, mode: EnvMode) -> Self {
        Self {
            mode,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvState {
    pub effector_pos: [f64; 2],
    pub target_pos: [f64; 2],
    /// Target position as reported in the observation.
    pub cue_pos: [f64; 2],
    pub t: usize,
    pub done: bool,
    pub success: bool,
}

impl EnvState {
    /// `[effector_x, effector_y, cue_x, cue_y]`
    pub fn observation(&self) -> [f64; OBS_DIM] {
        [
            self.effector_pos[0],
            self.effector_pos[1],
            self.cue_pos[0],
            self.cue_pos[1],
        ]
    }

    pub fn distance_to_target(&self) -> f64 {
        dist(self.effector_pos, self.target_pos)
    }
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

fn clamp_arena(p: [f64; 2]) -> [f64; 2] {
    [
        p[0].clamp(-ARENA_HALF_WIDTH, ARENA_HALF_WIDTH),
        p[1].clamp(-ARENA_HALF_WIDTH, ARENA_HALF_WIDTH),
    ]
}

pub fn reset(cfg: &EnvConfig, rng: &mut RngStream) -> EnvState {
    let r2 = TARGET_RADIUS_MIN.powi(2)
        + rng.uniform() * (TARGET_RADIUS_MAX.powi(2) - TARGET_RADIUS_MIN.powi(2));
    let r = r2.sqrt();
    let angle = 2.0 * std::f64::consts::PI * rng.uniform();
    let cue = [r * angle.cos(), r * angle.sin()];
    let target = match cfg.mode {
        EnvMode::Standard => cue,
        EnvMode::Shifted => clamp_arena([cue[0] + cfg.target_bias[0], cue[1] + cfg.target_bias[1]]),
    };
    EnvState {
        effector_pos: [0.0, 0.0],
        target_pos: target,
        cue_pos: cue,
        t: 0,
        done: false,
        success: false,
    }
}

pub fn step(state: &EnvState, action: &[f64], cfg: &EnvConfig) -> Result<(EnvState, f64)> {
    if state.done {
        return Err(Error::EpisodeDone);
    }
    check_len("environment action", ACTION_DIM, action.len())?;
    let before = state.distance_to_target();
    let pos = clamp_arena([
        state.effector_pos[0] + cfg.action_scale * action[0].clamp(-1.0, 1.0),
        state.effector_pos[1] + cfg.action_scale * action[1].clamp(-1.0, 1.0),
    ]);
    let after = dist(pos, state.target_pos);
    let success = after <= cfg.success_radius;
    let reward = f64::from(u8::from(success)) + cfg.shaping_weight * (before - after);
    let t = state.t + 1;
    Ok((
        EnvState {
            effector_pos: pos,
            target_pos: state.target_pos,
            cue_pos: state.cue_pos,
            t,
            done: success || t >= cfg.episode_limit,
            success,
        },
        reward,
    ))
}

/// Executes every action of `block` in order. Once the episode ends the
/// remaining rewards are zero, so the list always has `block.horizon()` entries.
pub fn rollout_block(
    state: &EnvState,
    block: &ActionBlock,
    cfg: &EnvConfig,
) -> Result<(EnvState, Vec<f64>)> {
    check_len("action block width", ACTION_DIM, block.action_dim())?;
    if state.done {
        return Err(Error::EpisodeDone);
    }
    let mut current = state.clone();
    let mut rewards = Vec::with_capacity(block.horizon());
    for h in 0..block.horizon() {
        if current.done {
            rewards.push(0.0);
            continue;
        }
        let (next, r) = step(&current, block.action(h), cfg)?;
        rewards.push(r);
        current = next;
    }
    Ok((current, rewards))
}

/// Greedy demonstrator acting on the observed cue. Each clean action is the
/// direction to the cue scaled so that one step never overshoots, i.e. the
/// unit vector when farther than `action_scale`. Gaussian noise of std
/// `noise_level` is added per component before clipping to `[-1, 1]`.
pub fn scripted_expert(
    state: &EnvState,
    cfg: &EnvConfig,
    horizon: usize,
    noise_level: f64,
    rng: &mut RngStream,
) -> ActionBlock {
    let mut pos = state.effector_pos;
    let goal = state.cue_pos;
    let mut data = Vec::with_capacity(horizon * ACTION_DIM);
    for _ in 0..horizon {
        let dx = (goal[0] - pos[0]) / cfg.action_scale;
        let dy = (goal[1] - pos[1]) / cfg.action_scale;
        let norm = (dx * dx + dy * dy).sqrt();
        let shrink = if norm > 1.0 { 1.0 / norm } else { 1.0 };
        let mut a = [dx * shrink, dy * shrink];
        if noise_level > 0.0 {
            a[0] += noise_level * rng.gaussian();
            a[1] += noise_level * rng.gaussian();
        }
        let a = [a[0].clamp(-1.0, 1.0), a[1].clamp(-1.0, 1.0)];
        pos = clamp_arena([
            pos[0] + cfg.action_scale * a[0],
            pos[1] + cfg.action_scale * a[1],
        ]);
        data.extend_from_slice(&a);
    }
    ActionBlock::new(horizon, ACTION_DIM, data).expect("expert actions are finite")
}
