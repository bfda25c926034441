//! Group-relative policy objectives on stochastic flow policies.
//!
//! For a group of `G` action blocks sampled from one state under frozen
//! parameters `theta_old`, the block-level ratio of member `i` is
//!
//! ```text
//! s_i = exp((log pi(A_i) - log pi_old(A_i)) / (H * K))
//! ```
//!
//! and the Flow-GSPO objective is
//!
//! ```text
//! J = (1/G) sum_i min(s_i * adv_i, clip(s_i, 1 - eps, 1 + eps) * adv_i) - beta * KL
//! KL = (1/G) sum_i (log pi(A_i) - log pi_old(A_i))
//! ```
//!
//! The GRPO-style baseline clips every denoising transition's ratio on its own.
//! Advantages and old log-likelihoods are constants with respect to the
//! parameters.

use rayon::prelude::*;

use crate::error::{check_len, Error, Result};
use crate::flow::{
    accumulate_step_logp_grads, step_log_likelihoods, DenoisingTrajectory, NoiseSchedule,
};
use crate::numcore::{ParamVector, VelocityNet};

#[derive(Debug, Clone, PartialEq)]
pub struct GspoConfig {
    pub group_size: usize,
    pub clip_eps: f64,
    pub kl_beta: f64,
    pub gamma: f64,
    pub adv_guard: f64,
}

impl Default for GspoConfig {
    fn default() -> Self {
        Self {
            group_size: 8,
            clip_eps: 0.2,
            kl_beta: 0.01,
            gamma: 1.0,
            adv_guard: 1e-8,
        }
    }
}

impl GspoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.group_size < 2 {
            return Err(Error::InvalidInput("group_size must be >= 2".into()));
        }
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return Err(Error::InvalidInput("clip_eps must lie in (0, 1)".into()));
        }
        if !(self.kl_beta >= 0.0) {
            return Err(Error::InvalidInput("kl_beta must be >= 0".into()));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::InvalidInput("gamma must lie in (0, 1]".into()));
        }
        if !(self.adv_guard > 0.0) {
            return Err(Error::InvalidInput("adv_guard must be positive".into()));
        }
        Ok(())
    }
}

/// `G` blocks sampled from the same observation under frozen parameters.
#[derive(Debug, Clone)]
pub struct GroupRollout {
    /// Observation the group was sampled from.
    pub state: Vec<f64>,
    pub trajs: Vec<DenoisingTrajectory>,
    /// Discounted block reward per member.
    pub rewards: Vec<f64>,
    /// `log pi_old(A_i | s)` recorded at sampling time.
    pub old_logps: Vec<f64>,
    pub advantages: Vec<f64>,
    /// Whether the member's block reached the target.
    pub successes: Vec<bool>,
    pub schedule: NoiseSchedule,
}

impl GroupRollout {
    pub fn new(
        state: Vec<f64>,
        trajs: Vec<DenoisingTrajectory>,
        rewards: Vec<f64>,
        successes: Vec<bool>,
        schedule: NoiseSchedule,
        adv_guard: f64,
    ) -> Result<Self> {
        let g = trajs.len();
        if g < 2 {
            return Err(Error::InvalidInput(
                "a group needs at least two members".into(),
            ));
        }
        check_len("group rewards", g, rewards.len())?;
        check_len("group successes", g, successes.len())?;
        let old_logps: Vec<f64> = trajs.iter().map(DenoisingTrajectory::total_logp).collect();
        if let Some(i) = old_logps.iter().position(|l| !l.is_finite()) {
            return Err(Error::DegenerateDensity {
                context: format!("group member {i} has no finite sampling log-likelihood"),
                var: 0.0,
            });
        }
        let advantages = group_advantages(&rewards, adv_guard);
        Ok(Self {
            state,
            trajs,
            rewards,
            old_logps,
            advantages,
            successes,
            schedule,
        })
    }

    pub fn group_size(&self) -> usize {
        self.trajs.len()
    }
}

/// Per-update summary of an objective evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Diagnostics {
    pub objective: f64,
    pub mean_ratio: f64,
    pub min_ratio: f64,
    pub max_ratio: f64,
    /// Fraction of ratio terms where the clipped branch is the active minimum.
    pub clip_frac: f64,
    pub kl: f64,
}

/// `sum_h gamma^h r_h`
pub fn block_reward(step_rewards: &[f64], gamma: f64) -> f64 {
    let mut discount = 1.0;
    let mut total = 0.0;
    for r in step_rewards {
        total += discount * r;
        discount *= gamma;
    }
    total
}

/// `(r_i - mean) / (population_std + guard)`.
pub fn group_advantages(rewards: &[f64], guard: f64) -> Vec<f64> {
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    let denom = var.sqrt() + guard;
    rewards.iter().map(|r| (r - mean) / denom).collect()
}

/// Length-normalized likelihood ratio `exp((logp_new - logp_old) / block_len)`.
pub fn importance_ratio(logp_new: f64, logp_old: f64, block_len: usize) -> Result<f64> {
    if !(logp_new.is_finite() && logp_old.is_finite()) {
        return Err(Error::NonFinite(format!(
            "log-likelihoods {logp_new}, {logp_old}"
        )));
    }
    if block_len == 0 {
        return Err(Error::InvalidInput("block length must be >= 1".into()));
    }
    Ok(((logp_new - logp_old) / block_len as f64).exp())
}

pub fn clipped_term(ratio: f64, adv: f64, eps: f64) -> f64 {
    (ratio * adv).min(ratio.clamp(1.0 - eps, 1.0 + eps) * adv)
}

/// True when the clipped product is strictly the smaller one, i.e. the term
/// carries no gradient through the ratio.
pub fn clip_active(ratio: f64, adv: f64, eps: f64) -> bool {
    ratio.clamp(1.0 - eps, 1.0 + eps) * adv < ratio * adv
}

/// Sample mean of `log pi_new - log pi_old` over draws from the old policy.
pub fn kl_penalty_estimate(logps_new: &[f64], logps_old: &[f64]) -> f64 {
    assert_eq!(
        logps_new.len(),
        logps_old.len(),
        "KL estimate needs paired log-likelihoods"
    );
    logps_new
        .iter()
        .zip(logps_old)
        .map(|(n, o)| n - o)
        .sum::<f64>()
        / logps_new.len() as f64
}

fn block_len(traj: &DenoisingTrajectory) -> usize {
    traj.horizon() * traj.steps()
}

/// Which clipped surrogate to optimize.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Surrogate {
    /// One length-normalized ratio per action block.
    FlowGspo,
    /// One ratio per denoising transition.
    GrpoStep,
}

impl std::str::FromStr for Surrogate {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "flow-gspo" => Ok(Surrogate::FlowGspo),
            "grpo" => Ok(Surrogate::GrpoStep),
            other => Err(Error::InvalidInput(format!(
                "unknown algorithm `{other}` (flow-gspo|grpo)"
            ))),
        }
    }
}

/// Partial sums for one group member, merged across a batch of rollouts.
#[derive(Debug, Clone, Copy, Default)]
struct Tally {
    objective: f64,
    ratio_sum: f64,
    ratio_count: usize,
    min_ratio: f64,
    max_ratio: f64,
    clipped: usize,
    kl: f64,
}

impl Tally {
    fn empty() -> Self {
        Self {
            min_ratio: f64::INFINITY,
            max_ratio: f64::NEG_INFINITY,
            ..Self::default()
        }
    }

    fn ratio(&mut self, r: f64, clipped: bool) {
        self.ratio_sum += r;
        self.ratio_count += 1;
        self.min_ratio = self.min_ratio.min(r);
        self.max_ratio = self.max_ratio.max(r);
        self.clipped += usize::from(clipped);
    }

    fn merge(mut self, o: Tally) -> Tally {
        self.objective += o.objective;
        self.ratio_sum += o.ratio_sum;
        self.ratio_count += o.ratio_count;
        self.min_ratio = self.min_ratio.min(o.min_ratio);
        self.max_ratio = self.max_ratio.max(o.max_ratio);
        self.clipped += o.clipped;
        self.kl += o.kl;
        self
    }
}

/// Objective contribution, diagnostics and (optionally) gradient of one member.
#[allow(clippy::too_many_arguments)]
fn member_term(
    surrogate: Surrogate,
    rollout: &GroupRollout,
    i: usize,
    net: &VelocityNet,
    params: &ParamVector,
    cfg: &GspoConfig,
    weight: f64,
    grad: Option<&mut [f64]>,
) -> Result<Tally> {
    let traj = &rollout.trajs[i];
    let g = rollout.group_size() as f64;
    let adv = rollout.advantages[i];
    let beta = cfg.kl_beta;
    let logps = step_log_likelihoods(net, params, traj, &rollout.state, &rollout.schedule)?;
    let total: f64 = logps.iter().sum();
    let mut tally = Tally::empty();
    let delta_l = total - rollout.old_logps[i];
    tally.kl = weight * delta_l / g;
    let step_weights: Vec<f64> = match surrogate {
        Surrogate::FlowGspo => {
            let len = block_len(traj);
            let s = importance_ratio(total, rollout.old_logps[i], len)?;
            let clipped = clip_active(s, adv, cfg.clip_eps);
            tally.ratio(s, clipped);
            tally.objective =
                weight * (clipped_term(s, adv, cfg.clip_eps) / g - beta * delta_l / g);
            let main = if clipped { 0.0 } else { s * adv / len as f64 };
            vec![weight * (main - beta) / g; traj.steps()]
        }
        Surrogate::GrpoStep => {
            let k = traj.steps() as f64;
            let mut w = Vec::with_capacity(traj.steps());
            let mut obj = 0.0;
            for (step, lp) in logps.iter().enumerate() {
                let old = traj.logp_terms[step];
                let rho = importance_ratio(*lp, old, 1)?;
                let clipped = clip_active(rho, adv, cfg.clip_eps);
                tally.ratio(rho, clipped);
                obj += clipped_term(rho, adv, cfg.clip_eps);
                let main = if clipped { 0.0 } else { rho * adv / k };
                w.push(weight * (main - beta) / g);
            }
            tally.objective = weight * (obj / (g * k) - beta * delta_l / g);
            w
        }
    };
    if let Some(grad) = grad {
        accumulate_step_logp_grads(
            net,
            params,
            traj,
            &rollout.state,
            &rollout.schedule,
            &step_weights,
            grad,
        )?;
    }
    Ok(tally)
}

fn finish(t: Tally) -> Diagnostics {
    let n = t.ratio_count.max(1) as f64;
    Diagnostics {
        objective: t.objective,
        mean_ratio: t.ratio_sum / n,
        min_ratio: t.min_ratio,
        max_ratio: t.max_ratio,
        clip_frac: t.clipped as f64 / n,
        kl: t.kl,
    }
}

/// Mean objective over a batch of rollouts with its exact gradient.
///
/// Members are independent; with `parallel` they are evaluated on the rayon
/// pool and their gradients summed in member order, so the result does not
/// depend on the thread count.
pub fn batch_objective_and_grad(
    surrogate: Surrogate,
    rollouts: &[GroupRollout],
    net: &VelocityNet,
    params: &ParamVector,
    cfg: &GspoConfig,
    parallel: bool,
) -> Result<(Diagnostics, ParamVector)> {
    if rollouts.is_empty() {
        return Err(Error::InvalidInput("no rollouts to optimize".into()));
    }
    let weight = 1.0 / rollouts.len() as f64;
    let jobs: Vec<(usize, usize)> = rollouts
        .iter()
        .enumerate()
        .flat_map(|(r, ro)| (0..ro.group_size()).map(move |i| (r, i)))
        .collect();
    let run = |&(r, i): &(usize, usize)| -> Result<(Tally, Vec<f64>)> {
        let mut g = vec![0.0; params.len()];
        let t = member_term(
            surrogate,
            &rollouts[r],
            i,
            net,
            params,
            cfg,
            weight,
            Some(&mut g),
        )?;
        Ok((t, g))
    };
    let parts: Vec<(Tally, Vec<f64>)> = if parallel {
        jobs.par_iter().map(run).collect::<Result<_>>()?
    } else {
        jobs.iter().map(run).collect::<Result<_>>()?
    };
    let mut tally = Tally::empty();
    let mut grad = vec![0.0; params.len()];
    for (t, g) in parts {
        tally = tally.merge(t);
        for (a, b) in grad.iter_mut().zip(&g) {
            *a += b;
        }
    }
    Ok((finish(tally), params.with_values(grad)?))
}

fn objective_only(
    surrogate: Surrogate,
    rollout: &GroupRollout,
    net: &VelocityNet,
    params: &ParamVector,
    cfg: &GspoConfig,
) -> Result<(f64, Diagnostics)> {
    let mut tally = Tally::empty();
    for i in 0..rollout.group_size() {
        tally = tally.merge(member_term(
            surrogate, rollout, i, net, params, cfg, 1.0, None,
        )?);
    }
    let d = finish(tally);
    Ok((d.objective, d))
}

/// Flow-GSPO objective of a single group.
pub fn flow_gspo_objective(
    rollout: &GroupRollout,
    net: &VelocityNet,
    params: &ParamVector,
    cfg: &GspoConfig,
) -> Result<(f64, Diagnostics)> {
    objective_only(Surrogate::FlowGspo, rollout, net, params, cfg)
}

/// Per-transition clipped baseline of a single group.
pub fn grpo_step_objective(
    rollout: &GroupRollout,
    net: &VelocityNet,
    params: &ParamVector,
    cfg: &GspoConfig,
) -> Result<(f64, Diagnostics)> {
    objective_only(Surrogate::GrpoStep, rollout, net, params, cfg)
}

/// Exact gradient of [`flow_gspo_objective`] by reverse mode through the
/// chain `objective -> ratio -> log-likelihood -> transition mean -> drift -> v`.
/// Members whose clipped branch is active contribute only through the KL term.
pub fn flow_gspo_grad_autodiff(
    rollout: &GroupRollout,
    net: &VelocityNet,
    params: &ParamVector,
    cfg: &GspoConfig,
) -> Result<ParamVector> {
    Ok(batch_objective_and_grad(
        Surrogate::FlowGspo,
        std::slice::from_ref(rollout),
        net,
        params,
        cfg,
        false,
    )?
    .1)
}

pub fn grpo_step_grad_autodiff(
    rollout: &GroupRollout,
    net: &VelocityNet,
    params: &ParamVector,
    cfg: &GspoConfig,
) -> Result<ParamVector> {
    Ok(batch_objective_and_grad(
        Surrogate::GrpoStep,
        std::slice::from_ref(rollout),
        net,
        params,
        cfg,
        false,
    )?
    .1)
}

/// Closed-form policy gradient assembled directly from per-step residuals:
///
/// ```text
/// grad = (1/G) sum_i (s_i adv_i / |A| - beta)
///        * sum_k (A^{k+1} - mu_k) / var_k * c_k * dv/dtheta (A^k, s, tau_k)
/// c_k  = [1 + sigma_k^2 (1 - tau_k) / 2] * delta
/// mu_k = A^k (1 + sigma_k^2 delta / 2) + c_k v
/// ```
///
/// Valid only while no member is clipped; otherwise returns
/// [`Error::ClippingActive`].
pub fn flow_gspo_grad_closed_form(
    rollout: &GroupRollout,
    net: &VelocityNet,
    params: &ParamVector,
    cfg: &GspoConfig,
) -> Result<ParamVector> {
    let g = rollout.group_size() as f64;
    let schedule = &rollout.schedule;
    let mut grad = vec![0.0; params.len()];
    let mut clipped = 0;
    let mut coefs = Vec::with_capacity(rollout.group_size());
    for (i, traj) in rollout.trajs.iter().enumerate() {
        let len = block_len(traj) as f64;
        let logp: f64 = step_log_likelihoods(net, params, traj, &rollout.state, schedule)?
            .iter()
            .sum();
        let s = ((logp - rollout.old_logps[i]) / len).exp();
        if clip_active(s, rollout.advantages[i], cfg.clip_eps) {
            clipped += 1;
        }
        coefs.push((s * rollout.advantages[i] / len - cfg.kl_beta) / g);
    }
    if clipped > 0 {
        return Err(Error::ClippingActive { clipped });
    }
    for (traj, coef) in rollout.trajs.iter().zip(coefs) {
        let delta = traj.delta;
        for k in 0..traj.steps() {
            let tau = traj.tau(k);
            let sigma2 = schedule.sigma(tau).powi(2);
            let var = sigma2 * delta;
            let c0 = 1.0 + sigma2 * delta / 2.0;
            let cr = (1.0 + sigma2 * (1.0 - tau) / 2.0) * delta;
            let a = &traj.states[k];
            let trace = net.forward_trace(params, a, &rollout.state, tau)?;
            let upstream: Vec<f64> = traj.states[k + 1]
                .iter()
                .zip(a)
                .zip(trace.output())
                .map(|((next, ak), vk)| {
                    let mu = ak * c0 + cr * vk;
                    coef * (next - mu) / var * cr
                })
                .collect();
            net.backward_trace(params, &trace, &upstream, &mut grad, None)?;
        }
    }
    params.with_values(grad)
}
