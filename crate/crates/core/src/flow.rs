//! Flow-matching machinery: straight-line probability paths, the conditional
//! flow-matching loss, and deterministic (ODE) and stochastic (Euler–Maruyama)
//! samplers for action blocks.
//!
//! The stochastic sampler integrates
//!
//! ```text
//! dA = [v + (sigma^2 / 2) (A + (1 - tau) v)] dtau + sigma dW,   sigma = sigma_max (1 - tau)
//! ```
//!
//! on the grid `tau_k = k / K`, `k = 0..K-1`. Every transition is an isotropic
//! Gaussian `N(mu_k, sigma_k^2 delta I)`, which gives the block likelihood used
//! by the policy-gradient objectives.

use std::io::Write;

use crate::error::{check_len, Error, Result};
use crate::numcore::{ParamVector, RngStream, VelocityNet};

/// One action chunk: `horizon` consecutive actions of `action_dim` each, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionBlock {
    horizon: usize,
    action_dim: usize,
    data: Vec<f64>,
}

impl ActionBlock {
    pub fn new(horizon: usize, action_dim: usize, data: Vec<f64>) -> Result<Self> {
        if horizon == 0 || action_dim == 0 {
            return Err(Error::InvalidInput(
                "action block needs horizon >= 1 and action_dim >= 1".into(),
            ));
        }
        check_len("action block", horizon * action_dim, data.len())?;
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("action block entry".into()));
        }
        Ok(Self {
            horizon,
            action_dim,
            data,
        })
    }

    pub fn zeros(horizon: usize, action_dim: usize) -> Self {
        Self {
            horizon,
            action_dim,
            data: vec![0.0; horizon * action_dim],
        }
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn action(&self, h: usize) -> &[f64] {
        &self.data[h * self.action_dim..(h + 1) * self.action_dim]
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.data
    }

    pub fn into_flat(self) -> Vec<f64> {
        self.data
    }
}

/// Linear noise schedule `sigma(tau) = sigma_max * (1 - tau)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSchedule {
    sigma_max: f64,
}

impl NoiseSchedule {
    pub fn new(sigma_max: f64) -> Result<Self> {
        if !(sigma_max >= 0.0 && sigma_max.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "sigma_max must be >= 0, got {sigma_max}"
            )));
        }
        Ok(Self { sigma_max })
    }

    pub fn sigma_max(&self) -> f64 {
        self.sigma_max
    }

    pub fn sigma(&self, tau: f64) -> f64 {
        self.sigma_max * (1.0 - tau)
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self { sigma_max: 0.1 }
    }
}

/// Isotropic Gaussian `N(mu, var * I)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionGaussian {
    pub mu: Vec<f64>,
    pub var: f64,
}

/// A full stochastic denoising chain for one action block.
///
/// `states[0]` is the initial Gaussian draw and `states[K]` the emitted block.
/// `logp_terms[k]` is `log N(states[k+1] | mu_k, var_k)` under the sampling
/// parameters; it is `NaN` when that step had zero variance.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoisingTrajectory {
    pub states: Vec<Vec<f64>>,
    pub noises: Vec<Vec<f64>>,
    pub delta: f64,
    pub logp_terms: Vec<f64>,
    horizon: usize,
    action_dim: usize,
}

impl DenoisingTrajectory {
    pub fn steps(&self) -> usize {
        self.noises.len()
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn tau(&self, k: usize) -> f64 {
        grid_tau(k, self.steps())
    }

    pub fn final_block(&self) -> ActionBlock {
        ActionBlock::new(
            self.horizon,
            self.action_dim,
            self.states.last().expect("trajectory has states").clone(),
        )
        .expect("sampler produced a finite block")
    }

    pub fn total_logp(&self) -> f64 {
        self.logp_terms.iter().sum()
    }
}

/// `tau_k = k / K`.
pub fn grid_tau(k: usize, steps: usize) -> f64 {
    k as f64 / steps as f64
}

/// `(1 - t) x0 + t x1`
pub fn interpolate(x0: &[f64], x1: &[f64], t: f64) -> Result<Vec<f64>> {
    check_len("interpolate", x0.len(), x1.len())?;
    Ok(x0
        .iter()
        .zip(x1)
        .map(|(a, b)| (1.0 - t) * a + t * b)
        .collect())
}

/// Conditional velocity target of the straight path, `x1 - x0`.
pub fn cfm_target(x0: &[f64], x1: &[f64]) -> Result<Vec<f64>> {
    check_len("cfm target", x0.len(), x1.len())?;
    Ok(x1.iter().zip(x0).map(|(b, a)| b - a).collect())
}

/// One regression sample for the CFM loss.
#[derive(Debug, Clone, PartialEq)]
pub struct CfmSample {
    pub x0: Vec<f64>,
    pub x1: Vec<f64>,
    pub s: Vec<f64>,
    pub t: f64,
}

/// Mean over the batch of `||v(x_t, s, t) - (x1 - x0)||^2`.
pub fn cfm_loss(net: &VelocityNet, params: &ParamVector, batch: &[CfmSample]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::InvalidInput("empty CFM batch".into()));
    }
    let mut total = 0.0;
    for sample in batch {
        let xt = interpolate(&sample.x0, &sample.x1, sample.t)?;
        let target = cfm_target(&sample.x0, &sample.x1)?;
        let v = net.forward(params, &xt, &sample.s, sample.t)?;
        total += v
            .iter()
            .zip(&target)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>();
    }
    Ok(total / batch.len() as f64)
}

/// CFM loss over `batch` plus its parameter gradient accumulated into `grad`
/// with weight `scale`. Returns the unscaled batch-mean loss.
pub fn cfm_loss_grad(
    net: &VelocityNet,
    params: &ParamVector,
    batch: &[CfmSample],
    scale: f64,
    grad: &mut [f64],
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::InvalidInput("empty CFM batch".into()));
    }
    let n = batch.len() as f64;
    let mut total = 0.0;
    for sample in batch {
        let xt = interpolate(&sample.x0, &sample.x1, sample.t)?;
        let target = cfm_target(&sample.x0, &sample.x1)?;
        let trace = net.forward_trace(params, &xt, &sample.s, sample.t)?;
        let resid: Vec<f64> = trace
            .output()
            .iter()
            .zip(&target)
            .map(|(a, b)| a - b)
            .collect();
        total += resid.iter().map(|r| r * r).sum::<f64>();
        let upstream: Vec<f64> = resid.iter().map(|r| 2.0 * r * scale / n).collect();
        net.backward_trace(params, &trace, &upstream, grad, None)?;
    }
    Ok(total / n)
}

/// Euler step of the probability-flow ODE, `a + delta * v(a, s, tau)`.
pub fn ode_step(
    net: &VelocityNet,
    params: &ParamVector,
    a: &[f64],
    s: &[f64],
    tau: f64,
    delta: f64,
) -> Result<Vec<f64>> {
    if !(delta > 0.0) {
        return Err(Error::InvalidInput(format!(
            "delta must be positive, got {delta}"
        )));
    }
    let v = net.forward(params, a, s, tau)?;
    Ok(a.iter().zip(&v).map(|(x, vi)| x + delta * vi).collect())
}

/// Drift of the stochastic reformulation: `v + (sigma^2 / 2) (a + (1 - tau) v)`.
pub fn sde_drift(v: &[f64], a: &[f64], tau: f64, sigma_tau: f64) -> Result<Vec<f64>> {
    check_len("sde drift", v.len(), a.len())?;
    let half_var = 0.5 * sigma_tau * sigma_tau;
    Ok(v.iter()
        .zip(a)
        .map(|(vi, ai)| vi + half_var * (ai + (1.0 - tau) * vi))
        .collect())
}

/// Vector-Jacobian product of [`sde_drift`] with respect to `v`.
pub fn sde_drift_vjp_v(upstream: &[f64], tau: f64, sigma_tau: f64) -> Vec<f64> {
    let dv = 1.0 + 0.5 * sigma_tau * sigma_tau * (1.0 - tau);
    upstream.iter().map(|u| u * dv).collect()
}

/// Gaussian transition for a given velocity: `mu = a + drift * delta`, `var = sigma^2 delta`.
pub fn transition_from_velocity(
    v: &[f64],
    a: &[f64],
    tau: f64,
    delta: f64,
    schedule: &NoiseSchedule,
) -> Result<TransitionGaussian> {
    let sigma = schedule.sigma(tau);
    let drift = sde_drift(v, a, tau, sigma)?;
    let mu = a.iter().zip(&drift).map(|(x, d)| x + d * delta).collect();
    Ok(TransitionGaussian {
        mu,
        var: sigma * sigma * delta,
    })
}

/// One Euler–Maruyama step: `a_next = mu + sqrt(var) * noise`.
#[allow(clippy::too_many_arguments)]
pub fn em_step(
    net: &VelocityNet,
    params: &ParamVector,
    a: &[f64],
    s: &[f64],
    tau: f64,
    delta: f64,
    schedule: &NoiseSchedule,
    noise: &[f64],
) -> Result<(Vec<f64>, TransitionGaussian)> {
    if !(0.0..1.0).contains(&tau) {
        return Err(Error::InvalidInput(format!(
            "tau must lie in [0, 1), got {tau}"
        )));
    }
    if !(delta > 0.0) {
        return Err(Error::InvalidInput(format!(
            "delta must be positive, got {delta}"
        )));
    }
    check_len("em step noise", a.len(), noise.len())?;
    let v = net.forward(params, a, s, tau)?;
    let trans = transition_from_velocity(&v, a, tau, delta, schedule)?;
    let std = trans.var.sqrt();
    let next = trans
        .mu
        .iter()
        .zip(noise)
        .map(|(m, z)| m + std * z)
        .collect();
    Ok((next, trans))
}

/// `log N(a_next | mu, var * I)`.
pub fn transition_logpdf(a_next: &[f64], trans: &TransitionGaussian) -> Result<f64> {
    check_len("transition logpdf", trans.mu.len(), a_next.len())?;
    if !(trans.var > 0.0) {
        return Err(Error::DegenerateDensity {
            context: "transition logpdf".into(),
            var: trans.var,
        });
    }
    let d = a_next.len() as f64;
    let sq: f64 = a_next
        .iter()
        .zip(&trans.mu)
        .map(|(x, m)| (x - m).powi(2))
        .sum();
    Ok(-0.5 * d * (2.0 * std::f64::consts::PI * trans.var).ln() - sq / (2.0 * trans.var))
}

fn check_steps(steps: usize) -> Result<()> {
    if steps == 0 {
        Err(Error::InvalidInput(
            "need at least one denoising step".into(),
        ))
    } else {
        Ok(())
    }
}

/// Draws `A^0 ~ N(0, I)` and chains `steps` Euler–Maruyama transitions.
///
/// Randomness is consumed in a fixed order: the initial block first, then one
/// noise array per step.
#[allow(clippy::too_many_arguments)]
pub fn sample_block_sde(
    net: &VelocityNet,
    params: &ParamVector,
    s: &[f64],
    steps: usize,
    horizon: usize,
    action_dim: usize,
    schedule: &NoiseSchedule,
    rng: &mut RngStream,
) -> Result<DenoisingTrajectory> {
    check_steps(steps)?;
    let dim = horizon * action_dim;
    check_len("sampled block", net.output_dim(), dim)?;
    let delta = 1.0 / steps as f64;
    let mut states = Vec::with_capacity(steps + 1);
    let mut noises = Vec::with_capacity(steps);
    let mut logp_terms = Vec::with_capacity(steps);
    states.push(rng.gaussian_vec(dim));
    for k in 0..steps {
        let tau = grid_tau(k, steps);
        let noise = rng.gaussian_vec(dim);
        let (next, trans) = em_step(net, params, &states[k], s, tau, delta, schedule, &noise)?;
        let logp = if trans.var > 0.0 {
            transition_logpdf(&next, &trans)?
        } else {
            f64::NAN
        };
        logp_terms.push(logp);
        noises.push(noise);
        states.push(next);
    }
    Ok(DenoisingTrajectory {
        states,
        noises,
        delta,
        logp_terms,
        horizon,
        action_dim,
    })
}

/// Deterministic Euler integration from a given initial block. Returns all
/// intermediate states, `steps + 1` in total.
pub fn ode_path(
    net: &VelocityNet,
    params: &ParamVector,
    s: &[f64],
    a0: Vec<f64>,
    steps: usize,
) -> Result<Vec<Vec<f64>>> {
    check_steps(steps)?;
    let delta = 1.0 / steps as f64;
    let mut states = Vec::with_capacity(steps + 1);
    states.push(a0);
    for k in 0..steps {
        let next = ode_step(net, params, &states[k], s, grid_tau(k, steps), delta)?;
        states.push(next);
    }
    Ok(states)
}

/// ODE sampling: `A^0 ~ N(0, I)` drawn from `rng`, then [`ode_path`].
#[allow(clippy::too_many_arguments)]
pub fn sample_block_ode(
    net: &VelocityNet,
    params: &ParamVector,
    s: &[f64],
    steps: usize,
    horizon: usize,
    action_dim: usize,
    rng: &mut RngStream,
) -> Result<ActionBlock> {
    let dim = horizon * action_dim;
    check_len("sampled block", net.output_dim(), dim)?;
    let a0 = rng.gaussian_vec(dim);
    let mut states = ode_path(net, params, s, a0, steps)?;
    ActionBlock::new(horizon, action_dim, states.pop().expect("non-empty path"))
}

fn check_trajectory(traj: &DenoisingTrajectory) -> Result<()> {
    check_steps(traj.steps())?;
    check_len("trajectory states", traj.steps() + 1, traj.states.len())?;
    if (traj.delta * traj.steps() as f64 - 1.0).abs() > 1e-12 {
        return Err(Error::InvalidInput(format!(
            "trajectory delta {} inconsistent with {} steps",
            traj.delta,
            traj.steps()
        )));
    }
    Ok(())
}

/// Per-step transition log densities of a stored trajectory under `params`.
pub fn step_log_likelihoods(
    net: &VelocityNet,
    params: &ParamVector,
    traj: &DenoisingTrajectory,
    s: &[f64],
    schedule: &NoiseSchedule,
) -> Result<Vec<f64>> {
    check_trajectory(traj)?;
    (0..traj.steps())
        .map(|k| {
            let tau = traj.tau(k);
            let v = net.forward(params, &traj.states[k], s, tau)?;
            let trans = transition_from_velocity(&v, &traj.states[k], tau, traj.delta, schedule)?;
            transition_logpdf(&traj.states[k + 1], &trans).map_err(|e| match e {
                Error::DegenerateDensity { var, .. } => Error::DegenerateDensity {
                    context: format!("denoising step {k}"),
                    var,
                },
                other => other,
            })
        })
        .collect()
}

/// `log pi(A | s) = sum_k log N(A^{k+1} | mu_k, var_k)` for a stored chain.
pub fn block_log_likelihood(
    net: &VelocityNet,
    params: &ParamVector,
    traj: &DenoisingTrajectory,
    s: &[f64],
    schedule: &NoiseSchedule,
) -> Result<f64> {
    Ok(step_log_likelihoods(net, params, traj, s, schedule)?
        .iter()
        .sum())
}

/// Reverse-mode pass through the chain: accumulates
/// `sum_k weights[k] * d(log p_k)/d(params)` into `grad` and returns the
/// per-step log densities.
///
/// The derivative flows `log p_k -> mu_k -> drift -> v`; the stored states are
/// data, so nothing propagates between steps.
pub fn accumulate_step_logp_grads(
    net: &VelocityNet,
    params: &ParamVector,
    traj: &DenoisingTrajectory,
    s: &[f64],
    schedule: &NoiseSchedule,
    weights: &[f64],
    grad: &mut [f64],
) -> Result<Vec<f64>> {
    check_trajectory(traj)?;
    check_len("per-step weights", traj.steps(), weights.len())?;
    let mut logps = Vec::with_capacity(traj.steps());
    for k in 0..traj.steps() {
        let tau = traj.tau(k);
        let a = &traj.states[k];
        let next = &traj.states[k + 1];
        let trace = net.forward_trace(params, a, s, tau)?;
        let trans = transition_from_velocity(trace.output(), a, tau, traj.delta, schedule)?;
        if !(trans.var > 0.0) {
            return Err(Error::DegenerateDensity {
                context: format!("denoising step {k}"),
                var: trans.var,
            });
        }
        logps.push(transition_logpdf(next, &trans)?);
        if weights[k] == 0.0 {
            continue;
        }
        // d log p / d mu = (a_next - mu) / var; d mu / d drift = delta
        let d_drift: Vec<f64> = next
            .iter()
            .zip(&trans.mu)
            .map(|(x, m)| weights[k] * (x - m) / trans.var * traj.delta)
            .collect();
        let d_v = sde_drift_vjp_v(&d_drift, tau, schedule.sigma(tau));
        net.backward_trace(params, &trace, &d_v, grad, None)?;
    }
    Ok(logps)
}

/// Debug dump, one line per step: `k tau mu_norm var logp`.
pub fn write_trace<W: Write>(
    mut out: W,
    traj: &DenoisingTrajectory,
    schedule: &NoiseSchedule,
) -> Result<()> {
    for k in 0..traj.steps() {
        let tau = traj.tau(k);
        let sigma = schedule.sigma(tau);
        let var = sigma * sigma * traj.delta;
        let std = var.sqrt();
        let mu_norm = traj.states[k + 1]
            .iter()
            .zip(&traj.noises[k])
            .map(|(x, z)| (x - std * z).powi(2))
            .sum::<f64>()
            .sqrt();
        writeln!(out, "{k} {tau} {mu_norm} {var} {}", traj.logp_terms[k])?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::{finite_diff_grad, relative_l2_error, Activation};
    use proptest::prelude::*;

    /// Linear net whose output is the constant `bias`.
    fn constant_net(dim: usize, state_dim: usize, bias: &[f64]) -> (VelocityNet, ParamVector) {
        let net = VelocityNet::new(dim, state_dim, vec![], Activation::Identity);
        let mut p = net.zero_params();
        p.tensor_mut("l0.bias").unwrap().copy_from_slice(bias);
        (net, p)
    }

    fn random_net(dim: usize, state_dim: usize, seed: u64) -> (VelocityNet, ParamVector) {
        let net = VelocityNet::new(dim, state_dim, vec![16, 16], Activation::Tanh);
        let p = net.init_params(&mut RngStream::new(seed, 0));
        (net, p)
    }

    #[test]
    fn interpolate_endpoints_and_midpoint() {
        let x0 = [0.0, 0.0];
        let x1 = [2.0, 4.0];
        assert_eq!(interpolate(&x0, &x1, 0.0).unwrap(), x0.to_vec());
        assert_eq!(interpolate(&x0, &x1, 1.0).unwrap(), x1.to_vec());
        assert_eq!(interpolate(&x0, &x1, 0.5).unwrap(), vec![1.0, 2.0]);
        assert!(interpolate(&x0, &[1.0], 0.5).is_err());
    }

    proptest! {
        #[test]
        fn interpolation_stays_on_segment(
            x0 in proptest::collection::vec(-10.0f64..10.0, 4),
            x1 in proptest::collection::vec(-10.0f64..10.0, 4),
            t in 0.0f64..=1.0,
        ) {
            let norm = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
            let x = interpolate(&x0, &x1, t).unwrap();
            let lhs = norm(&x, &x0) + norm(&x, &x1);
            prop_assert!((lhs - norm(&x1, &x0)).abs() < 1e-9);
        }

        #[test]
        fn logpdf_is_translation_invariant(
            x in proptest::collection::vec(-3.0f64..3.0, 3),
            mu in proptest::collection::vec(-3.0f64..3.0, 3),
            shift in proptest::collection::vec(-5.0f64..5.0, 3),
            var in 0.01f64..4.0,
        ) {
            let base = transition_logpdf(&x, &TransitionGaussian { mu: mu.clone(), var }).unwrap();
            let xs: Vec<f64> = x.iter().zip(&shift).map(|(a, b)| a + b).collect();
            let ms: Vec<f64> = mu.iter().zip(&shift).map(|(a, b)| a + b).collect();
            let moved = transition_logpdf(&xs, &TransitionGaussian { mu: ms, var }).unwrap();
            prop_assert!((base - moved).abs() < 1e-9);
        }
    }

    #[test]
    fn cfm_target_cases() {
        assert_eq!(
            cfm_target(&[0.0, 0.0], &[1.5, -2.0]).unwrap(),
            vec![1.5, -2.0]
        );
        assert_eq!(
            cfm_target(&[0.7, 0.2], &[0.7, 0.2]).unwrap(),
            vec![0.0, 0.0]
        );
        assert_eq!(
            cfm_target(&[1.0, 1.0], &[3.0, 0.0]).unwrap(),
            vec![2.0, -1.0]
        );
    }

    #[test]
    fn cfm_loss_zero_for_perfect_constant_field() {
        let x0 = vec![0.3, -0.2, 1.0];
        let x1 = vec![1.0, 0.5, -0.5];
        let target = cfm_target(&x0, &x1).unwrap();
        let (net, p) = constant_net(3, 2, &target);
        let batch: Vec<CfmSample> = [0.0, 0.3, 0.9]
            .iter()
            .map(|&t| CfmSample {
                x0: x0.clone(),
                x1: x1.clone(),
                s: vec![0.1, 0.2],
                t,
            })
            .collect();
        assert_eq!(cfm_loss(&net, &p, &batch).unwrap(), 0.0);
    }

    #[test]
    fn cfm_loss_of_zero_net_is_mean_squared_target() {
        let net = VelocityNet::default_for(2, 1);
        let p = net.zero_params();
        let batch = vec![
            CfmSample {
                x0: vec![0.0, 0.0],
                x1: vec![1.0, 2.0],
                s: vec![0.0],
                t: 0.2,
            },
            CfmSample {
                x0: vec![0.0, 0.0],
                x1: vec![-3.0, 0.0],
                s: vec![1.0],
                t: 0.7,
            },
        ];
        assert!((cfm_loss(&net, &p, &batch).unwrap() - (5.0 + 9.0) / 2.0).abs() < 1e-15);
        assert!(cfm_loss(&net, &p, &[]).is_err());
    }

    fn random_batch(rng: &mut RngStream, n: usize, dim: usize, state_dim: usize) -> Vec<CfmSample> {
        (0..n)
            .map(|_| CfmSample {
                x0: rng.gaussian_vec(dim),
                x1: rng.gaussian_vec(dim),
                s: rng.gaussian_vec(state_dim),
                t: rng.uniform(),
            })
            .collect()
    }

    #[test]
    fn cfm_loss_matches_per_sample_loop() {
        let (net, p) = random_net(4, 3, 11);
        let batch = random_batch(&mut RngStream::new(11, 1), 9, 4, 3);
        let mut acc = 0.0;
        for smp in &batch {
            let mut xt = vec![0.0; 4];
            let mut err = 0.0;
            for j in 0..4 {
                xt[j] = smp.t * smp.x1[j] + (1.0 - smp.t) * smp.x0[j];
            }
            let v = net.forward(&p, &xt, &smp.s, smp.t).unwrap();
            for j in 0..4 {
                let u = smp.x1[j] - smp.x0[j];
                err += (v[j] - u) * (v[j] - u);
            }
            acc += err;
        }
        let want = acc / batch.len() as f64;
        let got = cfm_loss(&net, &p, &batch).unwrap();
        assert!((got - want).abs() < 1e-12 * want.max(1.0));
    }

    #[test]
    fn cfm_gradient_matches_finite_differences() {
        let (net, p) = random_net(4, 3, 12);
        let batch = random_batch(&mut RngStream::new(12, 1), 6, 4, 3);
        let mut g = vec![0.0; p.len()];
        let loss = cfm_loss_grad(&net, &p, &batch, 1.0, &mut g).unwrap();
        assert!((loss - cfm_loss(&net, &p, &batch).unwrap()).abs() < 1e-12);
        let fd = finite_diff_grad(|q| cfm_loss(&net, q, &batch).unwrap(), &p, 1e-6).unwrap();
        let err = relative_l2_error(&g, fd.values());
        assert!(err < 1e-4, "rel err {err}");
    }

    #[test]
    fn ode_step_zero_and_constant_velocity() {
        let (net, p) = constant_net(2, 1, &[0.0, 0.0]);
        assert_eq!(
            ode_step(&net, &p, &[0.4, -1.0], &[0.0], 0.3, 0.1).unwrap(),
            vec![0.4, -1.0]
        );
        let (net, p) = constant_net(2, 1, &[2.0, -1.0]);
        let out = ode_step(&net, &p, &[0.4, -1.0], &[0.0], 0.3, 0.25).unwrap();
        assert_eq!(out, vec![0.4 + 0.25 * 2.0, -1.0 - 0.25]);
    }

    #[test]
    fn ode_euler_is_first_order() {
        // Richardson: successive differences shrink by ~2 for a first-order method.
        let (net, mut p) = random_net(3, 2, 21);
        p.scale(2.0);
        let s = [0.3, -0.6];
        let a0 = RngStream::new(21, 5).gaussian_vec(3);
        let finals: Vec<Vec<f64>> = [8, 16, 32]
            .iter()
            .map(|&k| {
                ode_path(&net, &p, &s, a0.clone(), k)
                    .unwrap()
                    .pop()
                    .unwrap()
            })
            .collect();
        let dist = |a: &[f64], b: &[f64]| {
            a.iter()
                .zip(b)
                .map(|(x, y)| (x - y).powi(2))
                .sum::<f64>()
                .sqrt()
        };
        let ratio = dist(&finals[0], &finals[1]) / dist(&finals[1], &finals[2]);
        assert!((1.6..2.5).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn drift_cases() {
        let v = [0.5, -1.0];
        let a = [2.0, 3.0];
        assert_eq!(sde_drift(&v, &a, 0.4, 0.0).unwrap(), v.to_vec());
        let d = sde_drift(&[1.0], &[2.0], 0.0, 0.1).unwrap();
        assert!((d[0] - 1.015).abs() < 1e-15);
        let tau = 0.3;
        let a_cancel: Vec<f64> = v.iter().map(|x| -(1.0 - tau) * x).collect();
        let d = sde_drift(&v, &a_cancel, tau, 0.7).unwrap();
        for (x, y) in d.iter().zip(&v) {
            assert!((x - y).abs() < 1e-15);
        }
        assert!(sde_drift(&v, &[1.0], 0.0, 0.1).is_err());
    }

    #[test]
    fn em_step_deterministic_limit_and_mean_path() {
        let (net, p) = random_net(3, 2, 31);
        let s = [0.2, 0.1];
        let a = [0.5, -0.5, 1.0];
        let noise = [0.3, -1.2, 2.0];
        let zero = NoiseSchedule::new(0.0).unwrap();
        let (next, trans) = em_step(&net, &p, &a, &s, 0.4, 0.1, &zero, &noise).unwrap();
        assert_eq!(next, ode_step(&net, &p, &a, &s, 0.4, 0.1).unwrap());
        assert_eq!(trans.var, 0.0);

        let sched = NoiseSchedule::default();
        let (next, trans) = em_step(&net, &p, &a, &s, 0.4, 0.1, &sched, &[0.0; 3]).unwrap();
        assert_eq!(next, trans.mu);
        assert!(em_step(&net, &p, &a, &s, 1.0, 0.1, &sched, &noise).is_err());
    }

    #[test]
    fn em_step_scalar_hand_value() {
        let (net, p) = constant_net(1, 1, &[1.0]);
        let sched = NoiseSchedule::new(0.1).unwrap();
        let (next, trans) = em_step(&net, &p, &[0.0], &[0.0], 0.0, 0.1, &sched, &[1.0]).unwrap();
        assert!((trans.mu[0] - 0.1005).abs() < 1e-15);
        assert!((trans.var - 0.001).abs() < 1e-18);
        assert!((next[0] - (0.1005 + 0.1 * 0.1f64.sqrt())).abs() < 1e-15);
        assert!((next[0] - 0.13212).abs() < 1e-5);
    }

    #[test]
    fn em_step_empirical_moments() {
        let (net, p) = random_net(1, 1, 41);
        let sched = NoiseSchedule::new(0.5).unwrap();
        let mut rng = RngStream::new(41, 9);
        let n = 100_000;
        let mut xs = Vec::with_capacity(n);
        let mut trans = None;
        for _ in 0..n {
            let z = [rng.gaussian()];
            let (x, t) = em_step(&net, &p, &[0.7], &[0.2], 0.2, 0.1, &sched, &z).unwrap();
            xs.push(x[0]);
            trans = Some(t);
        }
        let trans = trans.unwrap();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        let se_mean = (trans.var / n as f64).sqrt();
        let se_var = trans.var * (2.0 / n as f64).sqrt();
        assert!(
            (mean - trans.mu[0]).abs() < 3.0 * se_mean,
            "mean {mean} vs {}",
            trans.mu[0]
        );
        assert!(
            (var - trans.var).abs() < 3.0 * se_var,
            "var {var} vs {}",
            trans.var
        );
    }

    #[test]
    fn logpdf_standard_normal_at_mode() {
        let lp = transition_logpdf(
            &[0.0],
            &TransitionGaussian {
                mu: vec![0.0],
                var: 1.0,
            },
        )
        .unwrap();
        assert!((lp + 0.918_938_533_204_672_7).abs() < 1e-12);
        assert!(matches!(
            transition_logpdf(
                &[0.0],
                &TransitionGaussian {
                    mu: vec![0.0],
                    var: 0.0
                }
            ),
            Err(Error::DegenerateDensity { .. })
        ));
    }

    #[test]
    fn logpdf_matches_product_of_univariate_densities() {
        let mut rng = RngStream::new(4, 4);
        let x = rng.gaussian_vec(4);
        let mu = rng.gaussian_vec(4);
        let var = 0.37;
        let density: f64 = x
            .iter()
            .zip(&mu)
            .map(|(xi, mi)| {
                (-(xi - mi).powi(2) / (2.0 * var)).exp() / (2.0 * std::f64::consts::PI * var).sqrt()
            })
            .product();
        let lp = transition_logpdf(&x, &TransitionGaussian { mu, var }).unwrap();
        assert!((lp - density.ln()).abs() < 1e-12);
    }

    #[test]
    fn sde_with_zero_sigma_equals_ode() {
        let (net, p) = random_net(4, 2, 51);
        let s = [0.1, -0.3];
        let zero = NoiseSchedule::new(0.0).unwrap();
        for seed in 0..10 {
            let traj = sample_block_sde(&net, &p, &s, 5, 2, 2, &zero, &mut RngStream::new(seed, 0))
                .unwrap();
            let ode =
                sample_block_ode(&net, &p, &s, 5, 2, 2, &mut RngStream::new(seed, 0)).unwrap();
            assert_eq!(traj.final_block(), ode);
            assert!(traj.logp_terms.iter().all(|x| x.is_nan()));
        }
    }

    #[test]
    fn sde_sampling_is_reproducible_and_self_consistent() {
        let (net, p) = random_net(6, 2, 61);
        let s = [0.5, 0.5];
        let sched = NoiseSchedule::default();
        let t1 =
            sample_block_sde(&net, &p, &s, 10, 3, 2, &sched, &mut RngStream::new(9, 3)).unwrap();
        let t2 =
            sample_block_sde(&net, &p, &s, 10, 3, 2, &sched, &mut RngStream::new(9, 3)).unwrap();
        assert_eq!(t1, t2);
        assert_eq!(t1.steps(), 10);
        assert_eq!(t1.states.len(), 11);
        let recomputed = block_log_likelihood(&net, &p, &t1, &s, &sched).unwrap();
        assert!((recomputed - t1.total_logp()).abs() < 1e-9 * recomputed.abs().max(1.0));
    }

    #[test]
    fn single_step_likelihood_is_one_transition() {
        let (net, p) = random_net(1, 1, 71);
        let sched = NoiseSchedule::new(0.3).unwrap();
        let traj =
            sample_block_sde(&net, &p, &[0.4], 1, 1, 1, &sched, &mut RngStream::new(1, 1)).unwrap();
        let v = net.forward(&p, &traj.states[0], &[0.4], 0.0).unwrap();
        let trans = transition_from_velocity(&v, &traj.states[0], 0.0, 1.0, &sched).unwrap();
        let want = transition_logpdf(&traj.states[1], &trans).unwrap();
        assert_eq!(
            block_log_likelihood(&net, &p, &traj, &[0.4], &sched).unwrap(),
            want
        );
    }

    #[test]
    fn likelihood_gradient_matches_finite_differences() {
        let (net, p) = random_net(4, 2, 81);
        let s = [0.2, -0.7];
        let sched = NoiseSchedule::new(0.5).unwrap();
        let traj =
            sample_block_sde(&net, &p, &s, 4, 2, 2, &sched, &mut RngStream::new(8, 1)).unwrap();
        let mut g = vec![0.0; p.len()];
        accumulate_step_logp_grads(&net, &p, &traj, &s, &sched, &[1.0; 4], &mut g).unwrap();
        let fd = finite_diff_grad(
            |q| block_log_likelihood(&net, q, &traj, &s, &sched).unwrap(),
            &p,
            1e-6,
        )
        .unwrap();
        let err = relative_l2_error(&g, fd.values());
        assert!(err < 1e-4, "rel err {err}");
    }

    #[test]
    fn every_grid_step_has_positive_variance() {
        for k_steps in [1usize, 2, 10, 50] {
            let sched = NoiseSchedule::new(0.1).unwrap();
            let delta = 1.0 / k_steps as f64;
            let min_var = (0..k_steps)
                .map(|k| sched.sigma(grid_tau(k, k_steps)).powi(2) * delta)
                .fold(f64::INFINITY, f64::min);
            let expected = (0.1 / k_steps as f64).powi(2) / k_steps as f64;
            assert!(min_var > 0.0);
            assert!((min_var - expected).abs() < 1e-12 * expected.max(1e-300) + 1e-300);
        }
    }

    #[test]
    fn trace_lines_have_five_fields() {
        let (net, p) = random_net(2, 1, 91);
        let sched = NoiseSchedule::default();
        let traj =
            sample_block_sde(&net, &p, &[0.0], 3, 1, 2, &sched, &mut RngStream::new(0, 0)).unwrap();
        let mut buf = Vec::new();
        write_trace(&mut buf, &traj, &sched).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        for (k, line) in lines.iter().enumerate() {
            let fields: Vec<f64> = line.split(' ').map(|f| f.parse().unwrap()).collect();
            assert_eq!(fields.len(), 5);
            assert_eq!(fields[0], k as f64);
            assert_eq!(fields[4], traj.logp_terms[k]);
        }
    }
}
