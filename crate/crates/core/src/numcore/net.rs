//! MLP velocity field `v(a, s, tau)` with hand-written reverse mode.

use std::fmt;
use std::str::FromStr;

use super::params::{ParamVector, TensorDesc};
use super::rng::RngStream;
use crate::error::{check_len, Error, Result};

/// Width of the sinusoidal time embedding appended to every input.
pub const TIME_EMBED_DIM: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Relu,
    Identity,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
            Activation::Identity => z,
        }
    }

    /// Derivative expressed through the activation output `h`.
    fn grad_from_output(self, h: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - h * h,
            Activation::Relu => {
                if h > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::Tanh => "tanh",
            Activation::Relu => "relu",
            Activation::Identity => "identity",
        })
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tanh" => Ok(Activation::Tanh),
            "relu" => Ok(Activation::Relu),
            "identity" => Ok(Activation::Identity),
            other => Err(Error::InvalidInput(format!("unknown activation `{other}`"))),
        }
    }
}

/// Sinusoidal embedding of the denoising time: sin/cos pairs at frequencies
/// spaced geometrically from 1 to 10.
pub fn time_embedding(tau: f64) -> [f64; TIME_EMBED_DIM] {
    let pairs = TIME_EMBED_DIM / 2;
    let mut out = [0.0; TIME_EMBED_DIM];
    for i in 0..pairs {
        let freq = 10f64.powf(i as f64 / (pairs - 1) as f64);
        out[2 * i] = (freq * tau).sin();
        out[2 * i + 1] = (freq * tau).cos();
    }
    out
}

/// Architecture of the velocity network.
///
/// Input is `[a_flat, s, time_embedding(tau)]`, output has the length of
/// `a_flat`. Hidden layers use `activation`; the output layer is linear.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VelocityNet {
    action_dim: usize,
    state_dim: usize,
    hidden_dims: Vec<usize>,
    activation: Activation,
}

/// Layer activations recorded by [`VelocityNet::forward_trace`].
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// `acts[0]` is the network input, `acts[l]` the output of layer `l`.
    acts: Vec<Vec<f64>>,
}

impl ForwardTrace {
    pub fn output(&self) -> &[f64] {
        self.acts.last().expect("trace has at least the input")
    }
}

/// Gradients returned by [`VelocityNet::backward`].
#[derive(Debug, Clone)]
pub struct NetGrad {
    pub params: ParamVector,
    /// Gradient with respect to the flattened action input only.
    pub action_input: Vec<f64>,
}

impl VelocityNet {
    pub fn new(
        action_dim: usize,
        state_dim: usize,
        hidden_dims: Vec<usize>,
        activation: Activation,
    ) -> Self {
        Self {
            action_dim,
            state_dim,
            hidden_dims,
            activation,
        }
    }

    /// Two tanh hidden layers of width 128.
    pub fn default_for(action_dim: usize, state_dim: usize) -> Self {
        Self::new(action_dim, state_dim, vec![128, 128], Activation::Tanh)
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn hidden_dims(&self) -> &[usize] {
        &self.hidden_dims
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn input_dim(&self) -> usize {
        self.action_dim + self.state_dim + TIME_EMBED_DIM
    }

    pub fn output_dim(&self) -> usize {
        self.action_dim
    }

    fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_dims.len() + 2);
        dims.push(self.input_dim());
        dims.extend_from_slice(&self.hidden_dims);
        dims.push(self.output_dim());
        dims.windows(2).map(|w| (w[0], w[1])).collect()
    }

    /// Tensor layout: `l{i}.weight` as `[out, in]` row-major, then `l{i}.bias`.
    pub fn layout(&self) -> Vec<TensorDesc> {
        self.layer_dims()
            .iter()
            .enumerate()
            .flat_map(|(i, &(fan_in, fan_out))| {
                [
                    TensorDesc::new(format!("l{i}.weight"), vec![fan_out, fan_in]),
                    TensorDesc::new(format!("l{i}.bias"), vec![fan_out]),
                ]
            })
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.layer_dims().iter().map(|&(i, o)| i * o + o).sum()
    }

    pub fn zero_params(&self) -> ParamVector {
        ParamVector::zeros(self.layout())
    }

    /// Uniform in `±1/sqrt(fan_in)` for weights and biases alike.
    pub fn init_params(&self, rng: &mut RngStream) -> ParamVector {
        let mut values = Vec::with_capacity(self.num_params());
        for (fan_in, fan_out) in self.layer_dims() {
            let bound = 1.0 / (fan_in as f64).sqrt();
            for _ in 0..fan_in * fan_out + fan_out {
                values.push((2.0 * rng.uniform() - 1.0) * bound);
            }
        }
        ParamVector::new(self.layout(), values).expect("layout built from the same dims")
    }

    /// Checks that `params` has exactly this network's layout.
    pub fn check_params(&self, params: &ParamVector) -> Result<()> {
        if params.layout() == self.layout().as_slice() {
            Ok(())
        } else {
            Err(Error::ShapeMismatch(format!(
                "expected {} parameters in layout [{}], got [{}]",
                self.num_params(),
                describe(&self.layout()),
                describe(params.layout())
            )))
        }
    }

    fn assemble_input(
        &self,
        params: &ParamVector,
        a: &[f64],
        s: &[f64],
        tau: f64,
    ) -> Result<Vec<f64>> {
        check_len("velocity net parameters", self.num_params(), params.len())?;
        check_len("velocity net action input", self.action_dim, a.len())?;
        check_len("velocity net state input", self.state_dim, s.len())?;
        if !(0.0..1.0).contains(&tau) {
            return Err(Error::InvalidInput(format!(
                "tau must lie in [0, 1), got {tau}"
            )));
        }
        let mut x = Vec::with_capacity(self.input_dim());
        x.extend_from_slice(a);
        x.extend_from_slice(s);
        x.extend_from_slice(&time_embedding(tau));
        Ok(x)
    }

    /// Forward pass keeping every layer activation for a later backward pass.
    pub fn forward_trace(
        &self,
        params: &ParamVector,
        a: &[f64],
        s: &[f64],
        tau: f64,
    ) -> Result<ForwardTrace> {
        let input = self.assemble_input(params, a, s, tau)?;
        let w = params.values();
        let dims = self.layer_dims();
        let last = dims.len() - 1;
        let mut acts = Vec::with_capacity(dims.len() + 1);
        acts.push(input);
        let mut offset = 0;
        for (l, &(fan_in, fan_out)) in dims.iter().enumerate() {
            let weight = &w[offset..offset + fan_in * fan_out];
            let bias = &w[offset + fan_in * fan_out..offset + fan_in * fan_out + fan_out];
            offset += fan_in * fan_out + fan_out;
            let x = &acts[l];
            let out: Vec<f64> = (0..fan_out)
                .map(|i| {
                    let row = &weight[i * fan_in..(i + 1) * fan_in];
                    let z = bias[i] + row.iter().zip(x).map(|(wi, xi)| wi * xi).sum::<f64>();
                    if l == last {
                        z
                    } else {
                        self.activation.apply(z)
                    }
                })
                .collect();
            acts.push(out);
        }
        Ok(ForwardTrace { acts })
    }

    pub fn forward(
        &self,
        params: &ParamVector,
        a: &[f64],
        s: &[f64],
        tau: f64,
    ) -> Result<Vec<f64>> {
        let mut trace = self.forward_trace(params, a, s, tau)?;
        Ok(trace.acts.pop().expect("non-empty trace"))
    }

    /// Accumulates `scale * d<upstream, v>/d(params)` into `grad_params` and,
    /// if given, `d<upstream, v>/d(a)` into `grad_action`.
    pub fn backward_trace(
        &self,
        params: &ParamVector,
        trace: &ForwardTrace,
        upstream: &[f64],
        grad_params: &mut [f64],
        grad_action: Option<&mut [f64]>,
    ) -> Result<()> {
        check_len("velocity net upstream", self.output_dim(), upstream.len())?;
        check_len(
            "velocity net gradient buffer",
            self.num_params(),
            grad_params.len(),
        )?;
        let w = params.values();
        let dims = self.layer_dims();
        let offsets: Vec<usize> = dims
            .iter()
            .scan(0, |acc, &(i, o)| {
                let start = *acc;
                *acc += i * o + o;
                Some(start)
            })
            .collect();

        let mut delta = upstream.to_vec();
        for l in (0..dims.len()).rev() {
            let (fan_in, fan_out) = dims[l];
            let off = offsets[l];
            let x = &trace.acts[l];
            {
                let (gw, gb) = grad_params[off..off + fan_in * fan_out + fan_out]
                    .split_at_mut(fan_in * fan_out);
                for i in 0..fan_out {
                    let d = delta[i];
                    if d == 0.0 {
                        continue;
                    }
                    gb[i] += d;
                    for (g, xj) in gw[i * fan_in..(i + 1) * fan_in].iter_mut().zip(x) {
                        *g += d * xj;
                    }
                }
            }
            let need_input_grad = l > 0 || grad_action.is_some();
            if !need_input_grad {
                break;
            }
            let weight = &w[off..off + fan_in * fan_out];
            let mut dx = vec![0.0; fan_in];
            for i in 0..fan_out {
                let d = delta[i];
                if d == 0.0 {
                    continue;
                }
                for (acc, wij) in dx.iter_mut().zip(&weight[i * fan_in..(i + 1) * fan_in]) {
                    *acc += wij * d;
                }
            }
            if l > 0 {
                for (g, h) in dx.iter_mut().zip(x) {
                    *g *= self.activation.grad_from_output(*h);
                }
            }
            delta = dx;
        }
        if let Some(ga) = grad_action {
            check_len("velocity net action gradient", self.action_dim, ga.len())?;
            for (g, d) in ga.iter_mut().zip(&delta[..self.action_dim]) {
                *g += d;
            }
        }
        Ok(())
    }

    /// Exact gradients of `<upstream, v(a, s, tau)>`.
    pub fn backward(
        &self,
        params: &ParamVector,
        a: &[f64],
        s: &[f64],
        tau: f64,
        upstream: &[f64],
    ) -> Result<NetGrad> {
        let trace = self.forward_trace(params, a, s, tau)?;
        let mut grad = ParamVector::zeros_like(params);
        let mut action_input = vec![0.0; self.action_dim];
        self.backward_trace(
            params,
            &trace,
            upstream,
            grad.values_mut(),
            Some(&mut action_input),
        )?;
        Ok(NetGrad {
            params: grad,
            action_input,
        })
    }
}

fn describe(layout: &[TensorDesc]) -> String {
    layout
        .iter()
        .map(|d| d.to_string())
        .collect::<Vec<_>>()
        .join(", ")
}
