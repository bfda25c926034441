use crate::error::{check_len, Error, Result};
use crate::numcore::ParamVector;

/// Adam with decoupled weight decay.
///
/// Each step first shrinks the parameters by `lr * weight_decay`, then applies
/// the bias-corrected moment update to minimize the supplied gradient.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamW {
    pub fn new(num_params: usize, lr: f64, weight_decay: f64) -> Result<Self> {
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "learning rate must be finite and >= 0, got {lr}"
            )));
        }
        if !(weight_decay >= 0.0 && weight_decay.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "weight decay must be finite and >= 0, got {weight_decay}"
            )));
        }
        Ok(Self {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
            t: 0,
        })
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// One descent step on `grad`.
    pub fn step(&mut self, params: &mut ParamVector, grad: &[f64]) -> Result<()> {
        check_len("optimizer gradient", self.m.len(), grad.len())?;
        check_len("optimizer parameters", self.m.len(), params.len())?;
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let decay = 1.0 - self.lr * self.weight_decay;
        for (((p, g), m), v) in params
            .values_mut()
            .iter_mut()
            .zip(grad)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            *p *= decay;
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            *p -= self.lr * (*m / bc1) / ((*v / bc2).sqrt() + self.eps);
        }
        Ok(())
    }
}

/// Rescales `grad` in place so its L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grad: &mut [f64], max_norm: f64) -> f64 {
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let c = max_norm / norm;
        grad.iter_mut().for_each(|g| *g *= c);
    }
    norm
}
