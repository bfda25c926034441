use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::flow::{cfm_loss_grad, CfmSample};
use crate::numcore::{ParamVector, RngStream, VelocityNet};

use super::optim::{clip_grad_norm, AdamW};
use super::{with_threads, Demo, STREAM_PRETRAIN};

pub const PRETRAIN_CSV_HEADER: &str = "epoch,loss,wall_ms";

/// Gradients are summed over fixed-size slices of a minibatch in slice order,
/// which keeps the result independent of the worker count.
const GRAD_CHUNK: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainConfig {
    pub demos: usize,
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// Per-component std of the noise the expert adds to its actions.
    pub demo_noise: f64,
    pub grad_clip: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            demos: 5000,
            epochs: 30,
            lr: 1e-3,
            weight_decay: 0.0,
            batch_size: 64,
            demo_noise: 0.1,
            grad_clip: 10.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub params: ParamVector,
    /// Mean minibatch loss per epoch.
    pub epoch_losses: Vec<f64>,
    pub epoch_wall_ms: Vec<u128>,
}

impl PretrainOutcome {
    pub fn csv(&self, log_wall_time: bool) -> String {
        let mut out = String::from(PRETRAIN_CSV_HEADER);
        out.push('\n');
        for (e, (loss, ms)) in self
            .epoch_losses
            .iter()
            .zip(&self.epoch_wall_ms)
            .enumerate()
        {
            let ms = if log_wall_time { *ms } else { 0 };
            out.push_str(&format!("{},{loss},{ms}\n", e + 1));
        }
        out
    }
}

/// Conditional flow matching on expert blocks. Each epoch visits every demo
/// once in a shuffled order; each visit draws a fresh noise block and time.
pub fn pretrain_cfm(
    net: &VelocityNet,
    params: ParamVector,
    demos: &[Demo],
    cfg: &PretrainConfig,
    seed: u64,
    threads: usize,
) -> Result<PretrainOutcome> {
    if demos.is_empty() {
        return Err(Error::InvalidInput(
            "pretraining needs at least one demonstration".into(),
        ));
    }
    if cfg.batch_size == 0 {
        return Err(Error::InvalidInput("batch_size must be positive".into()));
    }
    net.check_params(&params)?;
    let start = std::time::Instant::now();
    with_threads(threads, move |parallel| {
        let mut params = params;
        let mut opt = AdamW::new(params.len(), cfg.lr, cfg.weight_decay)?;
        let root = RngStream::new(seed, STREAM_PRETRAIN);
        let dim = net.output_dim();
        let mut order: Vec<usize> = (0..demos.len()).collect();
        let mut epoch_losses = Vec::with_capacity(cfg.epochs);
        let mut epoch_wall_ms = Vec::with_capacity(cfg.epochs);
        for epoch in 0..cfg.epochs {
            let mut rng = root.derive(epoch as u64);
            order.shuffle(&mut rng);
            let mut weighted = 0.0;
            for idx in order.chunks(cfg.batch_size) {
                let batch: Vec<CfmSample> = idx
                    .iter()
                    .map(|&i| CfmSample {
                        x0: rng.gaussian_vec(dim),
                        x1: demos[i].block.clone(),
                        s: demos[i].obs.to_vec(),
                        t: rng.uniform(),
                    })
                    .collect();
                let scale = 1.0 / batch.len() as f64;
                let run = |chunk: &[CfmSample]| -> Result<(f64, Vec<f64>)> {
                    let mut g = vec![0.0; params.len()];
                    let loss =
                        cfm_loss_grad(net, &params, chunk, chunk.len() as f64 * scale, &mut g)?;
                    Ok((loss * chunk.len() as f64, g))
                };
                let parts: Vec<(f64, Vec<f64>)> = if parallel {
                    batch
                        .par_chunks(GRAD_CHUNK)
                        .map(run)
                        .collect::<Result<_>>()?
                } else {
                    batch.chunks(GRAD_CHUNK).map(run).collect::<Result<_>>()?
                };
                let mut grad = vec![0.0; params.len()];
                for (loss, g) in parts {
                    weighted += loss;
                    grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
                }
                clip_grad_norm(&mut grad, cfg.grad_clip);
                opt.step(&mut params, &grad)?;
            }
            let loss = weighted / demos.len() as f64;
            if !loss.is_finite() || !params.is_finite() {
                return Err(Error::NonFinite(format!(
                    "CFM loss diverged at epoch {} (loss {loss})",
                    epoch + 1
                )));
            }
            epoch_losses.push(loss);
            epoch_wall_ms.push(start.elapsed().as_millis());
        }
        Ok(PretrainOutcome {
            params,
            epoch_losses,
            epoch_wall_ms,
        })
    })
}
