//! Flat `key = value` run configuration.
//!
//! Blank lines and text after `#` are ignored. Every key is optional; missing
//! keys keep their defaults. Unknown keys and malformed values are rejected
//! with the offending line number.

use std::path::Path;
use std::str::FromStr;

use crate::attention::SegmentLayout;
use crate::env::{EnvMode, ACTION_DIM, OBS_DIM};
use crate::error::{Error, Result};
use crate::numcore::{Activation, VelocityNet};
use crate::trainer::{PretrainConfig, TrainConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub pretrain: PretrainConfig,
    pub layout: SegmentLayout,
    pub hidden_dims: Vec<usize>,
    pub activation: Activation,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            pretrain: PretrainConfig::default(),
            layout: SegmentLayout {
                n_spatial: 2,
                n_semantic: 2,
                n_action: 2,
                chunk_size: 1,
            },
            hidden_dims: vec![128, 128],
            activation: Activation::Tanh,
        }
    }
}

fn parse<T: FromStr>(line: usize, key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e| Error::Parse {
        line,
        message: format!("bad value `{value}` for `{key}`: {e}"),
    })
}

fn parse_bool(line: usize, key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Parse {
            line,
            message: format!("bad value `{value}` for `{key}`: expected true or false"),
        }),
    }
}

impl RunConfig {
    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content.split_once('=').ok_or_else(|| Error::Parse {
                line,
                message: format!("expected `key = value`, got `{content}`"),
            })?;
            cfg.set(line, key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::InvalidInput(format!("cannot read config {}: {e}", path.display()))
        })?;
        Self::parse_str(&text)
    }

    fn set(&mut self, line: usize, key: &str, v: &str) -> Result<()> {
        let t = &mut self.train;
        let p = &mut self.pretrain;
        match key {
            "seed" => t.seed = parse(line, key, v)?,
            "denoise_steps" => t.denoise_steps = parse(line, key, v)?,
            "horizon" => t.horizon = parse(line, key, v)?,
            "group_size" => t.gspo.group_size = parse(line, key, v)?,
            "lr" => t.lr = parse(line, key, v)?,
            "weight_decay" => t.weight_decay = parse(line, key, v)?,
            "rl_steps" => t.rl_steps = parse(line, key, v)?,
            "buffer_refresh" => t.buffer_refresh = parse(line, key, v)?,
            "sigma_max" => t.sigma_max = parse(line, key, v)?,
            "eval_episodes" => t.eval_episodes = parse(line, key, v)?,
            "grad_clip" => t.grad_clip = parse(line, key, v)?,
            "checkpoint_every" => t.checkpoint_every = parse(line, key, v)?,
            "log_wall_time" => t.log_wall_time = parse_bool(line, key, v)?,
            "clip_eps" => t.gspo.clip_eps = parse(line, key, v)?,
            "kl_beta" => t.gspo.kl_beta = parse(line, key, v)?,
            "gamma" => t.gspo.gamma = parse(line, key, v)?,
            "adv_guard" => t.gspo.adv_guard = parse(line, key, v)?,
            "success_radius" => t.env.success_radius = parse(line, key, v)?,
            "episode_limit" => t.env.episode_limit = parse(line, key, v)?,
            "action_scale" => t.env.action_scale = parse(line, key, v)?,
            "shaping_weight" => t.env.shaping_weight = parse(line, key, v)?,
            "target_bias_x" => t.env.target_bias[0] = parse(line, key, v)?,
            "target_bias_y" => t.env.target_bias[1] = parse(line, key, v)?,
            "mode" => t.env.mode = parse::<EnvMode>(line, key, v)?,
            "demos" => p.demos = parse(line, key, v)?,
            "sft_epochs" => p.epochs = parse(line, key, v)?,
            "sft_lr" => p.lr = parse(line, key, v)?,
            "sft_weight_decay" => p.weight_decay = parse(line, key, v)?,
            "sft_batch_size" => p.batch_size = parse(line, key, v)?,
            "demo_noise" => p.demo_noise = parse(line, key, v)?,
            "hidden_dims" => {
                self.hidden_dims = if v.is_empty() {
                    Vec::new()
                } else {
                    v.split(',')
                        .map(|d| parse(line, key, d.trim()))
                        .collect::<Result<_>>()?
                }
            }
            "activation" => self.activation = parse(line, key, v)?,
            "n_spatial" => self.layout.n_spatial = parse(line, key, v)?,
            "n_semantic" => self.layout.n_semantic = parse(line, key, v)?,
            "n_action" => self.layout.n_action = parse(line, key, v)?,
            "chunk_size" => self.layout.chunk_size = parse(line, key, v)?,
            _ => {
                return Err(Error::Parse {
                    line,
                    message: format!("unknown key `{key}`"),
                })
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.layout.validate()?;
        if self.pretrain.demos == 0 || self.pretrain.batch_size == 0 {
            return Err(Error::InvalidInput(
                "demos and sft_batch_size must be positive".into(),
            ));
        }
        if self.hidden_dims.contains(&0) {
            return Err(Error::InvalidInput(
                "hidden layer widths must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Network whose input is a flattened action block, the observation and
    /// the time embedding.
    pub fn net(&self) -> VelocityNet {
        VelocityNet::new(
            self.train.horizon * ACTION_DIM,
            OBS_DIM,
            self.hidden_dims.clone(),
            self.activation,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_gives_defaults() {
        assert_eq!(
            RunConfig::parse_str("# nothing\n\n").unwrap(),
            RunConfig::default()
        );
    }

    #[test]
    fn keys_and_comments() {
        let cfg = RunConfig::parse_str(
            "seed = 7  # root seed\nlr=3e-5\nhidden_dims = 16, 8\nmode = shifted\nlog_wall_time = true\nactivation = relu\n",
        )
        .unwrap();
        assert_eq!(cfg.train.seed, 7);
        assert_eq!(cfg.train.lr, 3e-5);
        assert_eq!(cfg.hidden_dims, vec![16, 8]);
        assert_eq!(cfg.train.env.mode, EnvMode::Shifted);
        assert!(cfg.train.log_wall_time);
        assert_eq!(cfg.activation, Activation::Relu);
    }

    #[test]
    fn errors_carry_line_numbers() {
        let e = RunConfig::parse_str("seed = 1\n\nbogus = 3\n").unwrap_err();
        assert!(matches!(e, Error::Parse { line: 3, .. }), "{e}");
        let e = RunConfig::parse_str("lr = fast\n").unwrap_err();
        assert!(matches!(e, Error::Parse { line: 1, .. }), "{e}");
        let e = RunConfig::parse_str("seed 1\n").unwrap_err();
        assert!(matches!(e, Error::Parse { line: 1, .. }), "{e}");
    }

    #[test]
    fn semantic_validation() {
        assert!(RunConfig::parse_str("denoise_steps = 0\n").is_err());
        assert!(RunConfig::parse_str("n_action = 3\nchunk_size = 2\n").is_err());
        assert!(RunConfig::parse_str("group_size = 1\n").is_err());
    }
}
