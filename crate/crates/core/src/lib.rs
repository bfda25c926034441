//! Stochastic flow-matching action policies optimized with a block-level,
//! group-relative clipped objective (Flow-GSPO).
//!
//! The crate is organised bottom-up:
//!
//! - [`numcore`]: seeded RNG streams, flat parameter vectors, the MLP velocity
//!   field with exact reverse-mode gradients, finite-difference oracles and the
//!   checkpoint format.
//! - [`flow`]: rectified-flow interpolation, the CFM loss, ODE and
//!   Euler–Maruyama samplers and Gaussian transition densities.
//! - [`policy_opt`]: group advantages, block-level importance ratios, the
//!   clipped Flow-GSPO surrogate with its KL term, gradients, and a per-step
//!   GRPO-style baseline.
//! - [`attention`]: block-wise causal masks and masked scaled dot-product
//!   attention.
//! - [`env`]: a 2D point-mass reaching task.
//! - [`trainer`]: CFM pretraining, online RL and evaluation.
//! - [`cli`]: config parsing and subcommands behind the `flowgspo` binary.

// `!(x > 0.0)` is used on purpose so NaN fails validation; index loops read
// closer to the math in the numeric kernels.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod attention;
pub mod cli;
pub mod env;
pub mod error;
pub mod flow;
pub mod numcore;
pub mod policy_opt;
pub mod trainer;

pub use error::{Error, Result};
