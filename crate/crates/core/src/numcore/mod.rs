//! Deterministic numeric substrate shared by every other module.

pub mod checkpoint;
pub mod gradcheck;
pub mod net;
pub mod params;
pub mod rng;

pub use checkpoint::{
    load_checkpoint, read_checkpoint, save_checkpoint, write_atomic, write_checkpoint,
};
pub use gradcheck::{finite_diff_grad, relative_l2_error};
pub use net::{time_embedding, Activation, ForwardTrace, NetGrad, VelocityNet, TIME_EMBED_DIM};
pub use params::{ParamVector, TensorDesc};
pub use rng::{gaussian_draw, RngStream};
