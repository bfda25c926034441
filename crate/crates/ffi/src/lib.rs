//! C ABI over the flowgspo policy library.
//!
//! Policies live behind the opaque [`FgPolicy`] handle. Every fallible
//! function returns an [`FgStatus`]; on failure a description of the error is
//! kept per thread and can be copied out with [`fg_last_error_message`].
//! Panics never cross the boundary and are reported as `FG_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use flowgspo::attention::{build_mask, SegmentLayout};
use flowgspo::flow::{sample_block_ode, sample_block_sde, NoiseSchedule};
use flowgspo::numcore::{
    load_checkpoint, save_checkpoint, Activation, ParamVector, RngStream, VelocityNet,
};
use flowgspo::policy_opt::group_advantages;
use flowgspo::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FgStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    DimensionMismatch = 3,
    Io = 4,
    Parse = 5,
    ShapeMismatch = 6,
    NonFinite = 7,
    DegenerateDensity = 8,
    Panic = 9,
    Other = 10,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FgActivation {
    Tanh = 0,
    Relu = 1,
    Identity = 2,
}

impl From<FgActivation> for Activation {
    fn from(a: FgActivation) -> Self {
        match a {
            FgActivation::Tanh => Activation::Tanh,
            FgActivation::Relu => Activation::Relu,
            FgActivation::Identity => Activation::Identity,
        }
    }
}

/// Velocity network, its parameters and the block shape it produces.
pub struct FgPolicy {
    net: VelocityNet,
    params: ParamVector,
    horizon: usize,
    action_dim: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn status_of(e: &Error) -> FgStatus {
    match e {
        Error::DimensionMismatch { .. } => FgStatus::DimensionMismatch,
        Error::InvalidInput(_) | Error::EpisodeDone => FgStatus::InvalidArgument,
        Error::DegenerateDensity { .. } => FgStatus::DegenerateDensity,
        Error::NonFinite(_) => FgStatus::NonFinite,
        Error::Parse { .. } => FgStatus::Parse,
        Error::ShapeMismatch(_) => FgStatus::ShapeMismatch,
        Error::Io(_) => FgStatus::Io,
        _ => FgStatus::Other,
    }
}

enum Failure {
    Null(&'static str),
    Lib(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

/// Runs `f`, translating errors and panics into a status code.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> FgStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            FgStatus::Ok
        }
        Ok(Err(Failure::Null(what))) => {
            set_error(format!("null pointer: {what}"));
            FgStatus::NullPointer
        }
        Ok(Err(Failure::Lib(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_error("internal panic".into());
            FgStatus::Panic
        }
    }
}

unsafe fn slice<'a, T>(ptr: *const T, len: usize, what: &'static str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if ptr.is_null() {
        return Err(Failure::Null(what));
    }
    Ok(std::slice::from_raw_parts(ptr, len))
}

unsafe fn slice_mut<'a, T>(
    ptr: *mut T,
    len: usize,
    what: &'static str,
) -> Result<&'a mut [T], Failure> {
    if len == 0 {
        return Ok(&mut []);
    }
    if ptr.is_null() {
        return Err(Failure::Null(what));
    }
    Ok(std::slice::from_raw_parts_mut(ptr, len))
}

unsafe fn as_policy<'a>(ptr: *const FgPolicy) -> Result<&'a FgPolicy, Failure> {
    ptr.as_ref().ok_or(Failure::Null("policy"))
}

unsafe fn as_path<'a>(ptr: *const c_char) -> Result<&'a Path, Failure> {
    if ptr.is_null() {
        return Err(Failure::Null("path"));
    }
    let s = CStr::from_ptr(ptr)
        .to_str()
        .map_err(|_| Error::InvalidInput("path is not valid UTF-8".into()))?;
    Ok(Path::new(s))
}

#[allow(clippy::too_many_arguments)]
unsafe fn build_net(
    horizon: usize,
    action_dim: usize,
    state_dim: usize,
    hidden: *const usize,
    n_hidden: usize,
    activation: FgActivation,
) -> Result<VelocityNet, Failure> {
    if horizon == 0 || action_dim == 0 {
        return Err(Error::InvalidInput("horizon and action_dim must be positive".into()).into());
    }
    let hidden = slice(hidden, n_hidden, "hidden")?.to_vec();
    if hidden.contains(&0) {
        return Err(Error::InvalidInput("hidden widths must be positive".into()).into());
    }
    Ok(VelocityNet::new(
        horizon * action_dim,
        state_dim,
        hidden,
        activation.into(),
    ))
}

/// Creates a randomly initialized policy.
///
/// # Safety
/// `hidden` must point to `n_hidden` values and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fg_policy_new(
    horizon: usize,
    action_dim: usize,
    state_dim: usize,
    hidden: *const usize,
    n_hidden: usize,
    activation: FgActivation,
    seed: u64,
    out: *mut *mut FgPolicy,
) -> FgStatus {
    guard(|| {
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        let net = build_net(horizon, action_dim, state_dim, hidden, n_hidden, activation)?;
        let params = net.init_params(&mut RngStream::new(seed, 1));
        *out = Box::into_raw(Box::new(FgPolicy {
            net,
            params,
            horizon,
            action_dim,
        }));
        Ok(())
    })
}

/// Loads parameters from a checkpoint file into a network of the given shape.
///
/// # Safety
/// `path` must be a NUL-terminated string, `hidden` must point to `n_hidden`
/// values and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fg_policy_load(
    path: *const c_char,
    horizon: usize,
    action_dim: usize,
    state_dim: usize,
    hidden: *const usize,
    n_hidden: usize,
    activation: FgActivation,
    out: *mut *mut FgPolicy,
) -> FgStatus {
    guard(|| {
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        let net = build_net(horizon, action_dim, state_dim, hidden, n_hidden, activation)?;
        let params = load_checkpoint(as_path(path)?)?;
        net.check_params(&params)?;
        *out = Box::into_raw(Box::new(FgPolicy {
            net,
            params,
            horizon,
            action_dim,
        }));
        Ok(())
    })
}

/// # Safety
/// `policy` must come from this library; `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn fg_policy_save(policy: *const FgPolicy, path: *const c_char) -> FgStatus {
    guard(|| {
        let p = as_policy(policy)?;
        save_checkpoint(as_path(path)?, &p.params)?;
        Ok(())
    })
}

/// Releases a policy. Null is ignored.
///
/// # Safety
/// `policy` must come from this library and must not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn fg_policy_free(policy: *mut FgPolicy) {
    if !policy.is_null() {
        drop(Box::from_raw(policy));
    }
}

/// Number of parameters, or 0 for a null handle.
///
/// # Safety
/// `policy` must be null or come from this library.
#[no_mangle]
pub unsafe extern "C" fn fg_policy_num_params(policy: *const FgPolicy) -> usize {
    policy.as_ref().map_or(0, |p| p.params.len())
}

/// Length of one flattened action block, or 0 for a null handle.
///
/// # Safety
/// `policy` must be null or come from this library.
#[no_mangle]
pub unsafe extern "C" fn fg_policy_block_len(policy: *const FgPolicy) -> usize {
    policy.as_ref().map_or(0, |p| p.horizon * p.action_dim)
}

/// Evaluates the velocity field at one noisy block.
///
/// # Safety
/// Each pointer must reference at least its stated number of values.
#[no_mangle]
pub unsafe extern "C" fn fg_policy_velocity(
    policy: *const FgPolicy,
    block: *const f64,
    block_len: usize,
    state: *const f64,
    state_len: usize,
    tau: f64,
    out: *mut f64,
    out_len: usize,
) -> FgStatus {
    guard(|| {
        let p = as_policy(policy)?;
        let v = p.net.forward(
            &p.params,
            slice(block, block_len, "block")?,
            slice(state, state_len, "state")?,
            tau,
        )?;
        let out = slice_mut(out, out_len, "out")?;
        if out.len() != v.len() {
            return Err(Error::DimensionMismatch {
                context: "velocity output buffer",
                expected: v.len(),
                actual: out.len(),
            }
            .into());
        }
        out.copy_from_slice(&v);
        Ok(())
    })
}

/// Samples one action block. With `sigma_max > 0` the stochastic sampler is
/// used and its log-likelihood is written to `out_logp` when non-null; with
/// `sigma_max == 0` the deterministic sampler runs and `out_logp` gets NaN.
///
/// # Safety
/// Each pointer must reference at least its stated number of values;
/// `out_logp` may be null.
#[no_mangle]
pub unsafe extern "C" fn fg_policy_sample(
    policy: *const FgPolicy,
    state: *const f64,
    state_len: usize,
    steps: usize,
    sigma_max: f64,
    seed: u64,
    out_block: *mut f64,
    out_len: usize,
    out_logp: *mut f64,
) -> FgStatus {
    guard(|| {
        let p = as_policy(policy)?;
        let s = slice(state, state_len, "state")?;
        let out = slice_mut(out_block, out_len, "out_block")?;
        let mut rng = RngStream::new(seed, 0);
        let (block, logp) = if sigma_max > 0.0 {
            let schedule = NoiseSchedule::new(sigma_max)?;
            let traj = sample_block_sde(
                &p.net,
                &p.params,
                s,
                steps,
                p.horizon,
                p.action_dim,
                &schedule,
                &mut rng,
            )?;
            (traj.final_block(), traj.total_logp())
        } else if sigma_max == 0.0 {
            let block = sample_block_ode(
                &p.net,
                &p.params,
                s,
                steps,
                p.horizon,
                p.action_dim,
                &mut rng,
            )?;
            (block, f64::NAN)
        } else {
            return Err(
                Error::InvalidInput(format!("sigma_max must be >= 0, got {sigma_max}")).into(),
            );
        };
        if out.len() != block.as_flat().len() {
            return Err(Error::DimensionMismatch {
                context: "action block buffer",
                expected: block.as_flat().len(),
                actual: out.len(),
            }
            .into());
        }
        out.copy_from_slice(block.as_flat());
        if !out_logp.is_null() {
            *out_logp = logp;
        }
        Ok(())
    })
}

/// Group-standardized advantages `(r - mean) / (std + guard)`.
///
/// # Safety
/// `rewards` and `out` must each reference `n` values.
#[no_mangle]
pub unsafe extern "C" fn fg_group_advantages(
    rewards: *const f64,
    n: usize,
    guard_eps: f64,
    out: *mut f64,
) -> FgStatus {
    guard(|| {
        if n == 0 {
            return Err(Error::InvalidInput("empty group".into()).into());
        }
        let adv = group_advantages(slice(rewards, n, "rewards")?, guard_eps);
        slice_mut(out, n, "out")?.copy_from_slice(&adv);
        Ok(())
    })
}

/// Writes the block-wise causal attention mask row by row into `out`
/// (1 = query may attend to key). `out_len` must be the squared token count.
///
/// # Safety
/// `out` must reference `out_len` bytes.
#[no_mangle]
pub unsafe extern "C" fn fg_mask_build(
    n_spatial: usize,
    n_semantic: usize,
    n_action: usize,
    chunk_size: usize,
    out: *mut u8,
    out_len: usize,
) -> FgStatus {
    guard(|| {
        let mask = build_mask(&SegmentLayout::new(
            n_spatial, n_semantic, n_action, chunk_size,
        )?)?;
        let n = mask.size();
        let out = slice_mut(out, out_len, "out")?;
        if out.len() != n * n {
            return Err(Error::DimensionMismatch {
                context: "mask buffer",
                expected: n * n,
                actual: out.len(),
            }
            .into());
        }
        for q in 0..n {
            for (k, allowed) in mask.row(q).iter().enumerate() {
                out[q * n + k] = u8::from(*allowed);
            }
        }
        Ok(())
    })
}

/// Copies the calling thread's last error message, NUL-terminated and
/// truncated to fit, into `buf`. Returns the full message length without the
/// terminator, so a caller can size a buffer by passing `len = 0`.
///
/// # Safety
/// `buf` must reference `len` writable bytes or be null with `len = 0`.
#[no_mangle]
pub unsafe extern "C" fn fg_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            std::ptr::copy_nonoverlapping(msg.as_ptr().cast::<c_char>(), buf, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}
