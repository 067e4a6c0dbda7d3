//! C ABI over `zoft`.
//!
//! Every function returns a [`ZoftStatus`]; on failure the message is kept
//! per thread and read with [`zoft_last_error`]. Handles are opaque and must
//! be released with the matching `*_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Arc;

use zoft::bounds::{blockwise_bound, mezo_bound, optimal_scales, BoundInputs};
use zoft::paramspace::{perturb_in_place, sample_block_noise};
use zoft::testbeds::make_rank_family;
use zoft::zo::{normalize_scales, run_trajectory, Mode, ScalePolicy, ZoConfig};
use zoft::{BlockPartition, Error, NoiseSeed, Objective, ParamVector, PerturbScales, PertNNInput, PertNNParams, QuadraticTask};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ZoftStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    PartitionMismatch = 3,
    Numeric = 4,
    Checkpoint = 5,
    Diverged = 6,
    Panic = 7,
}

/// Named contiguous blocks over a flat parameter vector.
pub struct ZoftPartition(Arc<BlockPartition>);

/// Per-block perturbation network.
pub struct ZoftPertNN(PertNNParams);

/// Block-diagonal quadratic testbed.
pub struct ZoftQuadratic(QuadraticTask);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> ZoftStatus {
    match e {
        Error::InvalidPartition(_) | Error::PartitionMismatch { .. } | Error::BlockIndex { .. } => {
            ZoftStatus::PartitionMismatch
        }
        Error::NumericOverflow { .. } | Error::NonFiniteLoss { .. } | Error::PertNN { .. } => ZoftStatus::Numeric,
        Error::Divergence { .. } => ZoftStatus::Diverged,
        Error::Checkpoint(_) => ZoftStatus::Checkpoint,
        _ => ZoftStatus::InvalidArgument,
    }
}

struct Fail(ZoftStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> ZoftStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            ZoftStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("panic inside zoft".into());
            ZoftStatus::Panic
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(ZoftStatus::NullPointer, format!("{what} is null"))
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut<'a, T>(p: *mut T, len: usize, what: &str) -> Result<&'a mut [T], Fail> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn out<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn path<'a>(p: *const c_char) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null("path"));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(ZoftStatus::InvalidArgument, "path is not UTF-8".into()))
}

fn expect_len(actual: usize, expected: usize, what: &'static str) -> Result<(), Fail> {
    if actual == expected {
        Ok(())
    } else {
        Err(Error::PartitionMismatch { what, expected, actual }.into())
    }
}

/// Message of the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn zoft_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// # Safety
/// `sizes` must point to `n` readable values and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn zoft_partition_new(sizes: *const usize, n: usize, out_partition: *mut *mut ZoftPartition) -> ZoftStatus {
    guard(|| {
        let sizes = slice(sizes, n, "sizes")?;
        let slot = out(out_partition, "out_partition")?;
        let p = BlockPartition::from_sizes(sizes)?;
        *slot = Box::into_raw(Box::new(ZoftPartition(Arc::new(p))));
        Ok(())
    })
}

/// # Safety
/// `partition` must come from [`zoft_partition_new`] and not be freed yet, or be null.
#[no_mangle]
pub unsafe extern "C" fn zoft_partition_free(partition: *mut ZoftPartition) {
    if !partition.is_null() {
        drop(Box::from_raw(partition));
    }
}

/// Total dimension; 0 for a null handle.
///
/// # Safety
/// `partition` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn zoft_partition_dim(partition: *const ZoftPartition) -> usize {
    partition.as_ref().map_or(0, |p| p.0.total())
}

/// Number of blocks; 0 for a null handle.
///
/// # Safety
/// `partition` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn zoft_partition_blocks(partition: *const ZoftPartition) -> usize {
    partition.as_ref().map_or(0, |p| p.0.len())
}

/// Rescales `raw` (one std per block) onto the variance budget.
///
/// # Safety
/// `raw` and `out_scales` must each hold `n` values.
#[no_mangle]
pub unsafe extern "C" fn zoft_normalize_scales(
    partition: *const ZoftPartition,
    raw: *const f64,
    out_scales: *mut f64,
    n: usize,
) -> ZoftStatus {
    guard(|| {
        let p = handle(partition, "partition")?;
        let raw = slice(raw, n, "raw")?;
        let dst = slice_mut(out_scales, n, "out_scales")?;
        let s = normalize_scales(&p.0, &PerturbScales::new(raw.to_vec())?)?;
        dst.copy_from_slice(s.stds());
        Ok(())
    })
}

/// Writes the seeded perturbation `u|block i = s_i z` into `out_noise`.
///
/// # Safety
/// `scales` holds one value per block; `out_noise` holds `dim` values.
#[no_mangle]
pub unsafe extern "C" fn zoft_sample_noise(
    partition: *const ZoftPartition,
    scales: *const f64,
    blocks: usize,
    seed: u64,
    stream: u64,
    out_noise: *mut f64,
    dim: usize,
) -> ZoftStatus {
    guard(|| {
        let p = handle(partition, "partition")?;
        let s = PerturbScales::new_allow_zero(slice(scales, blocks, "scales")?.to_vec())?;
        let dst = slice_mut(out_noise, dim, "out_noise")?;
        expect_len(dim, p.0.total(), "noise")?;
        dst.copy_from_slice(&sample_block_noise(&p.0, &s, NoiseSeed::new(seed, stream))?);
        Ok(())
    })
}

/// `theta <- theta + step * u(seed, stream, scales)`.
///
/// # Safety
/// `theta` holds `dim` values; `scales` holds one value per block.
#[no_mangle]
pub unsafe extern "C" fn zoft_perturb_in_place(
    partition: *const ZoftPartition,
    theta: *mut f64,
    dim: usize,
    scales: *const f64,
    blocks: usize,
    seed: u64,
    stream: u64,
    step: f64,
) -> ZoftStatus {
    guard(|| {
        let p = handle(partition, "partition")?;
        let s = PerturbScales::new_allow_zero(slice(scales, blocks, "scales")?.to_vec())?;
        let values = slice_mut(theta, dim, "theta")?;
        let mut v = ParamVector::new(Arc::clone(&p.0), values.to_vec())?;
        perturb_in_place(&mut v, &s, NoiseSeed::new(seed, stream), step)?;
        values.copy_from_slice(v.values());
        Ok(())
    })
}

/// Random initialization whose outputs start near 1.
///
/// # Safety
/// `partition` must be live; `out_net` must be writable.
#[no_mangle]
pub unsafe extern "C" fn zoft_pertnn_init(
    partition: *const ZoftPartition,
    hidden: usize,
    seed: u64,
    out_net: *mut *mut ZoftPertNN,
) -> ZoftStatus {
    guard(|| {
        let p = handle(partition, "partition")?;
        let slot = out(out_net, "out_net")?;
        let nn = PertNNParams::init(&p.0, hidden, NoiseSeed::new(seed, 0))?;
        *slot = Box::into_raw(Box::new(ZoftPertNN(nn)));
        Ok(())
    })
}

/// # Safety
/// `path` must be a NUL-terminated UTF-8 string; `out_net` must be writable.
#[no_mangle]
pub unsafe extern "C" fn zoft_pertnn_load(path_utf8: *const c_char, out_net: *mut *mut ZoftPertNN) -> ZoftStatus {
    guard(|| {
        let path = path(path_utf8)?;
        let slot = out(out_net, "out_net")?;
        let nn = PertNNParams::load(path).map_err(Error::from)?;
        *slot = Box::into_raw(Box::new(ZoftPertNN(nn)));
        Ok(())
    })
}

/// # Safety
/// `net` must be live; `path` must be a NUL-terminated UTF-8 string.
#[no_mangle]
pub unsafe extern "C" fn zoft_pertnn_save(net: *const ZoftPertNN, path_utf8: *const c_char) -> ZoftStatus {
    guard(|| {
        let nn = handle(net, "net")?;
        let path = path(path_utf8)?;
        nn.0.save(path).map_err(Error::from)?;
        Ok(())
    })
}

/// # Safety
/// `net` must come from an init or load call and not be freed yet, or be null.
#[no_mangle]
pub unsafe extern "C" fn zoft_pertnn_free(net: *mut ZoftPertNN) {
    if !net.is_null() {
        drop(Box::from_raw(net));
    }
}

/// Raw scale for `block` from the five features
/// `(loss_plus, loss_minus, prev_scale, mean, var)`.
///
/// # Safety
/// `features` holds 5 values; `out_scale` must be writable.
#[no_mangle]
pub unsafe extern "C" fn zoft_pertnn_forward(
    net: *const ZoftPertNN,
    block: usize,
    features: *const f64,
    out_scale: *mut f64,
) -> ZoftStatus {
    guard(|| {
        let nn = handle(net, "net")?;
        let x = slice(features, zoft::pertnn::FEATURES, "features")?;
        let slot = out(out_scale, "out_scale")?;
        let mut arr = [0.0; zoft::pertnn::FEATURES];
        arr.copy_from_slice(x);
        *slot = nn.0.forward(PertNNInput::from_array(arr), block)?.0;
        Ok(())
    })
}

/// Quadratic with per-block rank profile; optimum at 0, start at all ones.
///
/// # Safety
/// `sizes`, `ranks` and `opnorms` each hold `n` values; `out_task` must be writable.
#[no_mangle]
pub unsafe extern "C" fn zoft_quadratic_rank_family(
    sizes: *const usize,
    ranks: *const f64,
    opnorms: *const f64,
    n: usize,
    out_task: *mut *mut ZoftQuadratic,
) -> ZoftStatus {
    guard(|| {
        let sizes = slice(sizes, n, "sizes")?;
        let ranks = slice(ranks, n, "ranks")?;
        let opnorms = slice(opnorms, n, "opnorms")?;
        let slot = out(out_task, "out_task")?;
        let task = make_rank_family(sizes, ranks, opnorms)?;
        *slot = Box::into_raw(Box::new(ZoftQuadratic(task)));
        Ok(())
    })
}

/// # Safety
/// `task` must come from [`zoft_quadratic_rank_family`] and not be freed yet, or be null.
#[no_mangle]
pub unsafe extern "C" fn zoft_quadratic_free(task: *mut ZoftQuadratic) {
    if !task.is_null() {
        drop(Box::from_raw(task));
    }
}

/// Dimension of the task; 0 for a null handle.
///
/// # Safety
/// `task` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn zoft_quadratic_dim(task: *const ZoftQuadratic) -> usize {
    task.as_ref().map_or(0, |t| t.0.partition().total())
}

/// Exact (noise-free) loss at `theta`.
///
/// # Safety
/// `theta` holds `dim` values; `out_loss` must be writable.
#[no_mangle]
pub unsafe extern "C" fn zoft_quadratic_loss(
    task: *const ZoftQuadratic,
    theta: *const f64,
    dim: usize,
    out_loss: *mut f64,
) -> ZoftStatus {
    guard(|| {
        let t = handle(task, "task")?;
        let theta = slice(theta, dim, "theta")?;
        let slot = out(out_loss, "out_loss")?;
        expect_len(dim, t.0.partition().total(), "theta")?;
        *slot = t.0.exact_loss(theta);
        Ok(())
    })
}

/// Runs `steps` ZO-SGD steps from the task's initial point and writes the
/// pre-update loss of each step into `out_losses`. A null `net` selects
/// unit scales (MeZO). Returns `ZOFT_STATUS_DIVERGED` when the guard trips;
/// the losses recorded up to that point are still written.
///
/// # Safety
/// `out_losses` holds `steps` values.
#[no_mangle]
pub unsafe extern "C" fn zoft_finetune(
    task: *const ZoftQuadratic,
    net: *const ZoftPertNN,
    learning_rate: f64,
    steps: usize,
    seed: u64,
    out_losses: *mut f64,
) -> ZoftStatus {
    guard(|| {
        let t = handle(task, "task")?;
        let dst = slice_mut(out_losses, steps, "out_losses")?;
        let (mode, policy) = match net.as_ref() {
            None => (Mode::Mezo, ScalePolicy::Unit),
            Some(nn) => (Mode::FineTuner, ScalePolicy::Learned(&nn.0)),
        };
        let config = ZoConfig::new(mode, learning_rate, steps, seed);
        let traj = run_trajectory(&t.0, &config, policy)?;
        dst.fill(f64::NAN);
        for (d, r) in dst.iter_mut().zip(&traj.records) {
            *d = r.loss;
        }
        match traj.stopped {
            Some(e) => Err(e.into()),
            None => Ok(()),
        }
    })
}

/// Descent bounds at `theta` for step size `eta`.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ZoftBounds {
    pub mezo: f64,
    pub blockwise_unit: f64,
    pub blockwise_optimal: f64,
}

/// # Safety
/// `theta` holds `dim` values; `out_bounds` must be writable.
#[no_mangle]
pub unsafe extern "C" fn zoft_bounds(
    task: *const ZoftQuadratic,
    theta: *const f64,
    dim: usize,
    eta: f64,
    out_bounds: *mut ZoftBounds,
) -> ZoftStatus {
    guard(|| {
        let t = handle(task, "task")?;
        let theta = slice(theta, dim, "theta")?;
        let slot = out(out_bounds, "out_bounds")?;
        let inputs = BoundInputs::from_task(&t.0, theta, eta)?;
        let unit = vec![1.0; inputs.block_sizes.len()];
        let optimal = match optimal_scales(&inputs) {
            Ok(o) => o.bound,
            Err(Error::DegenerateBound(_)) => blockwise_bound(&inputs, &unit)?,
            Err(e) => return Err(e.into()),
        };
        *slot = ZoftBounds {
            mezo: mezo_bound(&inputs),
            blockwise_unit: blockwise_bound(&inputs, &unit)?,
            blockwise_optimal: optimal,
        };
        Ok(())
    })
}
