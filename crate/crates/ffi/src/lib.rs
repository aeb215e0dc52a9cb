//! C ABI for `mlora-core`.
//!
//! Conventions:
//!
//! * Every fallible function returns an [`MloraStatus`]; `MLORA_STATUS_OK`
//!   is zero. On failure a description is available from
//!   [`mlora_last_error`] on the same thread.
//! * Matrices are dense, row-major `double` buffers; the caller passes the
//!   dimensions and owns every buffer.
//! * Output buffers take an explicit length and are checked against it.
//! * Checkpoints are opaque handles created by [`mlora_checkpoint_load`] or
//!   [`mlora_train_json`] and released with [`mlora_checkpoint_free`].
//! * Panics never cross the boundary; they are reported as
//!   `MLORA_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;
use std::slice;

use mlora::adapters::{forward_diag, grad_adapters, AdapterPair, BaseLayer};
use mlora::checkpoint;
use mlora::linalg::Matrix;
use mlora::metrics::{aurac, log_aurac, RankAccuracyCurve};
use mlora::rank_weights::{compute_p, dylora_weights, lora_weights, RankSet, RankWeights, ScalingMode};
use mlora::train::{train_run, Checkpoint, ToyTask, TrainConfig};
use mlora::Error;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MloraStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    DimensionMismatch = 3,
    RankOutOfRange = 4,
    Io = 5,
    Format = 6,
    Divergence = 7,
    Panic = 8,
}

/// Per-rank multiplier `s_k`. Passed as `uint32_t` so that out-of-range
/// values from C are rejected instead of being undefined behaviour.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MloraScaling {
    Unit = 0,
    Inverse = 1,
    InverseSqrt = 2,
}

/// A trained or loaded checkpoint.
pub struct MloraCheckpoint {
    inner: Checkpoint,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).expect("interior NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Failure(MloraStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::DimensionMismatch { .. } => MloraStatus::DimensionMismatch,
            Error::RankOutOfRange { .. } => MloraStatus::RankOutOfRange,
            Error::Divergence { .. } => MloraStatus::Divergence,
            Error::Io(_) => MloraStatus::Io,
            Error::Format(_) | Error::Json(_) | Error::Csv { .. } => MloraStatus::Format,
            Error::InvalidRankSet(_) | Error::NegativeWeight { .. } | Error::InvalidArgument(_) => {
                MloraStatus::InvalidArgument
            }
        };
        Failure(status, e.to_string())
    }
}

type FfiResult<T> = std::result::Result<T, Failure>;

fn invalid(message: impl Into<String>) -> Failure {
    Failure(MloraStatus::InvalidArgument, message.into())
}

fn guard(body: impl FnOnce() -> FfiResult<()>) -> MloraStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => MloraStatus::Ok,
        Ok(Err(Failure(status, message))) => {
            set_last_error(message);
            status
        }
        Err(_) => {
            set_last_error("internal panic".into());
            MloraStatus::Panic
        }
    }
}

fn scaling(raw: u32) -> FfiResult<ScalingMode> {
    match raw {
        0 => Ok(ScalingMode::Unit),
        1 => Ok(ScalingMode::Inverse),
        2 => Ok(ScalingMode::InverseSqrt),
        other => Err(invalid(format!("unknown scaling mode {other}"))),
    }
}

/// # Safety
/// `ptr` must be null or valid for `len` reads.
unsafe fn input<'a, T>(ptr: *const T, len: usize, name: &str) -> FfiResult<&'a [T]> {
    if ptr.is_null() {
        return Err(Failure(MloraStatus::NullPointer, format!("{name} is null")));
    }
    Ok(slice::from_raw_parts(ptr, len))
}

/// # Safety
/// `ptr` must be null or valid for `len` writes.
unsafe fn output<'a, T>(ptr: *mut T, len: usize, name: &str) -> FfiResult<&'a mut [T]> {
    if ptr.is_null() {
        return Err(Failure(MloraStatus::NullPointer, format!("{name} is null")));
    }
    Ok(slice::from_raw_parts_mut(ptr, len))
}

fn dims(rows: usize, cols: usize, name: &str) -> FfiResult<usize> {
    if rows == 0 || cols == 0 {
        return Err(Failure(
            MloraStatus::DimensionMismatch,
            format!("{name} has an empty dimension"),
        ));
    }
    rows.checked_mul(cols)
        .ok_or_else(|| invalid(format!("{name} size overflows")))
}

/// # Safety
/// `ptr` must be null or valid for `rows * cols` reads.
unsafe fn matrix(ptr: *const f64, rows: usize, cols: usize, name: &str) -> FfiResult<Matrix> {
    let len = dims(rows, cols, name)?;
    Ok(Matrix::from_vec(rows, cols, input(ptr, len, name)?.to_vec())?)
}

fn copy_out(dst: &mut [f64], src: &[f64], name: &str) -> FfiResult<()> {
    if dst.len() != src.len() {
        return Err(Failure(
            MloraStatus::DimensionMismatch,
            format!("{name} holds {} values but {} are produced", dst.len(), src.len()),
        ));
    }
    dst.copy_from_slice(src);
    Ok(())
}

/// # Safety
/// `path` must be null or a NUL-terminated string.
unsafe fn path_arg<'a>(path: *const c_char) -> FfiResult<&'a Path> {
    if path.is_null() {
        return Err(Failure(MloraStatus::NullPointer, "path is null".into()));
    }
    let s = CStr::from_ptr(path)
        .to_str()
        .map_err(|_| invalid("path is not valid UTF-8"))?;
    Ok(Path::new(s))
}

/// Message describing the last failure on this thread, or null if none.
/// The pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn mlora_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Rank weights `P` for the rank set `ranks[0..n_ranks]` (strictly
/// ascending, within `1..=max_rank`). Writes `max_rank` values to `out`.
///
/// # Safety
/// `ranks` must be valid for `n_ranks` reads and `out` for `out_len` writes.
#[no_mangle]
pub unsafe extern "C" fn mlora_compute_p(
    ranks: *const usize,
    n_ranks: usize,
    max_rank: usize,
    scaling_mode: u32,
    out: *mut f64,
    out_len: usize,
) -> MloraStatus {
    guard(|| {
        let set = RankSet::new(input(ranks, n_ranks, "ranks")?.to_vec(), max_rank)?;
        let p = compute_p(&set, scaling(scaling_mode)?);
        copy_out(output(out, out_len, "out")?, p.as_slice(), "out")
    })
}

/// Weights that reproduce plain LoRA (`k == 0`) or the rank-`k` slice.
///
/// # Safety
/// `out` must be valid for `out_len` writes.
#[no_mangle]
pub unsafe extern "C" fn mlora_recovery_weights(
    k: usize,
    max_rank: usize,
    scaling_mode: u32,
    out: *mut f64,
    out_len: usize,
) -> MloraStatus {
    guard(|| {
        let mode = scaling(scaling_mode)?;
        let p = if k == 0 {
            lora_weights(max_rank, mode)?
        } else {
            dylora_weights(k, max_rank, mode)?
        };
        copy_out(output(out, out_len, "out")?, p.as_slice(), "out")
    })
}

/// Area under the rank-accuracy curve given by `len` points; with
/// `log_spaced` the ranks are placed at `log₂(rank)`.
///
/// # Safety
/// `ranks` and `scores` must be valid for `len` reads; `out` for one write.
#[no_mangle]
pub unsafe extern "C" fn mlora_aurac(
    ranks: *const usize,
    scores: *const f64,
    len: usize,
    log_spaced: bool,
    out: *mut f64,
) -> MloraStatus {
    guard(|| {
        let ranks = input(ranks, len, "ranks")?;
        let scores = input(scores, len, "scores")?;
        let curve = RankAccuracyCurve::new(ranks.iter().copied().zip(scores.iter().copied()).collect())?;
        let value = if log_spaced { log_aurac(&curve) } else { aurac(&curve) };
        output(out, 1, "out")?[0] = value;
        Ok(())
    })
}

/// `y = x·(W₀ + A·diag(p)·B)` with `x` `d×m`, `W₀` `m×n`, `A` `m×r`,
/// `B` `r×n`, `p` of length `r`; writes `d×n` values to `y`.
///
/// # Safety
/// Every pointer must be valid for the number of elements its shape implies.
#[no_mangle]
pub unsafe extern "C" fn mlora_forward_diag(
    x: *const f64,
    d: usize,
    m: usize,
    w0: *const f64,
    n: usize,
    a: *const f64,
    b: *const f64,
    r: usize,
    p: *const f64,
    y: *mut f64,
) -> MloraStatus {
    guard(|| {
        let x = matrix(x, d, m, "x")?;
        let layer = BaseLayer::new(matrix(w0, m, n, "w0")?);
        let ad = AdapterPair::new(matrix(a, m, r, "a")?, matrix(b, r, n, "b")?)?;
        let p = RankWeights::new(input(p, r, "p")?.to_vec());
        let out = forward_diag(&x, &layer, &ad, &p)?;
        copy_out(output(y, dims(d, n, "y")?, "y")?, out.as_slice(), "y")
    })
}

/// Adapter gradients for upstream weight gradient `delta` (`m×n`):
/// `grad_a = delta·Bᵀ·diag(p)` (`m×r`) and `grad_b = diag(p)·Aᵀ·delta` (`r×n`).
///
/// # Safety
/// Every pointer must be valid for the number of elements its shape implies.
#[no_mangle]
pub unsafe extern "C" fn mlora_grad_adapters(
    delta: *const f64,
    m: usize,
    n: usize,
    a: *const f64,
    b: *const f64,
    r: usize,
    p: *const f64,
    grad_a: *mut f64,
    grad_b: *mut f64,
) -> MloraStatus {
    guard(|| {
        let delta = matrix(delta, m, n, "delta")?;
        let ad = AdapterPair::new(matrix(a, m, r, "a")?, matrix(b, r, n, "b")?)?;
        let p = RankWeights::new(input(p, r, "p")?.to_vec());
        let g = grad_adapters(&delta, &ad, &p)?;
        copy_out(output(grad_a, m * r, "grad_a")?, g.grad_a.as_slice(), "grad_a")?;
        copy_out(output(grad_b, r * n, "grad_b")?, g.grad_b.as_slice(), "grad_b")
    })
}

/// # Safety
/// `out` must be valid for one write.
unsafe fn publish(out: *mut *mut MloraCheckpoint, ckpt: Checkpoint) -> FfiResult<()> {
    if out.is_null() {
        return Err(Failure(MloraStatus::NullPointer, "out is null".into()));
    }
    *out = Box::into_raw(Box::new(MloraCheckpoint { inner: ckpt }));
    Ok(())
}

/// # Safety
/// `handle` must be null or a live handle.
unsafe fn handle<'a>(handle: *const MloraCheckpoint) -> FfiResult<&'a Checkpoint> {
    handle
        .as_ref()
        .map(|h| &h.inner)
        .ok_or_else(|| Failure(MloraStatus::NullPointer, "checkpoint handle is null".into()))
}

/// Read a checkpoint file. On success `*out` receives a new handle.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` valid for one write.
#[no_mangle]
pub unsafe extern "C" fn mlora_checkpoint_load(path: *const c_char, out: *mut *mut MloraCheckpoint) -> MloraStatus {
    guard(|| {
        let ckpt = checkpoint::load(path_arg(path)?)?;
        publish(out, ckpt)
    })
}

/// Train from a JSON training configuration (the same document embedded in
/// checkpoint files). On success `*out` receives a new handle.
///
/// # Safety
/// `config_json` must be a NUL-terminated string and `out` valid for one write.
#[no_mangle]
pub unsafe extern "C" fn mlora_train_json(config_json: *const c_char, out: *mut *mut MloraCheckpoint) -> MloraStatus {
    guard(|| {
        if config_json.is_null() {
            return Err(Failure(MloraStatus::NullPointer, "config_json is null".into()));
        }
        let text = CStr::from_ptr(config_json)
            .to_str()
            .map_err(|_| invalid("config is not valid UTF-8"))?;
        let cfg: TrainConfig = serde_json::from_str(text).map_err(Error::from)?;
        cfg.validate()?;
        let task = ToyTask::generate(&cfg.task)?;
        publish(out, train_run(&cfg, &task)?)
    })
}

/// Write the checkpoint atomically to `path`.
///
/// # Safety
/// `ckpt` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn mlora_checkpoint_save(ckpt: *const MloraCheckpoint, path: *const c_char) -> MloraStatus {
    guard(|| Ok(checkpoint::save(handle(ckpt)?, path_arg(path)?)?))
}

/// Release a handle. Null is ignored.
///
/// # Safety
/// `ckpt` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn mlora_checkpoint_free(ckpt: *mut MloraCheckpoint) {
    if !ckpt.is_null() {
        drop(Box::from_raw(ckpt));
    }
}

/// Input dimension `m`, output dimension `n` and bottleneck `R`.
///
/// # Safety
/// `ckpt` must be a live handle; the outputs valid for one write each.
#[no_mangle]
pub unsafe extern "C" fn mlora_checkpoint_dims(
    ckpt: *const MloraCheckpoint,
    in_dim: *mut usize,
    out_dim: *mut usize,
    max_rank: *mut usize,
) -> MloraStatus {
    guard(|| {
        let c = handle(ckpt)?;
        output(in_dim, 1, "in_dim")?[0] = c.adapters.in_dim();
        output(out_dim, 1, "out_dim")?[0] = c.adapters.out_dim();
        output(max_rank, 1, "max_rank")?[0] = c.adapters.max_rank();
        Ok(())
    })
}

/// Deployment weight `W₀ + s_k·A_k·B_k`, `m×n` row-major.
///
/// # Safety
/// `ckpt` must be a live handle and `out` valid for `out_len` writes.
#[no_mangle]
pub unsafe extern "C" fn mlora_checkpoint_merge(
    ckpt: *const MloraCheckpoint,
    k: usize,
    out: *mut f64,
    out_len: usize,
) -> MloraStatus {
    guard(|| {
        let w = handle(ckpt)?.merged(k)?;
        copy_out(output(out, out_len, "out")?, w.as_slice(), "out")
    })
}

/// Rank weights implied by the checkpoint's training configuration
/// (`R` values).
///
/// # Safety
/// `ckpt` must be a live handle and `out` valid for `out_len` writes.
#[no_mangle]
pub unsafe extern "C" fn mlora_checkpoint_training_p(
    ckpt: *const MloraCheckpoint,
    out: *mut f64,
    out_len: usize,
) -> MloraStatus {
    guard(|| {
        let p = handle(ckpt)?.training_weights()?;
        copy_out(output(out, out_len, "out")?, p.as_slice(), "out")
    })
}

/// Explained-variance score (0–100) of the rank-`k` deployment weight on the
/// checkpoint's own synthetic task.
///
/// # Safety
/// `ckpt` must be a live handle and `out` valid for one write.
#[no_mangle]
pub unsafe extern "C" fn mlora_checkpoint_score(ckpt: *const MloraCheckpoint, k: usize, out: *mut f64) -> MloraStatus {
    guard(|| {
        let c = handle(ckpt)?;
        let task = ToyTask::generate(&c.config.task)?;
        output(out, 1, "out")?[0] = task.score(&c.merged(k)?)?;
        Ok(())
    })
}
