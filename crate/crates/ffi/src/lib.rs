//! C ABI over the `reachguard` core.
//!
//! Objects cross the boundary as opaque handles created by `rg_*_load` or
//! `rg_*_new` and released with the matching `rg_*_free`. Every fallible
//! call returns an [`RgStatus`]; on failure the message is available from
//! [`rg_last_error_message`] on the same thread until the next failing call.
//! Panics are caught and reported as [`RgStatus::Panic`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use reachguard::config::ExperimentConfig;
use reachguard::conformal::{calibrate, CalibrationConfig};
use reachguard::dynamics::{step, ActionId, DubinsState};
use reachguard::ensemble::{EnsembleParams, GaussianPrediction};
use reachguard::filter::{filter_step, FilterContext, SafetySolution};
use reachguard::grid::ValueGrid;
use reachguard::pipeline;
use reachguard::uncertainty::{jrd, KnownDynamics, TransitionSource};
use reachguard::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RgStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    InvalidConfig = 5,
    ConfigMismatch = 6,
    NonConvergence = 7,
    Uncalibrated = 8,
    DimensionMismatch = 9,
    InsufficientData = 10,
    Panic = 11,
}

impl From<&Error> for RgStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Io(_) => RgStatus::Io,
            Error::Json(_) | Error::Format(_) | Error::InconsistentTrajectory(_) => RgStatus::Format,
            Error::InvalidConfig(_) | Error::GridMismatch(_) | Error::NonPositiveVariance(_) => RgStatus::InvalidConfig,
            Error::ConfigMismatch { .. } => RgStatus::ConfigMismatch,
            Error::NonConvergence { .. } => RgStatus::NonConvergence,
            Error::UncalibratedThreshold => RgStatus::Uncalibrated,
            Error::DimensionMismatch { .. } | Error::TooFewMembers { .. } => RgStatus::DimensionMismatch,
            Error::EmptyDataset
            | Error::EmptySequence
            | Error::InsufficientData { .. }
            | Error::SamplingExhausted(_) => RgStatus::InsufficientData,
        }
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let s = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(s).ok());
}

fn fail(status: RgStatus, msg: impl Into<String>) -> RgStatus {
    set_error(msg);
    status
}

fn from_core(e: Error) -> RgStatus {
    let status = RgStatus::from(&e);
    fail(status, e.to_string())
}

/// Run `f`, mapping panics to [`RgStatus::Panic`].
fn guard(f: impl FnOnce() -> RgStatus) -> RgStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            fail(RgStatus::Panic, msg)
        }
    }
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, RgStatus> {
    if p.is_null() {
        return Err(fail(RgStatus::NullPointer, "path is null"));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(PathBuf::from)
        .map_err(|_| fail(RgStatus::InvalidArgument, "path is not UTF-8"))
}

fn action_arg(a: i32) -> Result<ActionId, RgStatus> {
    usize::try_from(a)
        .ok()
        .and_then(ActionId::new)
        .ok_or_else(|| fail(RgStatus::InvalidArgument, format!("action {a} outside 0..3")))
}

unsafe fn put<T>(out: *mut *mut T, value: T) -> RgStatus {
    *out = Box::into_raw(Box::new(value));
    RgStatus::Ok
}

macro_rules! try_ffi {
    ($e:expr) => {
        match $e {
            Ok(v) => v,
            Err(s) => return s,
        }
    };
}

macro_rules! non_null {
    ($($p:ident),+) => {
        $(if $p.is_null() {
            return fail(RgStatus::NullPointer, concat!(stringify!($p), " is null"));
        })+
    };
}

/// Experiment configuration.
pub struct RgConfig {
    inner: ExperimentConfig,
}

/// A value grid (ground truth or uncertainty-aware).
pub struct RgValueGrid {
    inner: ValueGrid,
}

/// A trained dynamics ensemble.
pub struct RgEnsemble {
    inner: EnsembleParams,
}

/// A grid-based safety filter with its transition model.
pub struct RgFilter {
    sol: SafetySolution,
    model: TransitionSource,
    cfg: ExperimentConfig,
    epsilon: f64,
}

/// Outcome of one filter step. `executed` is -1 on HALT; `u_fallback` is
/// NaN when no fallback was evaluated.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct RgDecision {
    pub executed: i32,
    pub intervened: bool,
    pub halted: bool,
    pub value_next: f64,
    pub u_task: f64,
    pub u_fallback: f64,
}

/// Message of the last failed call on this thread, or null. The pointer
/// stays valid until the next failing call on this thread.
#[no_mangle]
pub extern "C" fn rg_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn rg_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn rg_config_default(out: *mut *mut RgConfig) -> RgStatus {
    non_null!(out);
    guard(|| {
        put(
            out,
            RgConfig {
                inner: ExperimentConfig::default(),
            },
        )
    })
}

/// Load a TOML experiment config.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn rg_config_load(path: *const c_char, out: *mut *mut RgConfig) -> RgStatus {
    non_null!(out);
    guard(|| {
        let p = try_ffi!(path_arg(path));
        match ExperimentConfig::load(&p) {
            Ok(inner) => put(out, RgConfig { inner }),
            Err(e) => from_core(e),
        }
    })
}

/// Write the config hash (64 hex chars plus NUL) into `buf`.
///
/// # Safety
/// `cfg` must come from this library; `buf` must hold `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn rg_config_hash(cfg: *const RgConfig, buf: *mut c_char, len: usize) -> RgStatus {
    non_null!(cfg, buf);
    guard(|| {
        let h = (*cfg).inner.hash();
        if len < h.len() + 1 {
            return fail(RgStatus::InvalidArgument, format!("buffer needs {} bytes", h.len() + 1));
        }
        ptr::copy_nonoverlapping(h.as_ptr(), buf.cast(), h.len());
        *buf.add(h.len()) = 0;
        RgStatus::Ok
    })
}

/// # Safety
/// `cfg` must come from this library or be null.
#[no_mangle]
pub unsafe extern "C" fn rg_config_free(cfg: *mut RgConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

/// Advance the true dynamics one step. `state` is `[px, py, theta]`.
///
/// # Safety
/// `cfg` must come from this library; `state` and `out` must point to 3 doubles.
#[no_mangle]
pub unsafe extern "C" fn rg_step(cfg: *const RgConfig, state: *const f64, action: i32, out: *mut f64) -> RgStatus {
    non_null!(cfg, state, out);
    guard(|| {
        let a = try_ffi!(action_arg(action));
        let s = DubinsState::from_slice(std::slice::from_raw_parts(state, 3));
        let n = step(&s, a, &(*cfg).inner.world).to_array();
        ptr::copy_nonoverlapping(n.as_ptr(), out, 3);
        RgStatus::Ok
    })
}

/// Order-2 Jensen-Renyi divergence of `k` diagonal Gaussians in `d`
/// dimensions. `means` and `variances` are row-major `k x d`.
///
/// # Safety
/// `means` and `variances` must hold `k * d` doubles; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn rg_jrd(
    means: *const f64,
    variances: *const f64,
    k: usize,
    d: usize,
    out: *mut f64,
) -> RgStatus {
    non_null!(means, variances, out);
    guard(|| {
        if d == 0 {
            return fail(RgStatus::InvalidArgument, "d must be >= 1");
        }
        let m = std::slice::from_raw_parts(means, k * d);
        let v = std::slice::from_raw_parts(variances, k * d);
        let preds: Vec<GaussianPrediction> = m
            .chunks(d)
            .zip(v.chunks(d))
            .map(|(m, v)| GaussianPrediction::new(m.to_vec(), v.to_vec()))
            .collect();
        match jrd(&preds) {
            Ok(u) => {
                *out = u;
                RgStatus::Ok
            }
            Err(e) => from_core(e),
        }
    })
}

/// Conformal threshold from `n` trajectory scores. `*epsilon_hat` is
/// `+inf` and `*degenerate` true when the rank exceeds `n`.
///
/// # Safety
/// `scores` must hold `n` doubles; the output pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn rg_calibrate(
    scores: *const f64,
    n: usize,
    alpha_cal: f64,
    epsilon_hat: *mut f64,
    degenerate: *mut bool,
) -> RgStatus {
    non_null!(scores, epsilon_hat, degenerate);
    guard(|| {
        let cfg = CalibrationConfig {
            alpha_cal,
            ..CalibrationConfig::default()
        };
        match calibrate(std::slice::from_raw_parts(scores, n).to_vec(), cfg) {
            Ok(r) => {
                *epsilon_hat = r.epsilon_hat;
                *degenerate = r.degenerate;
                RgStatus::Ok
            }
            Err(e) => from_core(e),
        }
    })
}

/// Load a value grid written by the CLI.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn rg_value_grid_load(path: *const c_char, out: *mut *mut RgValueGrid) -> RgStatus {
    non_null!(out);
    guard(|| {
        let p = try_ffi!(path_arg(path));
        match ValueGrid::load(&p) {
            Ok((inner, _)) => put(out, RgValueGrid { inner }),
            Err(e) => from_core(e),
        }
    })
}

/// Solve the undiscounted ground-truth grid for `cfg`.
///
/// # Safety
/// `cfg` must come from this library and `out` be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn rg_value_grid_solve_ground_truth(
    cfg: *const RgConfig,
    out: *mut *mut RgValueGrid,
) -> RgStatus {
    non_null!(cfg, out);
    guard(|| match pipeline::ground_truth(&(*cfg).inner) {
        Ok(inner) => put(out, RgValueGrid { inner }),
        Err(e) => from_core(e),
    })
}

/// Interpolated value at `(px, py, theta)`.
///
/// # Safety
/// `vg` must come from this library and `out` be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn rg_value_grid_value(
    vg: *const RgValueGrid,
    px: f64,
    py: f64,
    theta: f64,
    out: *mut f64,
) -> RgStatus {
    non_null!(vg, out);
    guard(|| {
        *out = (*vg).inner.interpolate(&DubinsState::new(px, py, theta));
        RgStatus::Ok
    })
}

/// # Safety
/// `vg` must come from this library or be null.
#[no_mangle]
pub unsafe extern "C" fn rg_value_grid_free(vg: *mut RgValueGrid) {
    if !vg.is_null() {
        drop(Box::from_raw(vg));
    }
}

/// Load an ensemble written by the CLI.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn rg_ensemble_load(path: *const c_char, out: *mut *mut RgEnsemble) -> RgStatus {
    non_null!(out);
    guard(|| {
        let p = try_ffi!(path_arg(path));
        match EnsembleParams::load(&p) {
            Ok((inner, _)) => put(out, RgEnsemble { inner }),
            Err(e) => from_core(e),
        }
    })
}

/// # Safety
/// `ens` must come from this library or be null.
#[no_mangle]
pub unsafe extern "C" fn rg_ensemble_free(ens: *mut RgEnsemble) {
    if !ens.is_null() {
        drop(Box::from_raw(ens));
    }
}

/// Build a grid filter. The grid is copied; `ens` may be null to filter
/// with the true dynamics, in which case `epsilon` is ignored.
///
/// # Safety
/// Non-null handles must come from this library; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn rg_filter_new(
    cfg: *const RgConfig,
    vg: *const RgValueGrid,
    ens: *const RgEnsemble,
    epsilon: f64,
    out: *mut *mut RgFilter,
) -> RgStatus {
    non_null!(cfg, vg, out);
    guard(|| {
        if epsilon.is_nan() {
            return from_core(Error::UncalibratedThreshold);
        }
        let cfg = (*cfg).inner.clone();
        let (model, epsilon) = if ens.is_null() {
            (TransitionSource::Known(KnownDynamics(cfg.world.clone())), f64::INFINITY)
        } else {
            (
                TransitionSource::Ensemble {
                    ens: (*ens).inner.clone(),
                    method: cfg.ood.method,
                },
                epsilon,
            )
        };
        let sol = pipeline::grid_solution(&cfg, (*vg).inner.clone(), epsilon);
        put(
            out,
            RgFilter {
                sol,
                model,
                cfg,
                epsilon,
            },
        )
    })
}

/// One filter decision for the task action `a_task` at `(px, py, theta)`.
///
/// # Safety
/// `f` must come from this library and `out` be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn rg_filter_step(
    f: *const RgFilter,
    px: f64,
    py: f64,
    theta: f64,
    a_task: i32,
    out: *mut RgDecision,
) -> RgStatus {
    non_null!(f, out);
    guard(|| {
        let a = try_ffi!(action_arg(a_task));
        let f = &*f;
        let ctx = FilterContext {
            sol: &f.sol,
            model: &f.model,
            epsilon: f.epsilon,
            delta: f.cfg.filter.delta,
            world: &f.cfg.world,
        };
        match filter_step(&DubinsState::new(px, py, theta), a, &ctx) {
            Ok(d) => {
                *out = RgDecision {
                    executed: d.executed.map_or(-1, |a| a.index() as i32),
                    intervened: d.intervened,
                    halted: d.halted,
                    value_next: d.value_next,
                    u_task: d.u_task,
                    u_fallback: d.u_fallback.unwrap_or(f64::NAN),
                };
                RgStatus::Ok
            }
            Err(e) => from_core(e),
        }
    })
}

/// # Safety
/// `f` must come from this library or be null.
#[no_mangle]
pub unsafe extern "C" fn rg_filter_free(f: *mut RgFilter) {
    if !f.is_null() {
        drop(Box::from_raw(f));
    }
}
