//! C interface to occuflow.
//!
//! Every fallible function returns an [`OccuflowStatus`]. On failure the
//! message is kept per thread and can be fetched with
//! [`occuflow_last_error`]. Strings handed out by the library are released
//! with [`occuflow_string_free`]; handles with their own `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use occuflow::config::RunConfig;
use occuflow::correction::{correct_omega, estimate_c};
use occuflow::inference::summarize_chain;
use occuflow::output::write_trace;
use occuflow::panel::{load_panel, IngestSchema};
use occuflow::sem::{fit_panel, SemRun};
use occuflow::skellam::{skellam_pmf, SkellamParams};
use occuflow::{ExitRates, OccupancyPanel};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OccuflowStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Numerical = 4,
    BufferTooSmall = 5,
    Panic = 6,
}

/// Loaded occupancy panel.
pub struct OccuflowPanel {
    panel: OccupancyPanel,
}

/// Completed estimation run.
pub struct OccuflowFit {
    run: SemRun,
    window: (usize, usize),
}

thread_local! {
    static LAST_ERROR: RefCell<Option<String>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(msg.into()));
}

fn fail(status: OccuflowStatus, msg: impl Into<String>) -> OccuflowStatus {
    set_error(msg);
    status
}

fn guard(f: impl FnOnce() -> OccuflowStatus) -> OccuflowStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(_) => fail(OccuflowStatus::Panic, "internal panic"),
    }
}

unsafe fn slice<'a>(ptr: *const f64, len: usize) -> Option<&'a [f64]> {
    if ptr.is_null() {
        None
    } else {
        Some(std::slice::from_raw_parts(ptr, len))
    }
}

unsafe fn path_arg<'a>(ptr: *const c_char) -> Result<&'a str, OccuflowStatus> {
    if ptr.is_null() {
        return Err(fail(OccuflowStatus::NullPointer, "path is null"));
    }
    CStr::from_ptr(ptr)
        .to_str()
        .map_err(|_| fail(OccuflowStatus::InvalidArgument, "path is not valid UTF-8"))
}

fn copy_out(values: &[f64], out: *mut f64, capacity: usize, written: *mut usize) -> OccuflowStatus {
    if !written.is_null() {
        unsafe { *written = values.len() };
    }
    if values.len() > capacity {
        return fail(
            OccuflowStatus::BufferTooSmall,
            format!("need room for {} values, got {capacity}", values.len()),
        );
    }
    if out.is_null() {
        return fail(OccuflowStatus::NullPointer, "output buffer is null");
    }
    unsafe { std::ptr::copy_nonoverlapping(values.as_ptr(), out, values.len()) };
    OccuflowStatus::Ok
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn occuflow_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failure on this thread, or null. Free with
/// `occuflow_string_free`.
#[no_mangle]
pub extern "C" fn occuflow_last_error() -> *mut c_char {
    LAST_ERROR.with(|e| match e.borrow().as_deref() {
        Some(msg) => CString::new(msg.replace('\0', " ")).map_or(std::ptr::null_mut(), CString::into_raw),
        None => std::ptr::null_mut(),
    })
}

/// # Safety
/// `s` must be null or a string returned by this library, freed at most once.
#[no_mangle]
pub unsafe extern "C" fn occuflow_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// `P(I − R = delta)` for `I ~ Poisson(lambda_in)`, `R ~ Poisson(lambda_out)`.
///
/// # Safety
/// `out` must be null or point to writable memory for one `double`.
#[no_mangle]
pub unsafe extern "C" fn occuflow_skellam_pmf(delta: i64, lambda_in: f64, lambda_out: f64, out: *mut f64) -> OccuflowStatus {
    guard(|| {
        if out.is_null() {
            return fail(OccuflowStatus::NullPointer, "out is null");
        }
        match SkellamParams::new(lambda_in, lambda_out) {
            Ok(p) => {
                *out = skellam_pmf(delta, p);
                OccuflowStatus::Ok
            }
            Err(e) => fail(OccuflowStatus::InvalidArgument, e.to_string()),
        }
    })
}

/// Shrinkage ratio of `refit` relative to `reference`, both of length `len`
/// and on the simplex.
///
/// # Safety
/// `reference` and `refit` must point to `len` doubles, `out` to one.
#[no_mangle]
pub unsafe extern "C" fn occuflow_estimate_c(
    reference: *const f64,
    refit: *const f64,
    len: usize,
    out: *mut f64,
) -> OccuflowStatus {
    guard(|| {
        let (Some(a), Some(b)) = (slice(reference, len), slice(refit, len)) else {
            return fail(OccuflowStatus::NullPointer, "input is null");
        };
        if out.is_null() {
            return fail(OccuflowStatus::NullPointer, "out is null");
        }
        let (a, b) = match (ExitRates::new(a.to_vec()), ExitRates::new(b.to_vec())) {
            (Ok(a), Ok(b)) => (a, b),
            (Err(e), _) | (_, Err(e)) => return fail(OccuflowStatus::InvalidArgument, e.to_string()),
        };
        match estimate_c(&a, &b) {
            Ok(c) => {
                *out = c;
                OccuflowStatus::Ok
            }
            Err(e) => fail(OccuflowStatus::InvalidArgument, e.to_string()),
        }
    })
}

/// Scale squared deviations of `omega` from `1/len` by `factor`, clip and
/// renormalize into `out` (length `len`).
///
/// # Safety
/// `omega` and `out` must point to `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn occuflow_correct_omega(
    omega: *const f64,
    len: usize,
    factor: f64,
    out: *mut f64,
) -> OccuflowStatus {
    guard(|| {
        let Some(w) = slice(omega, len) else {
            return fail(OccuflowStatus::NullPointer, "omega is null");
        };
        if !(factor.is_finite() && factor >= 0.0) {
            return fail(OccuflowStatus::InvalidArgument, "factor must be finite and nonnegative");
        }
        let w = match ExitRates::new(w.to_vec()) {
            Ok(w) => w,
            Err(e) => return fail(OccuflowStatus::InvalidArgument, e.to_string()),
        };
        let (corrected, _) = correct_omega(&w, factor);
        copy_out(corrected.as_slice(), out, len, std::ptr::null_mut())
    })
}

/// Load a panel CSV with the default column names.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn occuflow_panel_load(path: *const c_char, out: *mut *mut OccuflowPanel) -> OccuflowStatus {
    guard(|| {
        if out.is_null() {
            return fail(OccuflowStatus::NullPointer, "out is null");
        }
        let path = match path_arg(path) {
            Ok(p) => p,
            Err(s) => return s,
        };
        match load_panel(Path::new(path), &IngestSchema::default()) {
            Ok(panel) => {
                *out = Box::into_raw(Box::new(OccuflowPanel { panel }));
                OccuflowStatus::Ok
            }
            Err(e) => fail(OccuflowStatus::Io, e.to_string()),
        }
    })
}

/// # Safety
/// `panel` must be null or a handle from `occuflow_panel_load`, freed once.
#[no_mangle]
pub unsafe extern "C" fn occuflow_panel_free(panel: *mut OccuflowPanel) {
    if !panel.is_null() {
        drop(Box::from_raw(panel));
    }
}

/// # Safety
/// `panel` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn occuflow_panel_districts(panel: *const OccuflowPanel) -> usize {
    panel.as_ref().map_or(0, |p| p.panel.n_districts())
}

/// Number of dates in the panel.
///
/// # Safety
/// `panel` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn occuflow_panel_days(panel: *const OccuflowPanel) -> usize {
    panel.as_ref().map_or(0, |p| p.panel.n_days())
}

/// Run the estimation. `config_toml` may be null for defaults; otherwise it
/// is the text of a run configuration whose `fit` section is used.
///
/// # Safety
/// `panel` must be a live handle, `config_toml` null or NUL-terminated,
/// `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn occuflow_fit_run(
    panel: *const OccuflowPanel,
    config_toml: *const c_char,
    seed: u64,
    out: *mut *mut OccuflowFit,
) -> OccuflowStatus {
    guard(|| {
        let Some(panel) = panel.as_ref() else {
            return fail(OccuflowStatus::NullPointer, "panel is null");
        };
        if out.is_null() {
            return fail(OccuflowStatus::NullPointer, "out is null");
        }
        let cfg = if config_toml.is_null() {
            RunConfig::default()
        } else {
            let text = match CStr::from_ptr(config_toml).to_str() {
                Ok(t) => t,
                Err(_) => return fail(OccuflowStatus::InvalidArgument, "config is not valid UTF-8"),
            };
            match RunConfig::parse(text) {
                Ok(c) => c,
                Err(e) => return fail(OccuflowStatus::InvalidArgument, e.to_string()),
            }
        };
        let mut sem = cfg.fit.sem.clone();
        sem.seed = seed;
        if let Err(e) = sem.validate() {
            return fail(OccuflowStatus::InvalidArgument, e.to_string());
        }
        let run = match fit_panel(&panel.panel, &cfg.fit.covariates, &sem) {
            Ok(r) => r,
            Err(e) => return fail(OccuflowStatus::Numerical, e.to_string()),
        };
        if let Some(reason) = &run.aborted {
            return fail(OccuflowStatus::Numerical, format!("chain aborted: {reason}"));
        }
        let window = sem.window(run.trace.completed());
        *out = Box::into_raw(Box::new(OccuflowFit { run, window }));
        OccuflowStatus::Ok
    })
}

/// # Safety
/// `fit` must be null or a handle from `occuflow_fit_run`, freed once.
#[no_mangle]
pub unsafe extern "C" fn occuflow_fit_free(fit: *mut OccuflowFit) {
    if !fit.is_null() {
        drop(Box::from_raw(fit));
    }
}

/// Completed iterations.
///
/// # Safety
/// `fit` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn occuflow_fit_iterations(fit: *const OccuflowFit) -> usize {
    fit.as_ref().map_or(0, |f| f.run.trace.completed())
}

/// Window medians of the exit rates. `written` receives the number of lags
/// even when the buffer is too small.
///
/// # Safety
/// `fit` must be a live handle, `out` must hold `capacity` doubles, `written`
/// may be null.
#[no_mangle]
pub unsafe extern "C" fn occuflow_fit_exit_rates(
    fit: *const OccuflowFit,
    out: *mut f64,
    capacity: usize,
    written: *mut usize,
) -> OccuflowStatus {
    guard(|| {
        let Some(fit) = fit.as_ref() else {
            return fail(OccuflowStatus::NullPointer, "fit is null");
        };
        match summarize_chain(&fit.run.trace, fit.window) {
            Ok(s) => copy_out(&s.omega, out, capacity, written),
            Err(e) => fail(OccuflowStatus::Numerical, e.to_string()),
        }
    })
}

/// Window medians of the inflow coefficients, in design order.
///
/// # Safety
/// As for `occuflow_fit_exit_rates`.
#[no_mangle]
pub unsafe extern "C" fn occuflow_fit_coefficients(
    fit: *const OccuflowFit,
    out: *mut f64,
    capacity: usize,
    written: *mut usize,
) -> OccuflowStatus {
    guard(|| {
        let Some(fit) = fit.as_ref() else {
            return fail(OccuflowStatus::NullPointer, "fit is null");
        };
        match summarize_chain(&fit.run.trace, fit.window) {
            Ok(s) => copy_out(&s.coefficients, out, capacity, written),
            Err(e) => fail(OccuflowStatus::Numerical, e.to_string()),
        }
    })
}

/// Write the iteration trace as line-delimited JSON.
///
/// # Safety
/// `fit` must be a live handle and `path` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn occuflow_fit_write_trace(fit: *const OccuflowFit, path: *const c_char) -> OccuflowStatus {
    guard(|| {
        let Some(fit) = fit.as_ref() else {
            return fail(OccuflowStatus::NullPointer, "fit is null");
        };
        let path = match path_arg(path) {
            Ok(p) => p,
            Err(s) => return s,
        };
        match write_trace(Path::new(path), &fit.run.trace) {
            Ok(()) => OccuflowStatus::Ok,
            Err(e) => fail(OccuflowStatus::Io, e.to_string()),
        }
    })
}
