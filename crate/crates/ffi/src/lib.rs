//! C ABI over the `entalign` simulator.
//!
//! Scenarios and alignment runs are opaque handles owned by the caller and
//! released with the matching `_free` function. Every fallible call returns
//! an [`EntalignError`] code; the message of the last failure on the calling
//! thread is available through [`entalign_last_error`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use entalign::control::{witness_check, RunStatus, WitnessVerdict};
use entalign::scenario::{run_align, AlignRun, ScenarioConfig};
use entalign::sim::{estimate_visibility, CountsQuad};
use entalign::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EntalignError {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    NotUnitary = 3,
    NotMaximallyEntangled = 4,
    OutOfRange = 5,
    EmptyCounts = 6,
    ZeroCounts = 7,
    Config = 8,
    Parse = 9,
    BufferTooSmall = 10,
    Panic = 11,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EntalignStatus {
    Running = 0,
    Converged = 1,
    FailedWitness = 2,
    BudgetExhausted = 3,
}

impl From<RunStatus> for EntalignStatus {
    fn from(s: RunStatus) -> Self {
        match s {
            RunStatus::Running => EntalignStatus::Running,
            RunStatus::Converged => EntalignStatus::Converged,
            RunStatus::FailedWitness => EntalignStatus::FailedWitness,
            RunStatus::BudgetExhausted => EntalignStatus::BudgetExhausted,
        }
    }
}

/// Opaque scenario configuration.
pub struct EntalignScenario(ScenarioConfig);

/// Opaque finished alignment run.
pub struct EntalignRun(AlignRun);

thread_local! {
    static LAST_ERROR: RefCell<Vec<u8>> = const { RefCell::new(Vec::new()) };
}

fn set_error(code: EntalignError, msg: &str) -> EntalignError {
    LAST_ERROR.with(|e| {
        let mut e = e.borrow_mut();
        e.clear();
        e.extend_from_slice(msg.as_bytes());
    });
    code
}

fn fail(err: Error) -> EntalignError {
    let code = match err {
        Error::NotUnitary { .. } => EntalignError::NotUnitary,
        Error::NotMaximallyEntangled { .. } => EntalignError::NotMaximallyEntangled,
        Error::OutOfRange { .. } => EntalignError::OutOfRange,
        Error::EmptyCounts => EntalignError::EmptyCounts,
        Error::ZeroCounts => EntalignError::ZeroCounts,
        Error::Config(_) => EntalignError::Config,
        Error::Parse { .. } => EntalignError::Parse,
    };
    set_error(code, &err.to_string())
}

fn guard(f: impl FnOnce() -> EntalignError) -> EntalignError {
    catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|_| set_error(EntalignError::Panic, "internal panic"))
}

/// Copies `text` plus a terminating NUL into `buf`. `needed` receives the
/// full size including the NUL, so callers can size a second attempt.
/// Leaves the last-error message alone so it can itself be queried this way.
///
/// # Safety
/// `buf` must be valid for `cap` bytes or null with `cap == 0`; `needed`
/// may be null.
unsafe fn copy_out(text: &[u8], buf: *mut c_char, cap: usize, needed: *mut usize) -> EntalignError {
    if !needed.is_null() {
        *needed = text.len() + 1;
    }
    if cap < text.len() + 1 {
        return EntalignError::BufferTooSmall;
    }
    if buf.is_null() {
        return EntalignError::NullPointer;
    }
    ptr::copy_nonoverlapping(text.as_ptr(), buf.cast::<u8>(), text.len());
    *buf.add(text.len()) = 0;
    EntalignError::Ok
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn entalign_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last error raised on this thread, NUL-terminated.
/// `needed` receives the required buffer size including the NUL.
///
/// # Safety
/// `buf` must be valid for `cap` bytes or null with `cap == 0`; `needed`
/// may be null.
#[no_mangle]
pub unsafe extern "C" fn entalign_last_error(buf: *mut c_char, cap: usize, needed: *mut usize) -> EntalignError {
    let msg = LAST_ERROR.with(|e| e.borrow().clone());
    copy_out(&msg, buf, cap, needed)
}

/// Scenario with every key at its default.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn entalign_scenario_default(out: *mut *mut EntalignScenario) -> EntalignError {
    if out.is_null() {
        return set_error(EntalignError::NullPointer, "out is null");
    }
    *out = Box::into_raw(Box::new(EntalignScenario(ScenarioConfig::default())));
    EntalignError::Ok
}

/// Parses a scenario from TOML text.
///
/// # Safety
/// `toml` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn entalign_scenario_from_toml(
    toml: *const c_char,
    out: *mut *mut EntalignScenario,
) -> EntalignError {
    if toml.is_null() || out.is_null() {
        return set_error(EntalignError::NullPointer, "null argument");
    }
    guard(|| {
        let Ok(text) = CStr::from_ptr(toml).to_str() else {
            return set_error(EntalignError::InvalidUtf8, "scenario text is not UTF-8");
        };
        match ScenarioConfig::from_toml(text) {
            Ok(cfg) => {
                *out = Box::into_raw(Box::new(EntalignScenario(cfg)));
                EntalignError::Ok
            }
            Err(e) => fail(e),
        }
    })
}

/// # Safety
/// `scenario` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn entalign_scenario_set_seed(scenario: *mut EntalignScenario, seed: u64) -> EntalignError {
    match scenario.as_mut() {
        Some(s) => {
            s.0.seed = seed;
            EntalignError::Ok
        }
        None => set_error(EntalignError::NullPointer, "scenario is null"),
    }
}

/// # Safety
/// `scenario` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn entalign_scenario_free(scenario: *mut EntalignScenario) {
    if !scenario.is_null() {
        drop(Box::from_raw(scenario));
    }
}

/// Runs a full alignment for the scenario.
///
/// # Safety
/// `scenario` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn entalign_align(
    scenario: *const EntalignScenario,
    out: *mut *mut EntalignRun,
) -> EntalignError {
    let (Some(s), false) = (scenario.as_ref(), out.is_null()) else {
        return set_error(EntalignError::NullPointer, "null argument");
    };
    guard(|| match run_align(&s.0) {
        Ok(run) => {
            *out = Box::into_raw(Box::new(EntalignRun(run)));
            EntalignError::Ok
        }
        Err(e) => fail(e),
    })
}

/// # Safety
/// `run` must be a live handle and `status` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn entalign_run_status(run: *const EntalignRun, status: *mut EntalignStatus) -> EntalignError {
    let (Some(r), false) = (run.as_ref(), status.is_null()) else {
        return set_error(EntalignError::NullPointer, "null argument");
    };
    *status = r.0.outcome.trace.status.into();
    EntalignError::Ok
}

/// Model visibilities of the aligned link in the order 11, 12, 21, 22.
///
/// # Safety
/// `run` must be a live handle and `out` valid for four doubles.
#[no_mangle]
pub unsafe extern "C" fn entalign_run_visibilities(run: *const EntalignRun, out: *mut f64) -> EntalignError {
    let (Some(r), false) = (run.as_ref(), out.is_null()) else {
        return set_error(EntalignError::NullPointer, "null argument");
    };
    let v = r.0.aligner.true_visibilities();
    ptr::copy_nonoverlapping(v.as_ptr(), out, 4);
    EntalignError::Ok
}

/// # Safety
/// `run` must be a live handle and `pairs` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn entalign_run_pairs_used(run: *const EntalignRun, pairs: *mut u64) -> EntalignError {
    let (Some(r), false) = (run.as_ref(), pairs.is_null()) else {
        return set_error(EntalignError::NullPointer, "null argument");
    };
    *pairs = r.0.outcome.pairs_used;
    EntalignError::Ok
}

/// Trace as NUL-terminated CSV text. `needed` receives the required
/// buffer size including the NUL.
///
/// # Safety
/// `run` must be a live handle; `buf` must be valid for `cap` bytes or
/// null with `cap == 0`; `needed` may be null.
#[no_mangle]
pub unsafe extern "C" fn entalign_run_trace_csv(
    run: *const EntalignRun,
    buf: *mut c_char,
    cap: usize,
    needed: *mut usize,
) -> EntalignError {
    let Some(r) = run.as_ref() else {
        return set_error(EntalignError::NullPointer, "run is null");
    };
    copy_out(r.0.outcome.trace.to_csv().as_bytes(), buf, cap, needed)
}

/// # Safety
/// `run` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn entalign_run_free(run: *mut EntalignRun) {
    if !run.is_null() {
        drop(Box::from_raw(run));
    }
}

/// Visibility and its uncertainty from four coincidence counts.
///
/// # Safety
/// `v` and `sigma` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn entalign_visibility(
    pp: u64,
    pm: u64,
    mp: u64,
    mm: u64,
    v: *mut f64,
    sigma: *mut f64,
) -> EntalignError {
    if v.is_null() || sigma.is_null() {
        return set_error(EntalignError::NullPointer, "null argument");
    }
    match estimate_visibility(&CountsQuad::new(pp, pm, mp, mm)) {
        Ok(e) => {
            *v = e.value;
            *sigma = e.sigma;
            EntalignError::Ok
        }
        Err(e) => fail(e),
    }
}

/// Sets `certified` to 1 when `|v11| + |v22|` exceeds one by more than
/// three combined standard deviations, 0 otherwise. Pass negative sigmas
/// to compare against one exactly.
///
/// # Safety
/// `certified` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn entalign_witness(
    v11: f64,
    v22: f64,
    s11: f64,
    s22: f64,
    certified: *mut i32,
) -> EntalignError {
    if certified.is_null() {
        return set_error(EntalignError::NullPointer, "certified is null");
    }
    let sigmas = (s11 >= 0.0 && s22 >= 0.0).then_some((s11, s22));
    *certified = i32::from(witness_check(v11, v22, sigmas) == WitnessVerdict::EntangledCertified);
    EntalignError::Ok
}
