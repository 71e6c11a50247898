//! C interface to the trainer.
//!
//! Objects are opaque handles created and released by this library. Every
//! function returns a [`SocStatus`]; on failure a description is available
//! from [`soc_last_error_message`] on the same thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use soc_langevin::config::RawConfig;
use soc_langevin::harness::{self, HarnessError, RunRecord};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SocStatus {
    Ok = 0,
    Usage = 1,
    Numerical = 2,
    Io = 3,
    NullPointer = 4,
    Panic = 5,
}

/// One evaluation point of a training curve.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SocRecord {
    pub epoch: u64,
    pub mean: f64,
    pub half_width: f64,
}

/// Experiment configuration handle.
pub struct SocConfig {
    raw: RawConfig,
}

/// Finished training run handle.
pub struct SocRun {
    records: Vec<RunRecord>,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn fail(status: SocStatus, msg: &str) -> SocStatus {
    set_error(msg);
    status
}

fn harness_status(e: &HarnessError) -> SocStatus {
    match e {
        HarnessError::Io(_) => SocStatus::Io,
        e if e.is_numerical() => SocStatus::Numerical,
        _ => SocStatus::Usage,
    }
}

fn guard(f: impl FnOnce() -> SocStatus) -> SocStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => {
            if s == SocStatus::Ok {
                set_error("");
            }
            s
        }
        Err(_) => fail(SocStatus::Panic, "internal panic"),
    }
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, SocStatus> {
    if p.is_null() {
        return Err(fail(SocStatus::NullPointer, &format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(SocStatus::Usage, &format!("{what} is not valid UTF-8")))
}

/// Creates a configuration with defaults for environment `env`
/// (`fishing`, `hedging` or `oil`).
///
/// # Safety
/// `env` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn soc_config_new(env: *const c_char, out: *mut *mut SocConfig) -> SocStatus {
    guard(|| {
        if out.is_null() {
            return fail(SocStatus::NullPointer, "out is null");
        }
        *out = ptr::null_mut();
        let env = match text(env, "env") {
            Ok(s) => s,
            Err(s) => return s,
        };
        let mut raw = RawConfig::default();
        raw.set("env", env);
        if let Err(e) = raw.resolve() {
            return fail(SocStatus::Usage, &e.to_string());
        }
        *out = Box::into_raw(Box::new(SocConfig { raw }));
        SocStatus::Ok
    })
}

/// Sets one configuration key, using the same keys as the configuration file.
/// The configuration is left unchanged when the value is rejected.
///
/// # Safety
/// `cfg` must come from `soc_config_new`; `key` and `value` must be
/// NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn soc_config_set(cfg: *mut SocConfig, key: *const c_char, value: *const c_char) -> SocStatus {
    guard(|| {
        let Some(cfg) = cfg.as_mut() else {
            return fail(SocStatus::NullPointer, "cfg is null");
        };
        let (key, value) = match (text(key, "key"), text(value, "value")) {
            (Ok(k), Ok(v)) => (k, v),
            (Err(s), _) | (_, Err(s)) => return s,
        };
        let mut next = cfg.raw.clone();
        next.set(key, value);
        match next.resolve() {
            Ok(_) => {
                cfg.raw = next;
                SocStatus::Ok
            }
            Err(e) => fail(SocStatus::Usage, &e.to_string()),
        }
    })
}

/// # Safety
/// `cfg` must come from `soc_config_new` or be null.
#[no_mangle]
pub unsafe extern "C" fn soc_config_free(cfg: *mut SocConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

/// Trains the configuration and returns the run.
///
/// # Safety
/// `cfg` must be a live configuration; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn soc_train(cfg: *const SocConfig, out: *mut *mut SocRun) -> SocStatus {
    guard(|| {
        if out.is_null() {
            return fail(SocStatus::NullPointer, "out is null");
        }
        *out = ptr::null_mut();
        let Some(cfg) = cfg.as_ref() else {
            return fail(SocStatus::NullPointer, "cfg is null");
        };
        let config = match cfg.raw.resolve() {
            Ok(c) => c,
            Err(e) => return fail(SocStatus::Usage, &e.to_string()),
        };
        match harness::train(&config) {
            Ok(records) => {
                *out = Box::into_raw(Box::new(SocRun { records }));
                SocStatus::Ok
            }
            Err(e) => fail(harness_status(&e), &e.to_string()),
        }
    })
}

/// Number of records in the run, 0 for a null handle.
///
/// # Safety
/// `run` must be a live run or null.
#[no_mangle]
pub unsafe extern "C" fn soc_run_len(run: *const SocRun) -> usize {
    run.as_ref().map_or(0, |r| r.records.len())
}

/// # Safety
/// `run` must be a live run; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn soc_run_record(run: *const SocRun, index: usize, out: *mut SocRecord) -> SocStatus {
    guard(|| {
        let (Some(run), false) = (run.as_ref(), out.is_null()) else {
            return fail(SocStatus::NullPointer, "run or out is null");
        };
        match run.records.get(index) {
            Some(r) => {
                *out = SocRecord { epoch: r.epoch as u64, mean: r.mean, half_width: r.half_width };
                SocStatus::Ok
            }
            None => fail(SocStatus::Usage, &format!("record {index} out of range ({} records)", run.records.len())),
        }
    })
}

/// Writes the curve CSV (`time,f,f_plus,f_minus`) to `path`.
///
/// # Safety
/// `run` must be a live run; `path` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn soc_run_write_csv(run: *const SocRun, path: *const c_char) -> SocStatus {
    guard(|| {
        let Some(run) = run.as_ref() else {
            return fail(SocStatus::NullPointer, "run is null");
        };
        let path = match text(path, "path") {
            Ok(p) => p,
            Err(s) => return s,
        };
        match harness::write_curves(&run.records, Path::new(path)) {
            Ok(()) => SocStatus::Ok,
            Err(e) => fail(harness_status(&e), &e.to_string()),
        }
    })
}

/// # Safety
/// `run` must come from `soc_train` or be null.
#[no_mangle]
pub unsafe extern "C" fn soc_run_free(run: *mut SocRun) {
    if !run.is_null() {
        drop(Box::from_raw(run));
    }
}

/// Largest relative difference between the pathwise gradient and central
/// finite differences with the given `step`, on two trajectories.
///
/// # Safety
/// `cfg` must be a live configuration; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn soc_gradcheck(cfg: *const SocConfig, step: f64, out: *mut f64) -> SocStatus {
    guard(|| {
        let (Some(cfg), false) = (cfg.as_ref(), out.is_null()) else {
            return fail(SocStatus::NullPointer, "cfg or out is null");
        };
        let config = match cfg.raw.resolve() {
            Ok(c) => c,
            Err(e) => return fail(SocStatus::Usage, &e.to_string()),
        };
        let result = config.environment().and_then(|env| harness::gradcheck(env.as_ref(), &config, step));
        match result {
            Ok(v) => {
                *out = v;
                SocStatus::Ok
            }
            Err(e) => fail(harness_status(&e), &e.to_string()),
        }
    })
}

/// Message of the last failed call on this thread, empty after a success.
/// The pointer stays valid until the next call into this library on the
/// same thread.
#[no_mangle]
pub extern "C" fn soc_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn soc_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}
