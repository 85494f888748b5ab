//! C ABI for the evaluation engine so other languages can bind: opaque
//! handles, integer status codes, UTF-8 strings.
//!
//! Conventions: functions return [`DivertStatus`]; out-parameters are only
//! written on `Ok`. Functions taking `error_out` write a heap-allocated
//! message on failure (or null); release it with [`divert_string_free`].
//! All entry points catch panics and report them as `Panic` instead of
//! unwinding across the boundary.

use std::ffi::{CStr, CString};
use std::os::raw::c_char;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::ptr;

use divert::analysis;
use divert::cli;
use divert::core::{read_trajectories_file, Trajectory};

/// Status code of every FFI call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DivertStatus {
    Ok = 0,
    /// Null pointer, non-UTF-8 string or invalid configuration.
    InvalidArgument = 1,
    /// Filesystem or decoding failure.
    Io = 2,
    /// The run itself failed.
    RunFailed = 3,
    /// A metric was undefined for the given pool.
    Metric = 4,
    /// A panic was caught at the boundary.
    Panic = 5,
}

/// Opaque handle over a loaded trajectory pool.
pub struct DivertPool {
    trajectories: Vec<Trajectory>,
}

fn set_error(error_out: *mut *mut c_char, message: &str) {
    if error_out.is_null() {
        return;
    }
    let cstring = CString::new(message.replace('\0', " "))
        .unwrap_or_else(|_| CString::new("error").expect("static string"));
    unsafe {
        *error_out = cstring.into_raw();
    }
}

fn clear_error(error_out: *mut *mut c_char) {
    if !error_out.is_null() {
        unsafe {
            *error_out = ptr::null_mut();
        }
    }
}

unsafe fn path_arg(raw: *const c_char) -> Result<PathBuf, String> {
    if raw.is_null() {
        return Err("null path argument".into());
    }
    let text = unsafe { CStr::from_ptr(raw) }
        .to_str()
        .map_err(|_| "path is not valid UTF-8".to_string())?;
    Ok(PathBuf::from(text))
}

fn guarded(
    error_out: *mut *mut c_char,
    body: impl FnOnce() -> Result<(), (DivertStatus, String)>,
) -> DivertStatus {
    clear_error(error_out);
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => DivertStatus::Ok,
        Ok(Err((status, message))) => {
            set_error(error_out, &message);
            status
        }
        Err(_) => {
            set_error(error_out, "panic inside divert");
            DivertStatus::Panic
        }
    }
}

/// Version of the underlying engine, as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn divert_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Runs a configured evaluation: linear rollouts when `full_pipeline` is
/// false, rollouts plus branching when true. Outputs land where the config
/// says.
///
/// # Safety
/// `config_path` must be a valid NUL-terminated string; `error_out` may be
/// null or must point to a writable `char*`.
#[no_mangle]
pub unsafe extern "C" fn divert_run_config(
    config_path: *const c_char,
    full_pipeline: bool,
    error_out: *mut *mut c_char,
) -> DivertStatus {
    let path = match unsafe { path_arg(config_path) } {
        Ok(p) => p,
        Err(e) => {
            clear_error(error_out);
            set_error(error_out, &e);
            return DivertStatus::InvalidArgument;
        }
    };
    guarded(error_out, || {
        cli::run_config_file(&path, full_pipeline)
            .map(|_| ())
            .map_err(|e| {
                let status = match e.exit_code() {
                    2 => DivertStatus::InvalidArgument,
                    _ => DivertStatus::RunFailed,
                };
                (status, e.to_string())
            })
    })
}

/// Runs the full analysis over a pool directory, writing the CSV outputs to
/// `out_dir` (or next to the pool when null).
///
/// # Safety
/// `pool_dir` must be a valid NUL-terminated string; `out_dir` may be null;
/// `error_out` may be null or must point to a writable `char*`.
#[no_mangle]
pub unsafe extern "C" fn divert_analyze(
    pool_dir: *const c_char,
    out_dir: *const c_char,
    error_out: *mut *mut c_char,
) -> DivertStatus {
    let pool = match unsafe { path_arg(pool_dir) } {
        Ok(p) => p,
        Err(e) => {
            clear_error(error_out);
            set_error(error_out, &e);
            return DivertStatus::InvalidArgument;
        }
    };
    let out = if out_dir.is_null() {
        None
    } else {
        match unsafe { path_arg(out_dir) } {
            Ok(p) => Some(p),
            Err(e) => {
                clear_error(error_out);
                set_error(error_out, &e);
                return DivertStatus::InvalidArgument;
            }
        }
    };
    guarded(error_out, || {
        cli::analyze_pool_dir(&pool, out).map_err(|e| {
            let status = match e.exit_code() {
                2 => DivertStatus::InvalidArgument,
                _ => DivertStatus::RunFailed,
            };
            (status, e.to_string())
        })
    })
}

/// Loads a trajectories JSONL file into an opaque pool handle.
///
/// # Safety
/// `trajectories_path` must be a valid NUL-terminated string; `pool_out`
/// must point to a writable `DivertPool*`; `error_out` may be null.
#[no_mangle]
pub unsafe extern "C" fn divert_pool_open(
    trajectories_path: *const c_char,
    pool_out: *mut *mut DivertPool,
    error_out: *mut *mut c_char,
) -> DivertStatus {
    if pool_out.is_null() {
        clear_error(error_out);
        set_error(error_out, "null pool_out");
        return DivertStatus::InvalidArgument;
    }
    let path = match unsafe { path_arg(trajectories_path) } {
        Ok(p) => p,
        Err(e) => {
            clear_error(error_out);
            set_error(error_out, &e);
            return DivertStatus::InvalidArgument;
        }
    };
    guarded(error_out, || {
        let trajectories = read_trajectories_file(Path::new(&path))
            .map_err(|e| (DivertStatus::Io, e.to_string()))?;
        let handle = Box::new(DivertPool { trajectories });
        unsafe {
            *pool_out = Box::into_raw(handle);
        }
        Ok(())
    })
}

/// Releases a pool handle. Null is a no-op.
///
/// # Safety
/// `pool` must be null or a pointer previously returned by
/// [`divert_pool_open`], not yet closed.
#[no_mangle]
pub unsafe extern "C" fn divert_pool_close(pool: *mut DivertPool) {
    if !pool.is_null() {
        drop(unsafe { Box::from_raw(pool) });
    }
}

/// Number of trajectories in the pool.
///
/// # Safety
/// `pool` must be a live handle; `len_out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn divert_pool_len(
    pool: *const DivertPool,
    len_out: *mut usize,
) -> DivertStatus {
    if pool.is_null() || len_out.is_null() {
        return DivertStatus::InvalidArgument;
    }
    unsafe {
        *len_out = (*pool).trajectories.len();
    }
    DivertStatus::Ok
}

/// Failed trajectories per 100K agent completion tokens.
///
/// # Safety
/// `pool` must be a live handle; `value_out` must be writable; `error_out`
/// may be null.
#[no_mangle]
pub unsafe extern "C" fn divert_pool_errors_per_100k(
    pool: *const DivertPool,
    value_out: *mut f64,
    error_out: *mut *mut c_char,
) -> DivertStatus {
    if pool.is_null() || value_out.is_null() {
        clear_error(error_out);
        set_error(error_out, "null argument");
        return DivertStatus::InvalidArgument;
    }
    guarded(error_out, || {
        let value = analysis::errors_per_100k(unsafe { &(*pool).trajectories })
            .map_err(|e| (DivertStatus::Metric, e.to_string()))?;
        unsafe {
            *value_out = value;
        }
        Ok(())
    })
}

/// Number of distinct tasks with at least one failed trajectory.
///
/// # Safety
/// `pool` must be a live handle; `count_out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn divert_pool_task_failure_count(
    pool: *const DivertPool,
    count_out: *mut usize,
) -> DivertStatus {
    if pool.is_null() || count_out.is_null() {
        return DivertStatus::InvalidArgument;
    }
    unsafe {
        *count_out = analysis::task_failure_count(&(*pool).trajectories);
    }
    DivertStatus::Ok
}

/// Frees a string returned through an `error_out` parameter. Null is a
/// no-op.
///
/// # Safety
/// `s` must be null or a pointer produced by this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn divert_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(unsafe { CString::from_raw(s) });
    }
}
