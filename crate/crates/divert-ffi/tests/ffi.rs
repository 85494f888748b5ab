//! Exercises the C ABI end to end from Rust: run a configured evaluation,
//! open the resulting pool through the handle API and query metrics.

use std::ffi::{CStr, CString};
use std::os::raw::c_char;
use std::path::Path;
use std::ptr;

use divert_ffi::{
    divert_analyze, divert_pool_close, divert_pool_errors_per_100k, divert_pool_len,
    divert_pool_open, divert_pool_task_failure_count, divert_run_config, divert_string_free,
    divert_version, DivertPool, DivertStatus,
};

fn c_path(path: &Path) -> CString {
    CString::new(path.to_str().expect("utf-8 path")).expect("no NULs")
}

fn take_error(error: *mut c_char) -> Option<String> {
    if error.is_null() {
        return None;
    }
    let text = unsafe { CStr::from_ptr(error) }
        .to_string_lossy()
        .into_owned();
    unsafe { divert_string_free(error) };
    Some(text)
}

#[test]
fn version_is_a_static_string() {
    let version = unsafe { CStr::from_ptr(divert_version()) };
    assert_eq!(version.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn run_open_and_query_through_the_abi() {
    let workspace = tempfile::TempDir::new().unwrap();
    let suite_path = Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../divert/suites/mini_orders.json")
        .canonicalize()
        .unwrap();
    let config = serde_json::json!({
        "suite_path": suite_path.to_str().unwrap(),
        "base_dir": "snapshots",
        "output_dir": "out",
        "provider": {
            "kind": "mock",
            "agent_model": "mock-agent",
            "user_model": "mock-user",
            "framework_model": "mock-framework"
        },
        "run": {"seed": 42},
        "budget": {"rollouts": 2, "branches": 2, "candidates_per_junction": 3, "max_branch_depth": 3}
    });
    let config_path = workspace.path().join("config.json");
    std::fs::write(&config_path, serde_json::to_vec_pretty(&config).unwrap()).unwrap();

    let config_c = c_path(&config_path);
    let mut error: *mut c_char = ptr::null_mut();
    let status = unsafe { divert_run_config(config_c.as_ptr(), true, &mut error) };
    assert_eq!(status, DivertStatus::Ok, "{:?}", take_error(error));

    let trajectories = workspace.path().join("out/trajectories.jsonl");
    let trajectories_c = c_path(&trajectories);
    let mut pool: *mut DivertPool = ptr::null_mut();
    let status = unsafe { divert_pool_open(trajectories_c.as_ptr(), &mut pool, &mut error) };
    assert_eq!(status, DivertStatus::Ok, "{:?}", take_error(error));
    assert!(!pool.is_null());

    let mut len = 0usize;
    assert_eq!(unsafe { divert_pool_len(pool, &mut len) }, DivertStatus::Ok);
    assert_eq!(len, 24); // 6 tasks x (2 rollouts + 2 branches)

    let mut value = 0.0f64;
    let status = unsafe { divert_pool_errors_per_100k(pool, &mut value, &mut error) };
    assert_eq!(status, DivertStatus::Ok, "{:?}", take_error(error));
    assert!(value.is_finite() && value >= 0.0);

    let mut failures = 0usize;
    assert_eq!(
        unsafe { divert_pool_task_failure_count(pool, &mut failures) },
        DivertStatus::Ok
    );
    assert!(failures >= 1, "branching finds the engineered failure");

    unsafe { divert_pool_close(pool) };

    // analysis through the ABI
    let pool_dir_c = c_path(&workspace.path().join("out"));
    let analysis_dir_c = c_path(&workspace.path().join("analysis"));
    let status =
        unsafe { divert_analyze(pool_dir_c.as_ptr(), analysis_dir_c.as_ptr(), &mut error) };
    assert_eq!(status, DivertStatus::Ok, "{:?}", take_error(error));
    for file in ["metrics.csv", "coverage.csv", "prefix.csv", "diversity.csv"] {
        assert!(workspace.path().join("analysis").join(file).is_file());
    }
}

#[test]
fn errors_are_reported_with_messages() {
    let mut error: *mut c_char = ptr::null_mut();
    let missing = CString::new("/nonexistent/config.json").unwrap();
    let status = unsafe { divert_run_config(missing.as_ptr(), false, &mut error) };
    assert_eq!(status, DivertStatus::InvalidArgument);
    let message = take_error(error).expect("an error message");
    assert!(message.contains("config"), "{message}");

    let mut pool: *mut DivertPool = ptr::null_mut();
    let missing = CString::new("/nonexistent/pool.jsonl").unwrap();
    let status = unsafe { divert_pool_open(missing.as_ptr(), &mut pool, &mut error) };
    assert_eq!(status, DivertStatus::Io);
    assert!(take_error(error).is_some());
    assert!(pool.is_null());

    // null-pointer arguments are rejected, not dereferenced
    let status = unsafe { divert_run_config(ptr::null(), false, &mut error) };
    assert_eq!(status, DivertStatus::InvalidArgument);
    take_error(error);
    assert_eq!(
        unsafe { divert_pool_len(ptr::null(), &mut 0usize) },
        DivertStatus::InvalidArgument
    );
}

#[test]
fn generated_header_covers_the_surface() {
    let header_path = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/divert.h");
    let header = std::fs::read_to_string(&header_path).expect("cbindgen header exists");
    for symbol in [
        "divert_version",
        "divert_run_config",
        "divert_analyze",
        "divert_pool_open",
        "divert_pool_close",
        "divert_pool_len",
        "divert_pool_errors_per_100k",
        "divert_pool_task_failure_count",
        "divert_string_free",
        "DivertStatus",
        "DivertPool",
    ] {
        assert!(header.contains(symbol), "header is missing {symbol}");
    }
}
