//! C ABI over `sdegeo`.
//!
//! Every function returns an [`SdgStatus`]. On anything other than
//! `SDG_STATUS_OK` (and `SDG_STATUS_CHECKS_FAILED`, which still produces a
//! report) a message is available from [`sdg_last_error`] on the same thread.
//! Strings handed out by the library are released with [`sdg_string_free`];
//! scenario handles with [`sdg_scenario_free`].

use sdegeo::commands::{run, RunError};
use sdegeo::config::parse_config;
use sdegeo::geometry::{christoffel, induced_metric, Connection};
use sdegeo::model::{build_scenario, scenario_from_json, SdeSystem};
use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SdgStatus {
    Ok = 0,
    /// The run completed but at least one check failed or was not applicable.
    ChecksFailed = 1,
    Config = 2,
    Runtime = 3,
    NullPointer = 4,
    InvalidArgument = 5,
    Panic = 6,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SdgConnection {
    LeJanWatanabe = 0,
    Adjoint = 1,
    LeviCivita = 2,
}

/// Opaque scenario handle.
pub struct SdgScenario {
    sys: SdeSystem,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn fail(status: SdgStatus, msg: impl Into<String>) -> SdgStatus {
    set_error(msg);
    status
}

fn guarded(f: impl FnOnce() -> SdgStatus) -> SdgStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            fail(SdgStatus::Panic, format!("panic: {msg}"))
        }
    }
}

unsafe fn read_str<'a>(s: *const c_char, what: &str) -> Result<&'a str, SdgStatus> {
    if s.is_null() {
        return Err(fail(SdgStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(s).to_str().map_err(|_| fail(SdgStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

fn into_c_string(s: String) -> *mut c_char {
    CString::new(s.replace('\0', " ")).map_or(ptr::null_mut(), CString::into_raw)
}

/// Last error message on this thread, or null. The pointer stays valid
/// until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn sdg_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn sdg_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Runs a JSON configuration and stores the JSON report in `*report_out`.
///
/// # Safety
/// `config` must be a NUL-terminated string and `report_out` a valid
/// pointer. The report must be released with [`sdg_string_free`].
#[no_mangle]
pub unsafe extern "C" fn sdg_run_json(config: *const c_char, report_out: *mut *mut c_char) -> SdgStatus {
    guarded(|| {
        if report_out.is_null() {
            return fail(SdgStatus::NullPointer, "report_out is null");
        }
        *report_out = ptr::null_mut();
        let text = match read_str(config, "config") {
            Ok(t) => t,
            Err(s) => return s,
        };
        let cfg = match parse_config(text) {
            Ok(c) => c,
            Err(e) => return fail(SdgStatus::Config, e.to_string()),
        };
        match run(&cfg) {
            Ok(outcome) => {
                let body = serde_json::to_string(&outcome.report).expect("report serializes");
                *report_out = into_c_string(body);
                if outcome.passed {
                    SdgStatus::Ok
                } else {
                    fail(SdgStatus::ChecksFailed, outcome.summary)
                }
            }
            Err(e @ RunError::Config(_)) => fail(SdgStatus::Config, e.to_string()),
            Err(e) => fail(SdgStatus::Runtime, e.to_string()),
        }
    })
}

/// # Safety
/// `s` must be null or a string returned by this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sdg_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Builds a scenario from a JSON block such as `{"name": "sphere-gradient", "n": 2}`.
///
/// # Safety
/// `spec` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sdg_scenario_new(spec: *const c_char, out: *mut *mut SdgScenario) -> SdgStatus {
    guarded(|| {
        if out.is_null() {
            return fail(SdgStatus::NullPointer, "out is null");
        }
        *out = ptr::null_mut();
        let text = match read_str(spec, "spec") {
            Ok(t) => t,
            Err(s) => return s,
        };
        let value: serde_json::Value = match serde_json::from_str(text) {
            Ok(v) => v,
            Err(e) => return fail(SdgStatus::Config, format!("invalid JSON: {e}")),
        };
        match scenario_from_json(&value).and_then(|s| build_scenario(&s)) {
            Ok(sys) => {
                *out = Box::into_raw(Box::new(SdgScenario { sys }));
                SdgStatus::Ok
            }
            Err(e) => fail(SdgStatus::Config, e.to_string()),
        }
    })
}

/// # Safety
/// `h` must be null or a handle from [`sdg_scenario_new`], not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sdg_scenario_free(h: *mut SdgScenario) {
    if !h.is_null() {
        drop(Box::from_raw(h));
    }
}

/// Manifold dimension `n`, noise dimension `m` and the number of
/// coordinates a point takes (`n + 1` on spheres, `n` elsewhere).
///
/// # Safety
/// `h` must be a live handle; the out pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn sdg_scenario_dims(
    h: *const SdgScenario,
    n: *mut usize,
    m: *mut usize,
    point_len: *mut usize,
) -> SdgStatus {
    guarded(|| {
        if h.is_null() || n.is_null() || m.is_null() || point_len.is_null() {
            return fail(SdgStatus::NullPointer, "null argument");
        }
        let sys = &(*h).sys;
        *n = sys.n;
        *m = sys.m;
        *point_len = sys.point_len();
        SdgStatus::Ok
    })
}

unsafe fn point_and_out<'a>(
    h: *const SdgScenario,
    coords: *const f64,
    coords_len: usize,
    out: *mut f64,
    out_len: usize,
    needed: impl Fn(usize) -> usize,
) -> Result<(&'a SdeSystem, sdegeo::model::Point, &'a mut [f64]), SdgStatus> {
    if h.is_null() || coords.is_null() || out.is_null() {
        return Err(fail(SdgStatus::NullPointer, "null argument"));
    }
    let sys = &(*h).sys;
    let want = needed(sys.n);
    if out_len < want {
        return Err(fail(SdgStatus::InvalidArgument, format!("output buffer holds {out_len} values, need {want}")));
    }
    let c = std::slice::from_raw_parts(coords, coords_len);
    let p = sys.point_from_coords(c).map_err(|e| fail(SdgStatus::InvalidArgument, e.to_string()))?;
    Ok((sys, p, std::slice::from_raw_parts_mut(out, want)))
}

/// Induced metric `g = (XXᵀ)⁻¹` in chart coordinates, row-major `n×n`.
///
/// # Safety
/// `coords` must hold `coords_len` doubles and `out` at least `out_len`.
#[no_mangle]
pub unsafe extern "C" fn sdg_metric(
    h: *const SdgScenario,
    coords: *const f64,
    coords_len: usize,
    out: *mut f64,
    out_len: usize,
) -> SdgStatus {
    guarded(|| {
        let (sys, p, dst) = match point_and_out(h, coords, coords_len, out, out_len, |n| n * n) {
            Ok(v) => v,
            Err(s) => return s,
        };
        match induced_metric(sys, &p) {
            Ok(mp) => {
                let n = sys.n;
                for i in 0..n {
                    for j in 0..n {
                        dst[i * n + j] = mp.g[(i, j)];
                    }
                }
                SdgStatus::Ok
            }
            Err(e) => fail(SdgStatus::Runtime, e.to_string()),
        }
    })
}

/// Christoffel symbols `Γⁱ_jk` at index `(i·n + j)·n + k`. `connection`
/// takes an [`SdgConnection`] value.
///
/// # Safety
/// `coords` must hold `coords_len` doubles and `out` at least `out_len`.
#[no_mangle]
pub unsafe extern "C" fn sdg_christoffel(
    h: *const SdgScenario,
    connection: u32,
    coords: *const f64,
    coords_len: usize,
    out: *mut f64,
    out_len: usize,
) -> SdgStatus {
    guarded(|| {
        let (sys, p, dst) = match point_and_out(h, coords, coords_len, out, out_len, |n| n * n * n) {
            Ok(v) => v,
            Err(s) => return s,
        };
        let conn = match connection {
            c if c == SdgConnection::LeJanWatanabe as u32 => Connection::LeJanWatanabe,
            c if c == SdgConnection::Adjoint as u32 => Connection::Adjoint,
            c if c == SdgConnection::LeviCivita as u32 => Connection::LeviCivita,
            c => return fail(SdgStatus::InvalidArgument, format!("unknown connection {c}")),
        };
        match christoffel(sys, &p, conn) {
            Ok(t) => {
                let n = sys.n;
                for i in 0..n {
                    for j in 0..n {
                        for k in 0..n {
                            dst[(i * n + j) * n + k] = t.get(i, j, k);
                        }
                    }
                }
                SdgStatus::Ok
            }
            Err(e) => fail(SdgStatus::Runtime, e.to_string()),
        }
    })
}
