use sdegeo_ffi::*;
use std::ffi::{CStr, CString};
use std::ptr;

fn last_error() -> String {
    let p = sdg_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn scenario(spec: &str) -> *mut SdgScenario {
    let spec = CString::new(spec).unwrap();
    let mut h = ptr::null_mut();
    assert_eq!(unsafe { sdg_scenario_new(spec.as_ptr(), &mut h) }, SdgStatus::Ok);
    assert!(!h.is_null());
    h
}

#[test]
fn sphere_metric_and_christoffel() {
    let h = scenario(r#"{"name": "sphere-gradient", "n": 2}"#);
    let (mut n, mut m, mut len) = (0usize, 0usize, 0usize);
    assert_eq!(unsafe { sdg_scenario_dims(h, &mut n, &mut m, &mut len) }, SdgStatus::Ok);
    assert_eq!((n, m, len), (2, 3, 3));

    // Stereographic charts are conformal: g is a multiple of the identity.
    let p = [0.0, 0.0, -1.0];
    let mut g = [0.0; 4];
    assert_eq!(unsafe { sdg_metric(h, p.as_ptr(), 3, g.as_mut_ptr(), 4) }, SdgStatus::Ok);
    assert!((g[0] - g[3]).abs() < 1e-12 && g[1].abs() < 1e-12 && g[0] > 0.0, "{g:?}");

    let q = [0.6, 0.0, 0.8];
    let mut lw = [0.0; 8];
    let mut lc = [0.0; 8];
    unsafe {
        assert_eq!(sdg_christoffel(h, SdgConnection::LeJanWatanabe as u32, q.as_ptr(), 3, lw.as_mut_ptr(), 8), SdgStatus::Ok);
        assert_eq!(sdg_christoffel(h, SdgConnection::LeviCivita as u32, q.as_ptr(), 3, lc.as_mut_ptr(), 8), SdgStatus::Ok);
    }
    let gap = lw.iter().zip(&lc).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(gap < 1e-6, "gradient system: LW = Levi-Civita, gap {gap}");
    unsafe { sdg_scenario_free(h) };
}

#[test]
fn argument_errors_set_status_and_message() {
    let h = scenario(r#"{"name": "circle"}"#);
    let p = [0.3];
    let mut small = [0.0; 0];
    unsafe {
        assert_eq!(sdg_metric(h, p.as_ptr(), 1, small.as_mut_ptr(), 0), SdgStatus::InvalidArgument);
        assert!(last_error().contains("need 1"));
        let mut g = [0.0; 1];
        assert_eq!(sdg_metric(h, p.as_ptr(), 1, g.as_mut_ptr(), 1), SdgStatus::Ok);
        assert!((g[0] - 1.0).abs() < 1e-12);
        assert_eq!(sdg_christoffel(h, 9, p.as_ptr(), 1, g.as_mut_ptr(), 1), SdgStatus::InvalidArgument);
        assert!(last_error().contains("connection"));
        assert_eq!(sdg_metric(ptr::null(), p.as_ptr(), 1, g.as_mut_ptr(), 1), SdgStatus::NullPointer);
        sdg_scenario_free(h);
        sdg_scenario_free(ptr::null_mut());
    }

    let bad = CString::new(r#"{"name": "torus"}"#).unwrap();
    let mut h = ptr::null_mut();
    assert_eq!(unsafe { sdg_scenario_new(bad.as_ptr(), &mut h) }, SdgStatus::Config);
    assert!(h.is_null());
    assert!(last_error().contains("torus"));
}

#[test]
fn run_json_reports_and_frees() {
    let cfg = CString::new(r#"{"command": "verify", "scenario": {"name": "twisted-plane", "alpha": 0.5}, "verify_points": 2, "verify_probes": 10}"#).unwrap();
    let mut out = ptr::null_mut();
    assert_eq!(unsafe { sdg_run_json(cfg.as_ptr(), &mut out) }, SdgStatus::Ok);
    let body = unsafe { CStr::from_ptr(out) }.to_str().unwrap().to_owned();
    unsafe { sdg_string_free(out) };
    let v: serde_json::Value = serde_json::from_str(&body).unwrap();
    assert_eq!(v["passed"], true);
    assert_eq!(v["result"]["scenario"], "twisted-plane");

    let cfg = CString::new(r#"{"command": "verify"}"#).unwrap();
    let mut out = ptr::null_mut();
    assert_eq!(unsafe { sdg_run_json(cfg.as_ptr(), &mut out) }, SdgStatus::Config);
    assert!(out.is_null());
    assert!(last_error().contains("scenario"));
    assert_eq!(unsafe { sdg_run_json(ptr::null(), &mut out) }, SdgStatus::NullPointer);
}

#[test]
fn version_matches_crate() {
    let v = unsafe { CStr::from_ptr(sdg_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_declares_the_api() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/sdegeo.h")).unwrap();
    for name in [
        "sdg_run_json",
        "sdg_string_free",
        "sdg_last_error",
        "sdg_scenario_new",
        "sdg_scenario_free",
        "sdg_scenario_dims",
        "sdg_metric",
        "sdg_christoffel",
        "typedef struct SdgScenario SdgScenario",
        "SDG_STATUS_CHECKS_FAILED",
        "SDG_CONNECTION_LEVI_CIVITA",
    ] {
        assert!(header.contains(name), "header lacks {name}");
    }
}

#[test]
fn header_compiles_as_c() {
    let header = concat!(env!("CARGO_MANIFEST_DIR"), "/include/sdegeo.h");
    let Ok(out) = std::process::Command::new("cc").args(["-fsyntax-only", "-Wall", "-Werror", "-x", "c", header]).output() else {
        eprintln!("no C compiler; skipped");
        return;
    };
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}
