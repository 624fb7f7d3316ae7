use std::ffi::{CStr, CString};
use std::path::Path;
use std::ptr;

use reachguard::config::ExperimentConfig;
use reachguard::grid::Grid3;
use reachguard::pipeline;
use reachguard_ffi::*;

fn last_error() -> String {
    let p = rg_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn version_is_crate_version() {
    let v = unsafe { CStr::from_ptr(rg_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn null_pointers_are_reported() {
    unsafe {
        assert_eq!(rg_config_default(ptr::null_mut()), RgStatus::NullPointer);
        assert!(last_error().contains("out"));
        let mut vg = ptr::null_mut();
        assert_eq!(rg_value_grid_load(ptr::null(), &mut vg), RgStatus::NullPointer);
        rg_config_free(ptr::null_mut());
        rg_value_grid_free(ptr::null_mut());
        rg_ensemble_free(ptr::null_mut());
        rg_filter_free(ptr::null_mut());
    }
}

#[test]
fn missing_and_malformed_files() {
    let dir = tempfile::tempdir().unwrap();
    let missing = CString::new(dir.path().join("nope").to_str().unwrap()).unwrap();
    let bad = dir.path().join("bad.bin");
    std::fs::write(&bad, b"garbage\n").unwrap();
    let bad = CString::new(bad.to_str().unwrap()).unwrap();
    unsafe {
        let mut vg = ptr::null_mut();
        assert_eq!(rg_value_grid_load(missing.as_ptr(), &mut vg), RgStatus::Io);
        assert_eq!(rg_value_grid_load(bad.as_ptr(), &mut vg), RgStatus::Format);
        assert!(vg.is_null());
        let mut ens = ptr::null_mut();
        assert_eq!(rg_ensemble_load(bad.as_ptr(), &mut ens), RgStatus::Format);
        let mut cfg = ptr::null_mut();
        assert_eq!(rg_config_load(missing.as_ptr(), &mut cfg), RgStatus::Io);
    }
}

#[test]
fn invalid_config_maps_to_status() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("c.toml");
    std::fs::write(&p, "[calibration]\nalpha_cal = 2.0\n").unwrap();
    let p = CString::new(p.to_str().unwrap()).unwrap();
    let mut cfg = ptr::null_mut();
    unsafe {
        assert_eq!(rg_config_load(p.as_ptr(), &mut cfg), RgStatus::InvalidConfig);
    }
    assert!(last_error().contains("alpha"));
}

#[test]
fn config_hash_matches_core() {
    unsafe {
        let mut cfg = ptr::null_mut();
        assert_eq!(rg_config_default(&mut cfg), RgStatus::Ok);
        let mut buf = [0 as std::ffi::c_char; 65];
        assert_eq!(rg_config_hash(cfg, buf.as_mut_ptr(), 10), RgStatus::InvalidArgument);
        assert_eq!(rg_config_hash(cfg, buf.as_mut_ptr(), buf.len()), RgStatus::Ok);
        let h = CStr::from_ptr(buf.as_ptr()).to_str().unwrap();
        assert_eq!(h, ExperimentConfig::default().hash());
        rg_config_free(cfg);
    }
}

#[test]
fn step_and_bad_action() {
    unsafe {
        let mut cfg = ptr::null_mut();
        rg_config_default(&mut cfg);
        let s = [0.0, 0.0, 0.0];
        let mut out = [0.0; 3];
        assert_eq!(rg_step(cfg, s.as_ptr(), 1, out.as_mut_ptr()), RgStatus::Ok);
        assert!((out[0] - 0.05).abs() < 1e-12 && out[1].abs() < 1e-12);
        assert_eq!(rg_step(cfg, s.as_ptr(), 3, out.as_mut_ptr()), RgStatus::InvalidArgument);
        assert_eq!(
            rg_step(cfg, s.as_ptr(), -1, out.as_mut_ptr()),
            RgStatus::InvalidArgument
        );
        rg_config_free(cfg);
    }
}

#[test]
fn jrd_worked_value() {
    let means = [0.0, 2.0];
    let vars = [1.0, 1.0];
    let mut u = 0.0;
    unsafe {
        assert_eq!(rg_jrd(means.as_ptr(), vars.as_ptr(), 2, 1, &mut u), RgStatus::Ok);
    }
    let expected = -(0.5 * (1.0 + (-1.0f64).exp())).ln();
    assert!((u - expected).abs() < 1e-12, "{u}");
    let zero = [0.0, 0.0];
    unsafe {
        assert_eq!(
            rg_jrd(means.as_ptr(), zero.as_ptr(), 2, 1, &mut u),
            RgStatus::InvalidConfig
        );
        assert_eq!(
            rg_jrd(means.as_ptr(), vars.as_ptr(), 2, 0, &mut u),
            RgStatus::InvalidArgument
        );
    }
}

#[test]
fn calibrate_ranks_and_degenerate() {
    let scores: Vec<f64> = (1..=100).map(f64::from).collect();
    let (mut eps, mut deg) = (0.0, true);
    unsafe {
        assert_eq!(
            rg_calibrate(scores.as_ptr(), 100, 0.05, &mut eps, &mut deg),
            RgStatus::Ok
        );
    }
    assert_eq!((eps, deg), (96.0, false));
    unsafe {
        assert_eq!(rg_calibrate(scores.as_ptr(), 4, 0.05, &mut eps, &mut deg), RgStatus::Ok);
    }
    assert!(eps.is_infinite() && deg);
    unsafe {
        assert_eq!(
            rg_calibrate(scores.as_ptr(), 0, 0.05, &mut eps, &mut deg),
            RgStatus::InsufficientData
        );
    }
}

#[test]
fn grid_filter_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let toml = "[grid]\nnx = 31\nny = 31\nntheta = 24\n[solver]\ngamma = 1.0\n";
    let cpath = dir.path().join("c.toml");
    std::fs::write(&cpath, toml).unwrap();
    let cpath = CString::new(cpath.to_str().unwrap()).unwrap();
    unsafe {
        let mut cfg = ptr::null_mut();
        assert_eq!(rg_config_load(cpath.as_ptr(), &mut cfg), RgStatus::Ok);
        let mut vg = ptr::null_mut();
        assert_eq!(rg_value_grid_solve_ground_truth(cfg, &mut vg), RgStatus::Ok);

        let mut v = 0.0;
        assert_eq!(rg_value_grid_value(vg, 0.0, 0.0, 0.0, &mut v), RgStatus::Ok);
        assert!(v < 0.0);
        assert_eq!(rg_value_grid_value(vg, -0.9, 0.9, 3.0, &mut v), RgStatus::Ok);
        assert!(v > 0.0);

        // Saved grids load back through the ABI.
        let core_cfg = ExperimentConfig::load(Path::new(cpath.to_str().unwrap())).unwrap();
        assert_eq!(core_cfg.grid, Grid3::square(31, 24, 1.0));
        let vg_core = pipeline::ground_truth(&core_cfg).unwrap();
        let vpath = dir.path().join("gt.bin");
        vg_core.save(&vpath, None).unwrap();
        let vpath = CString::new(vpath.to_str().unwrap()).unwrap();
        let mut loaded = ptr::null_mut();
        assert_eq!(rg_value_grid_load(vpath.as_ptr(), &mut loaded), RgStatus::Ok);
        let mut w = 0.0;
        rg_value_grid_value(loaded, -0.9, 0.9, 3.0, &mut w);
        assert!((w - v).abs() < 1e-6);

        let mut f = ptr::null_mut();
        assert_eq!(
            rg_filter_new(cfg, vg, ptr::null(), f64::NAN, &mut f),
            RgStatus::Uncalibrated
        );
        assert_eq!(rg_filter_new(cfg, vg, ptr::null(), 0.0, &mut f), RgStatus::Ok);
        let mut d = RgDecision::default();
        assert_eq!(rg_filter_step(f, -0.9, 0.9, 0.0, 1, &mut d), RgStatus::Ok);
        assert_eq!((d.executed, d.intervened, d.halted), (1, false, false));
        assert!(d.u_fallback.is_nan());
        // Straight into the obstacle from close range is overridden.
        assert_eq!(rg_filter_step(f, -0.62, 0.0, 0.0, 1, &mut d), RgStatus::Ok);
        assert!(d.intervened && d.executed != 1 && d.executed >= 0);
        assert_eq!(rg_filter_step(f, -0.62, 0.0, 0.0, 7, &mut d), RgStatus::InvalidArgument);

        rg_filter_free(f);
        rg_value_grid_free(loaded);
        rg_value_grid_free(vg);
        rg_config_free(cfg);
    }
}
