use std::ffi::{CStr, CString};
use std::ptr;

use quantred::catalog;
use quantred::hilbert_spaces::StratifiedPlan;
use quantred::reduction_maps::reduced_gram_with;
use quantred::strata_flow::strata_combinatorial;
use quantred::torus_actions::{orbit_volume_with, Twist};
use quantred::QuadConfig;
use quantred_ffi::*;

fn last_error() -> Option<String> {
    let p = qr_last_error_message();
    if p.is_null() {
        None
    } else {
        Some(unsafe { CStr::from_ptr(p) }.to_str().unwrap().to_string())
    }
}

fn example(name: &str) -> *mut QrAction {
    let n = CString::new(name).unwrap();
    let mut out = ptr::null_mut();
    assert_eq!(unsafe { qr_action_from_example(n.as_ptr(), &mut out) }, QrStatus::Ok);
    assert!(!out.is_null());
    out
}

#[test]
fn version_and_errors() {
    let v = unsafe { CStr::from_ptr(qr_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
    let name = CString::new("nope").unwrap();
    let mut out = ptr::null_mut();
    assert_eq!(unsafe { qr_action_from_example(name.as_ptr(), &mut out) }, QrStatus::Config);
    assert!(out.is_null());
    assert!(last_error().unwrap().contains("unknown example"));
    // a successful call clears the message
    let a = example("E1");
    assert!(last_error().is_none());
    assert_eq!(unsafe { qr_strata_count(a, ptr::null_mut()) }, QrStatus::NullPointer);
    assert!(last_error().unwrap().contains("`out`"));
    unsafe { qr_action_free(a) };
    unsafe { qr_action_free(ptr::null_mut()) };
}

#[test]
fn raw_actions_match_the_catalog() {
    let factors = [2usize];
    let degrees = [1i64];
    let weights = [1i64, -1, 0];
    let (num, den) = ([0i64], [1i64]);
    let mut a = ptr::null_mut();
    let st = unsafe {
        qr_action_new(factors.as_ptr(), degrees.as_ptr(), 1, weights.as_ptr(), 1, num.as_ptr(), den.as_ptr(), &mut a)
    };
    assert_eq!(st, QrStatus::Ok);
    let (mut n, mut r, mut s) = (0usize, 0usize, 0usize);
    assert_eq!(unsafe { qr_action_shape(a, &mut n, &mut r) }, QrStatus::Ok);
    assert_eq!((n, r), (3, 1));
    assert_eq!(unsafe { qr_strata_count(a, &mut s) }, QrStatus::Ok);
    assert_eq!(s, strata_combinatorial(&catalog::e2()).unwrap().len());
    for (k, tw) in [(4u32, QrTwist::Plain), (3, QrTwist::Plain)] {
        let mut d = 0usize;
        assert_eq!(unsafe { qr_invariant_dim(a, k, tw, &mut d) }, QrStatus::Ok);
        let expect = quantred::hilbert_spaces::invariant_basis(&catalog::e2(), k, Twist::Plain).unwrap().len();
        assert_eq!(d, expect);
    }
    // CP² has no half-form bundle
    let mut d = 0usize;
    assert_eq!(unsafe { qr_invariant_dim(a, 2, QrTwist::Halfform, &mut d) }, QrStatus::Config);
    assert!(last_error().unwrap().contains("metaplectic parity"));
    unsafe { qr_action_free(a) };

    let bad_den = [0i64];
    let mut b = ptr::null_mut();
    let st = unsafe {
        qr_action_new(factors.as_ptr(), degrees.as_ptr(), 1, weights.as_ptr(), 1, num.as_ptr(), bad_den.as_ptr(), &mut b)
    };
    assert_eq!(st, QrStatus::Config);
    let zero_deg = [0i64];
    let st = unsafe {
        qr_action_new(factors.as_ptr(), zero_deg.as_ptr(), 1, weights.as_ptr(), 1, num.as_ptr(), den.as_ptr(), &mut b)
    };
    assert_eq!(st, QrStatus::Config);
    assert!(b.is_null());
}

#[test]
fn moment_map_and_density() {
    let a = example("E2");
    // [1:1:1]: zero level, free orbit
    let re = [1.0, 1.0, 1.0];
    let im = [0.0; 3];
    let mut phi = [f64::NAN];
    assert_eq!(unsafe { qr_moment_map(a, re.as_ptr(), im.as_ptr(), 3, phi.as_mut_ptr()) }, QrStatus::Ok);
    assert!(phi[0].abs() < 1e-12);
    assert_eq!(unsafe { qr_moment_map(a, re.as_ptr(), im.as_ptr(), 2, phi.as_mut_ptr()) }, QrStatus::OutOfRange);

    let (mut v, mut e) = (0.0, 0.0);
    assert_eq!(unsafe { qr_density(a, re.as_ptr(), im.as_ptr(), 3, 400.0, QrTwist::Plain, &mut v, &mut e) }, QrStatus::Ok);
    let action = catalog::e2();
    let x = quantred::kahler_models::PointM::from_moduli(&action.model, &[1.0 / 3.0; 3]).unwrap();
    let iso = quantred::torus_actions::isotropy(&action, &x);
    let limit = orbit_volume_with(&action, &iso, &x).value / 2f64.sqrt();
    assert!((v - limit).abs() < 0.01 * limit, "{v} vs {limit}");
    // off the zero level
    let off = [1.0, 0.0, 1.0];
    assert_eq!(unsafe { qr_density(a, off.as_ptr(), im.as_ptr(), 3, 10.0, QrTwist::Plain, &mut v, &mut e) }, QrStatus::Invalid);
    unsafe { qr_action_free(a) };
}

#[test]
fn grams_agree_with_the_library() {
    let a = example("E3");
    let (mut up, mut down) = (ptr::null_mut(), ptr::null_mut());
    assert_eq!(unsafe { qr_gram_upstairs(a, 4, QrTwist::Halfform, 1, 2000, 3, &mut up) }, QrStatus::Ok);
    assert_eq!(unsafe { qr_gram_downstairs(a, 4, QrTwist::Halfform, 1, 2000, 3, &mut down) }, QrStatus::Ok);
    let mut n = 0usize;
    assert_eq!(unsafe { qr_gram_dim(down, &mut n) }, QrStatus::Ok);
    let action = catalog::e3();
    let plan = StratifiedPlan::new(&action).unwrap();
    let quad = QuadConfig { samples: 2000, seed: 3, ..Default::default() };
    let lib = reduced_gram_with(&action, &plan, 4, Twist::Halfform, 1, &quad).unwrap().gram;
    assert_eq!(n, lib.matrix.len());
    for i in 0..n {
        for j in 0..n {
            let (mut re, mut im, mut err) = (0.0, 0.0, 0.0);
            assert_eq!(unsafe { qr_gram_entry(down, i, j, &mut re, &mut im, &mut err) }, QrStatus::Ok);
            assert_eq!((re, im, err), (lib.matrix[i][j].re, lib.matrix[i][j].im, lib.mc_error[i][j]));
        }
    }
    let (mut v, mut e) = (0.0, 0.0);
    assert_eq!(unsafe { qr_unitarity_defect(up, down, &mut v, &mut e) }, QrStatus::Ok);
    let lib_defect = quantred::asymptotics_lab::unitarity_defect(&action, 4, Twist::Halfform, 1, &quad).unwrap();
    assert_eq!(v, lib_defect.defect.value);
    let (mut re, mut im, mut err) = (0.0, 0.0, 0.0);
    assert_eq!(unsafe { qr_gram_entry(up, n, 0, &mut re, &mut im, &mut err) }, QrStatus::OutOfRange);
    let mut bad = ptr::null_mut();
    assert_eq!(unsafe { qr_gram_upstairs(a, 4, QrTwist::Plain, 3, 2000, 3, &mut bad) }, QrStatus::Config);
    assert_eq!(unsafe { qr_gram_upstairs(a, 4, QrTwist::Plain, 1, 0, 3, &mut bad) }, QrStatus::Config);
    // empty invariant space is reported, not a crash
    let e1 = example("E1");
    assert_eq!(unsafe { qr_gram_upstairs(e1, 3, QrTwist::Plain, 1, 100, 3, &mut bad) }, QrStatus::Invalid);
    assert!(bad.is_null());
    unsafe {
        qr_gram_free(up);
        qr_gram_free(down);
        qr_action_free(a);
        qr_action_free(e1);
    }
}

#[test]
fn scenarios_through_the_abi() {
    let bad = CString::new(r#"{"example": "E2", "k_list": [], "twist": "halfform"}"#).unwrap();
    let mut s = ptr::null_mut();
    assert_eq!(unsafe { qr_scenario_from_json(bad.as_ptr(), &mut s) }, QrStatus::Config);
    let msg = last_error().unwrap();
    assert!(msg.contains("empty k_list") && msg.contains("metaplectic parity"));
    assert_eq!(msg.lines().count(), 2);

    let good = CString::new(r#"{"example": "E1", "k_list": [2, 3], "quad": {"samples": 1000}}"#).unwrap();
    assert_eq!(unsafe { qr_scenario_from_json(good.as_ptr(), &mut s) }, QrStatus::Ok);
    let mut needed = 0usize;
    assert_eq!(unsafe { qr_scenario_describe(s, ptr::null_mut(), 0, &mut needed) }, QrStatus::OutOfRange);
    let mut buf = vec![0 as std::ffi::c_char; needed];
    assert_eq!(unsafe { qr_scenario_describe(s, buf.as_mut_ptr(), buf.len(), &mut needed) }, QrStatus::Ok);
    let text = unsafe { CStr::from_ptr(buf.as_ptr()) }.to_str().unwrap();
    assert!(text.contains("no invariant sections at k=3"));

    let dir = tempfile::tempdir().unwrap();
    let d = CString::new(dir.path().to_str().unwrap()).unwrap();
    assert_eq!(unsafe { qr_scenario_run(s, d.as_ptr()) }, QrStatus::Ok);
    assert!(dir.path().join("run_manifest.json").exists());
    assert!(dir.path().join("defects.csv").exists());
    unsafe { qr_scenario_free(s) };

    let invalid_utf8 = [0xffu8, 0xfe, 0];
    assert_eq!(
        unsafe { qr_scenario_from_json(invalid_utf8.as_ptr() as *const std::ffi::c_char, &mut s) },
        QrStatus::InvalidUtf8
    );
}
