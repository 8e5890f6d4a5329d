use std::ffi::{CStr, CString};
use std::path::PathBuf;
use std::process::Command;
use std::ptr;

use scsrec::bandit::{compute_reward, Baseline, BanditState, ContextVector, Exploration, RewardConfig, RewardSample};
use scsrec::evaluation::permutation_test;
use scsrec::patient_state::StateFeatures;
use scsrec::Arm;
use scsrec_ffi::*;

fn arms() -> Vec<ScsArm> {
    (1..=3)
        .map(|p| ScsArm {
            program_id: p,
            intensity_bin: p % 2,
        })
        .collect()
}

fn new_bandit(dim: usize) -> *mut ScsBandit {
    let a = arms();
    let mut out = ptr::null_mut();
    let status = unsafe { scs_bandit_new(a.as_ptr(), a.len(), dim, 1.0, 0.0, &mut out) };
    assert_eq!(status, ScsStatus::Ok);
    out
}

fn context(i: usize) -> Vec<f64> {
    vec![1.0, (i as f64 * 0.37).sin(), (i as f64 * 0.11).cos()]
}

#[test]
fn bandit_matches_core_engine() {
    let handle = new_bandit(3);
    let mut core = BanditState::new(arms().into_iter().map(Arm::from), 3, 1.0, Exploration::default()).unwrap();
    for i in 0..40 {
        let x = context(i);
        let arm = arms()[i % 3];
        let reward = 0.1 * (i % 5) as f64 - 0.2;
        assert_eq!(unsafe { scs_bandit_update(handle, x.as_ptr(), 3, arm, reward) }, ScsStatus::Ok);
        core.update(&RewardSample {
            context: ContextVector(x),
            arm: arm.into(),
            reward,
            date: chrono::NaiveDate::MIN,
        })
        .unwrap();
    }
    let x = context(99);
    let mut out_arms = [ScsArm {
        program_id: 0,
        intensity_bin: 0,
    }; 3];
    let mut preds = [0.0; 3];
    let mut n = 0;
    let status = unsafe {
        scs_bandit_predict(handle, x.as_ptr(), 3, out_arms.as_mut_ptr(), preds.as_mut_ptr(), 3, &mut n)
    };
    assert_eq!(status, ScsStatus::Ok);
    assert_eq!(n, 3);
    let expected = core.predict_rewards(&ContextVector(x.clone())).unwrap();
    for ((arm, p), (ea, ep)) in out_arms.iter().zip(preds).zip(expected) {
        assert_eq!(Arm::from(*arm), ea);
        assert!((p - ep).abs() < 1e-12);
    }
    let mut best = out_arms[0];
    assert_eq!(unsafe { scs_bandit_recommend(handle, x.as_ptr(), 3, &mut best) }, ScsStatus::Ok);
    assert_eq!(Arm::from(best), core.recommend(&ContextVector(x)).unwrap());

    let mut json = ptr::null_mut();
    assert_eq!(unsafe { scs_bandit_to_json(handle, &mut json) }, ScsStatus::Ok);
    let text = unsafe { CStr::from_ptr(json) }.to_str().unwrap().to_owned();
    assert_eq!(BanditState::from_json(&text).unwrap(), core);
    unsafe {
        scs_string_free(json);
        scs_bandit_free(handle);
    }
}

#[test]
fn error_codes_and_messages() {
    let handle = new_bandit(3);
    let x = [1.0, 0.0];
    let arm = arms()[0];
    assert_eq!(
        unsafe { scs_bandit_update(handle, x.as_ptr(), 2, arm, 0.0) },
        ScsStatus::DimensionMismatch
    );
    assert!(!last_error_string().is_empty());
    let missing = ScsArm {
        program_id: 42,
        intensity_bin: 0,
    };
    let x = context(0);
    assert_eq!(
        unsafe { scs_bandit_update(handle, x.as_ptr(), 3, missing, 0.0) },
        ScsStatus::UnknownArm
    );
    assert_eq!(
        unsafe { scs_bandit_update(ptr::null_mut(), x.as_ptr(), 3, arm, 0.0) },
        ScsStatus::NullPointer
    );
    assert_eq!(
        unsafe { scs_bandit_update(handle, ptr::null(), 3, arm, 0.0) },
        ScsStatus::NullPointer
    );
    assert_eq!(unsafe { scs_bandit_update(handle, x.as_ptr(), 3, arm, 0.0) }, ScsStatus::Ok);
    assert_eq!(last_error_string(), "");

    let bad = CString::new("{not json").unwrap();
    let mut out = ptr::null_mut();
    assert_eq!(unsafe { scs_bandit_from_json(bad.as_ptr(), &mut out) }, ScsStatus::Parse);
    assert!(out.is_null());

    let mut empty = ptr::null_mut();
    assert_eq!(
        unsafe { scs_bandit_new(ptr::null(), 0, 3, 1.0, 0.0, &mut empty) },
        ScsStatus::InvalidArgument
    );
    unsafe {
        scs_bandit_free(handle);
        scs_bandit_free(ptr::null_mut());
        scs_string_free(ptr::null_mut());
    }
    assert_eq!(unsafe { scs_bandit_arm_count(ptr::null()) }, 0);
}

#[test]
fn scalar_functions_match_core() {
    let today = [0.6, 0.5, 0.9, 0.4, 0.7, 0.2, 0.55];
    let base = [0.5; 7];
    let mut r = 0.0;
    assert_eq!(
        unsafe { scs_compute_reward(today.as_ptr(), base.as_ptr(), ptr::null(), &mut r) },
        ScsStatus::Ok
    );
    let expected = compute_reward(
        &StateFeatures(today),
        &Baseline(StateFeatures(base)),
        &RewardConfig::default(),
    );
    assert_eq!(r, expected);
    let weights = [1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0];
    assert_eq!(
        unsafe { scs_compute_reward(today.as_ptr(), base.as_ptr(), weights.as_ptr(), &mut r) },
        ScsStatus::Ok
    );
    assert!((r - 0.1).abs() < 1e-12);

    let a = [3.1, 2.0, 4.4, 5.0, 1.2];
    let b = [6.0, 5.5, 7.1, 4.9];
    let mut p = 0.0;
    assert_eq!(
        unsafe { scs_permutation_test(a.as_ptr(), a.len(), b.as_ptr(), b.len(), 500, 3, &mut p) },
        ScsStatus::Ok
    );
    assert_eq!(p, permutation_test(&a, &b, 500, 3).unwrap());
    assert_eq!(
        unsafe { scs_permutation_test(a.as_ptr(), a.len(), b.as_ptr(), 0, 500, 3, &mut p) },
        ScsStatus::InvalidArgument
    );
}

#[test]
fn classification_boundaries() {
    let mut g = ScsSubgroup::ActiveRecommendations;
    let classify = |f: [f64; 5], g: &mut ScsSubgroup| unsafe { scs_classify_subgroup(f.as_ptr(), 0.8, 0.9, g) };
    assert_eq!(classify([0.5, 0.3, 0.2, 0.0, 0.0], &mut g), ScsStatus::Ok);
    assert_eq!(g, ScsSubgroup::ActiveRecommendations);
    assert_eq!(classify([0.5, 0.375, 0.125, 0.0, 0.0], &mut g), ScsStatus::Ok);
    assert_eq!(g, ScsSubgroup::ActiveMonitoring);
    assert_eq!(classify([0.0, 0.0, 0.0625, 0.4375, 0.5], &mut g), ScsStatus::Ok);
    assert_eq!(g, ScsSubgroup::OpportunityForFollowUp);
    assert_eq!(classify([0.5, 0.6, 0.0, 0.0, 0.0], &mut g), ScsStatus::InvalidArgument);

    let cmp = [0.125, 0.125, 0.25, 0.25, 0.25];
    let mut d = ScsDwellChange::Same;
    let rec = [0.25, 0.25, 0.25, 0.125, 0.125];
    assert_eq!(
        unsafe { scs_classify_dwell_change(cmp.as_ptr(), rec.as_ptr(), 0.25, 0, &mut d) },
        ScsStatus::Ok
    );
    assert_eq!(d, ScsDwellChange::Same);
    let rec = [0.25, 0.3125, 0.25, 0.0625, 0.125];
    assert_eq!(
        unsafe { scs_classify_dwell_change(cmp.as_ptr(), rec.as_ptr(), 0.25, 0, &mut d) },
        ScsStatus::Ok
    );
    assert_eq!(d, ScsDwellChange::Improved);
    assert_eq!(
        unsafe { scs_classify_dwell_change(rec.as_ptr(), cmp.as_ptr(), 0.25, 0, &mut d) },
        ScsStatus::Ok
    );
    assert_eq!(d, ScsDwellChange::Worsened);

    let mut s = ScsPatientState::C;
    let f = [0.12; 7];
    assert_eq!(unsafe { scs_assign_state(f.as_ptr(), &mut s) }, ScsStatus::Ok);
    assert_eq!(s, ScsPatientState::E);
}

fn target_dir() -> PathBuf {
    let exe = std::env::current_exe().unwrap();
    exe.parent().unwrap().parent().unwrap().to_owned()
}

/// The static archive is only produced by `cargo build`; a test run holds
/// the target directory lock, so build into a separate one when needed.
fn static_lib() -> PathBuf {
    let lib = target_dir().join("libscsrec_ffi.a");
    if lib.exists() {
        return lib;
    }
    let own = target_dir().parent().unwrap().join("ffi-c");
    let cargo = std::env::var("CARGO").unwrap_or_else(|_| "cargo".to_owned());
    let status = Command::new(cargo)
        .args(["build", "-p", "scsrec-ffi", "--lib", "--target-dir"])
        .arg(&own)
        .status()
        .unwrap();
    assert!(status.success());
    own.join("debug").join("libscsrec_ffi.a")
}

#[test]
fn c_program_links_against_header() {
    if Command::new("cc").arg("--version").output().is_err() {
        eprintln!("cc not available, skipping");
        return;
    }
    let manifest = PathBuf::from(env!("CARGO_MANIFEST_DIR"));
    let lib = static_lib();
    let out_dir = std::env::temp_dir().join(format!("scsrec-ffi-{}", std::process::id()));
    std::fs::create_dir_all(&out_dir).unwrap();
    let exe = out_dir.join("smoke");
    let status = Command::new("cc")
        .arg(manifest.join("tests/c/smoke.c"))
        .arg("-I")
        .arg(manifest.join("include"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .status()
        .unwrap();
    assert!(status.success());
    let run = Command::new(&exe).output().unwrap();
    let stdout = String::from_utf8_lossy(&run.stdout);
    assert!(
        run.status.success(),
        "{stdout}{}",
        String::from_utf8_lossy(&run.stderr)
    );
    assert!(stdout.starts_with("ok "));
    std::fs::remove_dir_all(&out_dir).ok();
}
