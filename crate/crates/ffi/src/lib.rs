//! C ABI over the recommender engine.
//!
//! Every fallible function returns an [`ScsStatus`]; on failure a message
//! is available from [`scs_last_error`] on the same thread. Engine state
//! lives behind the opaque [`ScsBandit`] handle, released with
//! [`scs_bandit_free`]. Strings returned to the caller are released with
//! [`scs_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};

use scsrec::bandit::{compute_reward, Baseline, BanditError, BanditState, ContextVector, Exploration, RewardConfig, RewardSample};
use scsrec::evaluation::permutation_test;
use scsrec::patient_state::{
    assign_state, classify_dwell_change, classify_subgroup, DwellChange, DwellChangeRule, DwellProfile,
    PatientState, PerState, StateFeatures, StateModel, Subgroup, SubgroupThresholds, ThresholdMode, N_DIMS,
    N_STATES,
};
use scsrec::Arm;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScsStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    DimensionMismatch = 3,
    UnknownArm = 4,
    Numerical = 5,
    Parse = 6,
    Panic = 7,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScsArm {
    pub program_id: u32,
    pub intensity_bin: u32,
}

impl From<ScsArm> for Arm {
    fn from(a: ScsArm) -> Self {
        Arm::new(a.program_id, a.intensity_bin)
    }
}

impl From<Arm> for ScsArm {
    fn from(a: Arm) -> Self {
        ScsArm {
            program_id: a.program_id,
            intensity_bin: a.intensity_bin,
        }
    }
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScsSubgroup {
    ActiveRecommendations = 0,
    ActiveMonitoring = 1,
    OpportunityForFollowUp = 2,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScsDwellChange {
    Improved = 0,
    Worsened = 1,
    Same = 2,
}

/// Patient State, A (best) through E (worst).
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScsPatientState {
    A = 0,
    B = 1,
    C = 2,
    D = 3,
    E = 4,
}

/// Opaque engine handle.
pub struct ScsBandit {
    state: BanditState,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(message: impl Into<String>) {
    let text = message.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(text).expect("nul bytes removed"));
}

struct Failure(ScsStatus, String);

type FfiResult = Result<(), Failure>;

fn fail<T>(status: ScsStatus, message: impl Into<String>) -> Result<T, Failure> {
    Err(Failure(status, message.into()))
}

impl From<BanditError> for Failure {
    fn from(e: BanditError) -> Self {
        let status = match e {
            BanditError::DimensionMismatch { .. } => ScsStatus::DimensionMismatch,
            BanditError::UnknownArm(_) => ScsStatus::UnknownArm,
            BanditError::Numerical(_) => ScsStatus::Numerical,
            BanditError::Parse(_) => ScsStatus::Parse,
            _ => ScsStatus::InvalidArgument,
        };
        Failure(status, e.to_string())
    }
}

/// Runs `f`, converting errors and panics into a status code.
fn guard(f: impl FnOnce() -> FfiResult) -> ScsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            ScsStatus::Ok
        }
        Ok(Err(Failure(status, message))) => {
            set_error(message);
            status
        }
        Err(_) => {
            set_error("internal panic");
            ScsStatus::Panic
        }
    }
}

fn non_null<T>(p: *const T, name: &str) -> FfiResult {
    if p.is_null() {
        fail(ScsStatus::NullPointer, format!("{name} is null"))
    } else {
        Ok(())
    }
}

/// # Safety
/// `p` must be null or point to `len` readable values.
unsafe fn slice<'a, T>(p: *const T, len: usize, name: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    non_null(p, name)?;
    Ok(std::slice::from_raw_parts(p, len))
}

/// # Safety
/// `p` must be null or point to a live handle.
unsafe fn bandit<'a>(p: *const ScsBandit) -> Result<&'a ScsBandit, Failure> {
    non_null(p, "bandit")?;
    Ok(&*p)
}

/// Message describing the last failure on this thread, or an empty string.
/// Valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn scs_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn scs_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Creates an engine over `n_arms` arms with `dim`-dimensional contexts.
///
/// # Safety
/// `arms` must point to `n_arms` values and `out` to writable storage.
#[no_mangle]
pub unsafe extern "C" fn scs_bandit_new(
    arms: *const ScsArm,
    n_arms: usize,
    dim: usize,
    lambda: f64,
    alpha: f64,
    out: *mut *mut ScsBandit,
) -> ScsStatus {
    guard(|| {
        non_null(out, "out")?;
        let arms = slice(arms, n_arms, "arms")?;
        if n_arms == 0 || dim == 0 {
            return fail(ScsStatus::InvalidArgument, "need at least one arm and a positive dim");
        }
        let state = BanditState::new(arms.iter().map(|a| Arm::from(*a)), dim, lambda, Exploration { alpha })?;
        *out = Box::into_raw(Box::new(ScsBandit { state }));
        Ok(())
    })
}

/// Restores an engine from its JSON form.
///
/// # Safety
/// `json` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn scs_bandit_from_json(json: *const c_char, out: *mut *mut ScsBandit) -> ScsStatus {
    guard(|| {
        non_null(out, "out")?;
        non_null(json, "json")?;
        let text = match CStr::from_ptr(json).to_str() {
            Ok(t) => t,
            Err(_) => return fail(ScsStatus::Parse, "json is not valid UTF-8"),
        };
        let state = BanditState::from_json(text)?;
        *out = Box::into_raw(Box::new(ScsBandit { state }));
        Ok(())
    })
}

/// Serializes the engine. Release the string with [`scs_string_free`].
///
/// # Safety
/// `bandit` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn scs_bandit_to_json(bandit_ptr: *const ScsBandit, out: *mut *mut c_char) -> ScsStatus {
    guard(|| {
        non_null(out, "out")?;
        let b = bandit(bandit_ptr)?;
        let text = CString::new(b.state.to_json()).expect("JSON has no nul bytes");
        *out = text.into_raw();
        Ok(())
    })
}

/// Number of arms known to the engine.
///
/// # Safety
/// `bandit` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn scs_bandit_arm_count(bandit_ptr: *const ScsBandit) -> usize {
    if bandit_ptr.is_null() {
        return 0;
    }
    (*bandit_ptr).state.models().len()
}

/// Context dimension of the engine.
///
/// # Safety
/// `bandit` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn scs_bandit_dim(bandit_ptr: *const ScsBandit) -> usize {
    if bandit_ptr.is_null() {
        return 0;
    }
    (*bandit_ptr).state.dim()
}

/// Folds one observation into the model of `arm`.
///
/// # Safety
/// `bandit` must be a live handle and `context` point to `dim` values.
#[no_mangle]
pub unsafe extern "C" fn scs_bandit_update(
    bandit_ptr: *mut ScsBandit,
    context: *const f64,
    dim: usize,
    arm: ScsArm,
    reward: f64,
) -> ScsStatus {
    guard(|| {
        non_null(bandit_ptr, "bandit")?;
        let b = &mut *bandit_ptr;
        let x = slice(context, dim, "context")?;
        b.state.update(&RewardSample {
            context: ContextVector(x.to_vec()),
            arm: arm.into(),
            reward,
            date: chrono::NaiveDate::MIN,
        })?;
        Ok(())
    })
}

/// Writes the arm with the highest predicted reward to `out`.
///
/// # Safety
/// `bandit` must be a live handle, `context` point to `dim` values and
/// `out` be writable.
#[no_mangle]
pub unsafe extern "C" fn scs_bandit_recommend(
    bandit_ptr: *const ScsBandit,
    context: *const f64,
    dim: usize,
    out: *mut ScsArm,
) -> ScsStatus {
    guard(|| {
        non_null(out, "out")?;
        let b = bandit(bandit_ptr)?;
        let x = slice(context, dim, "context")?;
        *out = b.state.recommend(&ContextVector(x.to_vec()))?.into();
        Ok(())
    })
}

/// Writes up to `capacity` (arm, prediction) pairs in arm order and the
/// total arm count to `written`.
///
/// # Safety
/// `bandit` must be a live handle, `context` point to `dim` values, `arms`
/// and `predictions` to `capacity` writable slots, `written` be writable.
#[no_mangle]
pub unsafe extern "C" fn scs_bandit_predict(
    bandit_ptr: *const ScsBandit,
    context: *const f64,
    dim: usize,
    arms: *mut ScsArm,
    predictions: *mut f64,
    capacity: usize,
    written: *mut usize,
) -> ScsStatus {
    guard(|| {
        non_null(written, "written")?;
        let b = bandit(bandit_ptr)?;
        let x = slice(context, dim, "context")?;
        let predicted = b.state.predict_rewards(&ContextVector(x.to_vec()))?;
        if capacity > 0 {
            non_null(arms, "arms")?;
            non_null(predictions, "predictions")?;
        }
        for (i, (arm, p)) in predicted.iter().take(capacity).enumerate() {
            *arms.add(i) = (*arm).into();
            *predictions.add(i) = *p;
        }
        *written = predicted.len();
        Ok(())
    })
}

/// # Safety
/// `bandit` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn scs_bandit_free(bandit_ptr: *mut ScsBandit) {
    if !bandit_ptr.is_null() {
        drop(Box::from_raw(bandit_ptr));
    }
}

/// # Safety
/// `s` must be null or a string returned by this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn scs_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Reward of a day against a baseline, both as 7 normalized features.
/// `weights` may be null for equal weights.
///
/// # Safety
/// `today` and `baseline` must point to 7 values, `weights` to 7 values or
/// be null, and `out` be writable.
#[no_mangle]
pub unsafe extern "C" fn scs_compute_reward(
    today: *const f64,
    baseline: *const f64,
    weights: *const f64,
    out: *mut f64,
) -> ScsStatus {
    guard(|| {
        non_null(out, "out")?;
        let t: [f64; N_DIMS] = slice(today, N_DIMS, "today")?.try_into().expect("length checked");
        let b: [f64; N_DIMS] = slice(baseline, N_DIMS, "baseline")?.try_into().expect("length checked");
        let cfg = if weights.is_null() {
            RewardConfig::default()
        } else {
            RewardConfig {
                weights: slice(weights, N_DIMS, "weights")?.try_into().expect("length checked"),
            }
        };
        *out = compute_reward(&StateFeatures(t), &Baseline(StateFeatures(b)), &cfg);
        Ok(())
    })
}

/// Two-sided permutation test on the difference of means. Exact when the
/// number of splits is small, seeded Monte Carlo otherwise.
///
/// # Safety
/// `a` and `b` must point to `na` and `nb` values and `p_value` be
/// writable.
#[no_mangle]
pub unsafe extern "C" fn scs_permutation_test(
    a: *const f64,
    na: usize,
    b: *const f64,
    nb: usize,
    n_resamples: usize,
    seed: u64,
    p_value: *mut f64,
) -> ScsStatus {
    guard(|| {
        non_null(p_value, "p_value")?;
        let a = slice(a, na, "a")?;
        let b = slice(b, nb, "b")?;
        match permutation_test(a, b, n_resamples, seed) {
            Ok(p) => {
                *p_value = p;
                Ok(())
            }
            Err(e) => fail(ScsStatus::InvalidArgument, e.to_string()),
        }
    })
}

unsafe fn profile(fractions: *const f64, name: &str) -> Result<DwellProfile, Failure> {
    let f: [f64; N_STATES] = slice(fractions, N_STATES, name)?.try_into().expect("length checked");
    if f.iter().any(|v| !(0.0..=1.0).contains(v)) || (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return fail(
            ScsStatus::InvalidArgument,
            format!("{name} must be 5 fractions in [0, 1] summing to 1"),
        );
    }
    Ok(DwellProfile {
        fractions: PerState::from_array(f),
        days_counted: 1,
    })
}

/// Triage subgroup from comparison-period dwell fractions (A..E).
///
/// # Safety
/// `fractions` must point to 5 values and `out` be writable.
#[no_mangle]
pub unsafe extern "C" fn scs_classify_subgroup(
    fractions: *const f64,
    monitoring_threshold: f64,
    follow_up_threshold: f64,
    out: *mut ScsSubgroup,
) -> ScsStatus {
    guard(|| {
        non_null(out, "out")?;
        let p = profile(fractions, "fractions")?;
        let t = SubgroupThresholds {
            monitoring: monitoring_threshold,
            follow_up: follow_up_threshold,
        };
        *out = match classify_subgroup(&p, &t).expect("profile is non-empty") {
            Subgroup::ActiveRecommendations => ScsSubgroup::ActiveRecommendations,
            Subgroup::ActiveMonitoring => ScsSubgroup::ActiveMonitoring,
            Subgroup::OpportunityForFollowUp => ScsSubgroup::OpportunityForFollowUp,
        };
        Ok(())
    })
}

/// Dwell change between two periods' fractions (A..E). `relative` nonzero
/// measures rises relative to the comparison fraction.
///
/// # Safety
/// `comparison` and `recommendation` must point to 5 values and `out` be
/// writable.
#[no_mangle]
pub unsafe extern "C" fn scs_classify_dwell_change(
    comparison: *const f64,
    recommendation: *const f64,
    threshold: f64,
    relative: i32,
    out: *mut ScsDwellChange,
) -> ScsStatus {
    guard(|| {
        non_null(out, "out")?;
        let c = profile(comparison, "comparison")?;
        let r = profile(recommendation, "recommendation")?;
        if !(threshold >= 0.0) {
            return fail(ScsStatus::InvalidArgument, "threshold must be non-negative");
        }
        let rule = DwellChangeRule {
            threshold,
            mode: if relative != 0 {
                ThresholdMode::Relative
            } else {
                ThresholdMode::Absolute
            },
        };
        *out = match classify_dwell_change(&c, &r, &rule).expect("profiles are non-empty") {
            DwellChange::Improved => ScsDwellChange::Improved,
            DwellChange::Worsened => ScsDwellChange::Worsened,
            DwellChange::Same => ScsDwellChange::Same,
        };
        Ok(())
    })
}

/// Nearest reference state for 7 normalized features.
///
/// # Safety
/// `features` must point to 7 values and `out` be writable.
#[no_mangle]
pub unsafe extern "C" fn scs_assign_state(features: *const f64, out: *mut ScsPatientState) -> ScsStatus {
    guard(|| {
        non_null(out, "out")?;
        let f: [f64; N_DIMS] = slice(features, N_DIMS, "features")?.try_into().expect("length checked");
        if f.iter().any(|v| !v.is_finite()) {
            return fail(ScsStatus::InvalidArgument, "features must be finite");
        }
        *out = match assign_state(&StateFeatures(f), &StateModel::reference()) {
            PatientState::A => ScsPatientState::A,
            PatientState::B => ScsPatientState::B,
            PatientState::C => ScsPatientState::C,
            PatientState::D => ScsPatientState::D,
            PatientState::E => ScsPatientState::E,
        };
        Ok(())
    })
}

/// Null-safe accessor so callers need not special-case empty errors.
#[doc(hidden)]
pub fn last_error_string() -> String {
    let p = scs_last_error();
    if p.is_null() {
        return String::new();
    }
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}
