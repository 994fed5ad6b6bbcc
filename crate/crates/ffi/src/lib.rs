//! C interface to `cellmil`.
//!
//! Every fallible function returns a [`CellmilStatus`]. On failure the
//! message is available from [`cellmil_last_error`] on the same thread until
//! the next call into the library. Cohorts are opaque handles released with
//! [`cellmil_cohort_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use cellmil::cohort::{load_cohort, save_cohort, Cohort};
use cellmil::stats::{
    concordance_index, cox_univariable, km_estimate, logrank, roc_auc, SurvivalRecord,
};
use cellmil::synthgen::{generate_cohort, SynthConfig};
use cellmil::trainer::{clinical_score, run_cv, write_run_dir, TrainConfig};
use cellmil::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CellmilStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidArgument = 2,
    Io = 3,
    /// Malformed or inconsistent cohort data.
    Format = 4,
    Config = 5,
    /// The statistic is not defined for the input (for example no events).
    Undefined = 6,
    Numerical = 7,
    /// A Rust panic was caught at the boundary.
    Panic = 8,
    Failed = 9,
}

/// A loaded or generated cohort.
pub struct CellmilCohort {
    inner: Cohort,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct CellmilCoxFit {
    pub beta: f64,
    pub se: f64,
    pub hazard_ratio: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub p_value: f64,
    pub iterations: u32,
    pub converged: bool,
}

/// Mean and sample standard deviation of per-fold test metrics. NaN marks a
/// metric that no fold could compute.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct CellmilTrainSummary {
    pub folds: u32,
    pub auc_mean: f64,
    pub auc_std: f64,
    pub accuracy_mean: f64,
    pub sensitivity_mean: f64,
    pub specificity_mean: f64,
}

struct Failure(CellmilStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Io { .. } => CellmilStatus::Io,
            Error::BadMagic { .. }
            | Error::Version { .. }
            | Error::Malformed { .. }
            | Error::SlideDimension { .. }
            | Error::CentroidOutOfBounds { .. }
            | Error::Manifest { .. }
            | Error::Validation(_) => CellmilStatus::Format,
            Error::Config(_) | Error::Unknown { .. } => CellmilStatus::Config,
            Error::Undefined(_) => CellmilStatus::Undefined,
            Error::Numerical(_) => CellmilStatus::Numerical,
            _ => CellmilStatus::Failed,
        };
        Failure(status, e.to_string())
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).expect("no interior nul");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> CellmilStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => CellmilStatus::Ok,
        Ok(Err(Failure(status, message))) => {
            set_error(message);
            status
        }
        Err(panic) => {
            let msg = panic
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            set_error(format!("internal error: {msg}"));
            CellmilStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(CellmilStatus::NullArgument, format!("{what} is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(CellmilStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn slice_arg<'a, T>(p: *const T, n: usize, what: &str) -> Result<&'a [T], Failure> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, n))
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn json_arg<T: serde::de::DeserializeOwned + Default>(p: *const c_char, what: &str) -> Result<T, Failure> {
    if p.is_null() {
        return Ok(T::default());
    }
    serde_json::from_str(str_arg(p, what)?)
        .map_err(|e| Failure(CellmilStatus::Config, format!("{what}: {e}")))
}

unsafe fn records(times: *const f64, events: *const u8, covariates: Option<*const f64>, n: usize) -> Result<Vec<SurvivalRecord>, Failure> {
    let t = slice_arg(times, n, "times")?;
    let e = slice_arg(events, n, "events")?;
    let c = match covariates {
        Some(p) => slice_arg(p, n, "covariates")?,
        None => &[],
    };
    Ok((0..n)
        .map(|i| SurvivalRecord::new(t[i], e[i] != 0, c.get(i).copied().unwrap_or(0.0)))
        .collect())
}

/// Library version, a static nul-terminated string.
#[no_mangle]
pub extern "C" fn cellmil_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failure on this thread, or null. Valid until the next
/// call into the library from this thread.
#[no_mangle]
pub extern "C" fn cellmil_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Loads a cohort from its manifest path.
///
/// # Safety
/// `manifest_path` must be a nul-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cellmil_cohort_load(manifest_path: *const c_char, out: *mut *mut CellmilCohort) -> CellmilStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let path = PathBuf::from(str_arg(manifest_path, "manifest_path")?);
        let inner = load_cohort(&path)?;
        *out = Box::into_raw(Box::new(CellmilCohort { inner }));
        Ok(())
    })
}

/// Generates a synthetic cohort. `config_json` is a synthesis configuration
/// object; null uses the defaults.
///
/// # Safety
/// `config_json` must be null or nul-terminated and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cellmil_cohort_synthesize(config_json: *const c_char, out: *mut *mut CellmilCohort) -> CellmilStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let config: SynthConfig = json_arg(config_json, "config_json")?;
        let inner = generate_cohort(&config)?;
        *out = Box::into_raw(Box::new(CellmilCohort { inner }));
        Ok(())
    })
}

/// Writes the cohort's slide files and manifest under `dir`.
///
/// # Safety
/// `cohort` must come from this library; `dir` must be nul-terminated.
#[no_mangle]
pub unsafe extern "C" fn cellmil_cohort_save(cohort: *const CellmilCohort, dir: *const c_char) -> CellmilStatus {
    guard(|| {
        let cohort = cohort.as_ref().ok_or_else(|| null("cohort"))?;
        save_cohort(&cohort.inner, &PathBuf::from(str_arg(dir, "dir")?))?;
        Ok(())
    })
}

/// # Safety
/// `cohort` must be null or come from this library, and not be used again.
#[no_mangle]
pub unsafe extern "C" fn cellmil_cohort_free(cohort: *mut CellmilCohort) {
    if !cohort.is_null() {
        drop(Box::from_raw(cohort));
    }
}

/// Number of patients; 0 for a null handle.
///
/// # Safety
/// `cohort` must be null or come from this library.
#[no_mangle]
pub unsafe extern "C" fn cellmil_cohort_patient_count(cohort: *const CellmilCohort) -> usize {
    cohort.as_ref().map_or(0, |c| c.inner.patients.len())
}

/// Number of slides; 0 for a null handle.
///
/// # Safety
/// `cohort` must be null or come from this library.
#[no_mangle]
pub unsafe extern "C" fn cellmil_cohort_slide_count(cohort: *const CellmilCohort) -> usize {
    cohort.as_ref().map_or(0, |c| c.inner.slide_count())
}

/// Cross-validates one model on the cohort. `config_json` is a training
/// configuration object (null for defaults). When `out_dir` is not null the
/// run directory is written there.
///
/// # Safety
/// Pointers must be valid; strings nul-terminated.
#[no_mangle]
pub unsafe extern "C" fn cellmil_train(
    cohort: *const CellmilCohort,
    config_json: *const c_char,
    workers: usize,
    out_dir: *const c_char,
    summary: *mut CellmilTrainSummary,
) -> CellmilStatus {
    guard(|| {
        let cohort = cohort.as_ref().ok_or_else(|| null("cohort"))?;
        let summary = out_arg(summary, "summary")?;
        let config: TrainConfig = json_arg(config_json, "config_json")?;
        let run = run_cv(&cohort.inner, &config, workers.max(1))?;
        if !out_dir.is_null() {
            write_run_dir(&PathBuf::from(str_arg(out_dir, "out_dir")?), &run)?;
        }
        let s = run.test_summary();
        let nan = |v: Option<f64>| v.unwrap_or(f64::NAN);
        *summary = CellmilTrainSummary {
            folds: run.results.len() as u32,
            auc_mean: nan(s.auc.mean),
            auc_std: nan(s.auc.std),
            accuracy_mean: nan(s.accuracy.mean),
            sensitivity_mean: nan(s.sensitivity.mean),
            specificity_mean: nan(s.specificity.mean),
        };
        Ok(())
    })
}

/// `2·min(sensitivity, specificity)`.
#[no_mangle]
pub extern "C" fn cellmil_clinical_score(sensitivity: f64, specificity: f64) -> f64 {
    clinical_score(sensitivity, specificity)
}

/// Area under the ROC curve; `labels` are 0 or non-zero.
///
/// # Safety
/// Arrays must hold `n` elements; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn cellmil_roc_auc(scores: *const f64, labels: *const u8, n: usize, out: *mut f64) -> CellmilStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let s = slice_arg(scores, n, "scores")?;
        let l: Vec<bool> = slice_arg(labels, n, "labels")?.iter().map(|&v| v != 0).collect();
        *out = roc_auc(s, &l)?;
        Ok(())
    })
}

/// Harrell's C of risk scores against follow-up times and event flags.
///
/// # Safety
/// Arrays must hold `n` elements; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn cellmil_concordance_index(
    scores: *const f64,
    times: *const f64,
    events: *const u8,
    n: usize,
    out: *mut f64,
) -> CellmilStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let s = slice_arg(scores, n, "scores")?;
        *out = concordance_index(s, &records(times, events, None, n)?)?.c_index;
        Ok(())
    })
}

/// Kaplan-Meier survival probability at time `t`.
///
/// # Safety
/// Arrays must hold `n` elements; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn cellmil_km_survival_at(
    times: *const f64,
    events: *const u8,
    n: usize,
    t: f64,
    out: *mut f64,
) -> CellmilStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = km_estimate(&records(times, events, None, n)?)?.survival_at(t);
        Ok(())
    })
}

/// Log-rank test between records with `groups[i] != 0` and the rest.
///
/// # Safety
/// Arrays must hold `n` elements; outputs must be valid.
#[no_mangle]
pub unsafe extern "C" fn cellmil_logrank(
    times: *const f64,
    events: *const u8,
    groups: *const u8,
    n: usize,
    statistic: *mut f64,
    p_value: *mut f64,
) -> CellmilStatus {
    guard(|| {
        let statistic = out_arg(statistic, "statistic")?;
        let p_value = out_arg(p_value, "p_value")?;
        let g = slice_arg(groups, n, "groups")?;
        let recs = records(times, events, None, n)?;
        let (a, b): (Vec<_>, Vec<_>) = recs.iter().zip(g).partition(|(_, &g)| g != 0);
        let a: Vec<SurvivalRecord> = a.into_iter().map(|(r, _)| *r).collect();
        let b: Vec<SurvivalRecord> = b.into_iter().map(|(r, _)| *r).collect();
        let r = logrank(&a, &b)?;
        *statistic = r.statistic;
        *p_value = r.p_value;
        Ok(())
    })
}

/// Univariable Cox model with Efron ties.
///
/// # Safety
/// Arrays must hold `n` elements; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn cellmil_cox_univariable(
    times: *const f64,
    events: *const u8,
    covariates: *const f64,
    n: usize,
    out: *mut CellmilCoxFit,
) -> CellmilStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        if n > 0 && covariates.is_null() {
            return Err(null("covariates"));
        }
        let fit = cox_univariable(&records(times, events, Some(covariates), n)?)?;
        *out = CellmilCoxFit {
            beta: fit.beta,
            se: fit.se,
            hazard_ratio: fit.hazard_ratio,
            ci_low: fit.ci_low,
            ci_high: fit.ci_high,
            p_value: fit.p_value,
            iterations: fit.iterations as u32,
            converged: fit.converged,
        };
        Ok(())
    })
}
