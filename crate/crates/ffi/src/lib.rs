//! C ABI for lbmcts. Objects cross the boundary as opaque handles; every
//! fallible call returns an [`LbmctsStatus`] and leaves a message for
//! [`lbmcts_last_error_message`]. Strings returned by the library must be
//! released with [`lbmcts_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, c_int, c_void, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use lbmcts::engine::{self, EngineError, ProposerMode, RunConfig, RunOutcome};
use lbmcts::llm_client::MockChatClient;
use lbmcts::objective::{synth3_space, EvalError, FnEvaluator};
use lbmcts::proposer_llm::TaskContext;
use lbmcts::space::{parse_space, Configuration, SearchSpace};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LbmctsStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Parse = 3,
    Invariant = 4,
    Evaluation = 5,
    Llm = 6,
    Internal = 7,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LbmctsMode {
    Hybrid = 0,
    BoOnly = 1,
    LlmOnly = 2,
    Fixed = 3,
}

/// Run settings. LLM proposals come from the built-in seeded mock.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct LbmctsOptions {
    pub budget: u64,
    pub seed: u64,
    pub epsilon: f64,
    pub mode: LbmctsMode,
    /// BO probability for `LBMCTS_MODE_FIXED`.
    pub fixed_p_bo: f64,
}

/// Objective callback. Receives `{"algorithm": ..., "params": {...}}` and
/// writes the score (larger is better) to `out_y`. A nonzero return marks
/// the evaluation as failed; the run skips it and continues.
pub type LbmctsObjective =
    Option<unsafe extern "C" fn(user: *mut c_void, config_json: *const c_char, out_y: *mut f64) -> c_int>;

pub struct LbmctsSpace {
    inner: SearchSpace,
}

pub struct LbmctsResult {
    inner: RunOutcome,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).expect("nul bytes removed"));
}

fn guard(f: impl FnOnce() -> Result<(), (LbmctsStatus, String)>) -> LbmctsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            LbmctsStatus::Ok
        }
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            LbmctsStatus::Internal
        }
    }
}

unsafe fn read_str<'a>(p: *const c_char) -> Result<&'a str, (LbmctsStatus, String)> {
    if p.is_null() {
        return Err((LbmctsStatus::NullPointer, "null string".into()));
    }
    CStr::from_ptr(p).to_str().map_err(|e| (LbmctsStatus::InvalidUtf8, e.to_string()))
}

fn to_c_string(s: String) -> *mut c_char {
    CString::new(s.replace('\0', " ")).expect("nul bytes removed").into_raw()
}

/// Message of the last failed call on this thread; empty after a success.
/// Valid until the next library call on the same thread.
#[no_mangle]
pub extern "C" fn lbmcts_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

#[no_mangle]
pub unsafe extern "C" fn lbmcts_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Budget 300, seed 0, ε 0.05, hybrid mode.
#[no_mangle]
pub unsafe extern "C" fn lbmcts_options_default(out: *mut LbmctsOptions) -> LbmctsStatus {
    guard(|| {
        if out.is_null() {
            return Err((LbmctsStatus::NullPointer, "out is null".into()));
        }
        let d = RunConfig::default();
        *out = LbmctsOptions {
            budget: d.budget as u64,
            seed: d.seed,
            epsilon: d.epsilon,
            mode: LbmctsMode::Hybrid,
            fixed_p_bo: 0.5,
        };
        Ok(())
    })
}

/// Parses a search-space JSON document.
#[no_mangle]
pub unsafe extern "C" fn lbmcts_space_from_json(json: *const c_char, out: *mut *mut LbmctsSpace) -> LbmctsStatus {
    guard(|| {
        if out.is_null() {
            return Err((LbmctsStatus::NullPointer, "out is null".into()));
        }
        let text = read_str(json)?;
        let inner = parse_space(text).map_err(|e| {
            let status = match e {
                lbmcts::space::SpaceError::Schema(_) => LbmctsStatus::Parse,
                _ => LbmctsStatus::Invariant,
            };
            (status, e.to_string())
        })?;
        *out = Box::into_raw(Box::new(LbmctsSpace { inner }));
        Ok(())
    })
}

/// The built-in three-algorithm synthetic space.
#[no_mangle]
pub unsafe extern "C" fn lbmcts_space_synth3(out: *mut *mut LbmctsSpace) -> LbmctsStatus {
    guard(|| {
        if out.is_null() {
            return Err((LbmctsStatus::NullPointer, "out is null".into()));
        }
        *out = Box::into_raw(Box::new(LbmctsSpace { inner: synth3_space() }));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn lbmcts_space_free(space: *mut LbmctsSpace) {
    if !space.is_null() {
        drop(Box::from_raw(space));
    }
}

/// Number of algorithms, or 0 for a null handle.
#[no_mangle]
pub unsafe extern "C" fn lbmcts_space_algorithm_count(space: *const LbmctsSpace) -> usize {
    space.as_ref().map_or(0, |s| s.inner.len())
}

/// Total hyperparameter count over all algorithms, or 0 for a null handle.
#[no_mangle]
pub unsafe extern "C" fn lbmcts_space_param_count(space: *const LbmctsSpace) -> usize {
    space.as_ref().map_or(0, |s| s.inner.total_params())
}

fn config_payload(c: &Configuration) -> String {
    serde_json::json!({"algorithm": c.algorithm, "params": c.values}).to_string()
}

/// Runs the optimizer, calling `objective` once per iteration.
#[no_mangle]
pub unsafe extern "C" fn lbmcts_run(
    space: *const LbmctsSpace,
    objective: LbmctsObjective,
    user: *mut c_void,
    options: *const LbmctsOptions,
    out: *mut *mut LbmctsResult,
) -> LbmctsStatus {
    guard(|| {
        let (Some(space), Some(cb), Some(opts)) = (space.as_ref(), objective, options.as_ref()) else {
            return Err((LbmctsStatus::NullPointer, "space, objective and options are required".into()));
        };
        if out.is_null() {
            return Err((LbmctsStatus::NullPointer, "out is null".into()));
        }
        let mode = match opts.mode {
            LbmctsMode::Hybrid => ProposerMode::Hybrid,
            LbmctsMode::BoOnly => ProposerMode::BoOnly,
            LbmctsMode::LlmOnly => ProposerMode::LlmOnly,
            LbmctsMode::Fixed if (0.0..=1.0).contains(&opts.fixed_p_bo) => ProposerMode::Fixed(opts.fixed_p_bo),
            LbmctsMode::Fixed => {
                return Err((LbmctsStatus::Invariant, "fixed_p_bo must lie in [0, 1]".into()))
            }
        };
        let cfg = RunConfig {
            budget: usize::try_from(opts.budget).unwrap_or(usize::MAX),
            seed: opts.seed,
            epsilon: opts.epsilon,
            mode,
            ..RunConfig::default()
        };
        let mut evaluator = FnEvaluator(|c: &Configuration| {
            let payload = CString::new(config_payload(c)).expect("JSON has no nul bytes");
            let mut y = f64::NAN;
            let rc = cb(user, payload.as_ptr(), &mut y);
            if rc == 0 {
                Ok(y)
            } else {
                Err(EvalError::Failed(format!("objective returned {rc}")))
            }
        });
        let llm = MockChatClient::new(opts.seed);
        let ctx = TaskContext::for_space(&space.inner, "");
        let outcome = engine::run(&space.inner, &mut evaluator, Some(&llm), &ctx, &cfg, &mut |_| Ok(()))
            .map_err(|e| {
                let status = match e {
                    EngineError::Config(_) => LbmctsStatus::Invariant,
                    EngineError::Evaluator(_) => LbmctsStatus::Evaluation,
                    EngineError::Llm(_) => LbmctsStatus::Llm,
                    _ => LbmctsStatus::Internal,
                };
                (status, e.to_string())
            })?;
        *out = Box::into_raw(Box::new(LbmctsResult { inner: outcome }));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn lbmcts_result_free(result: *mut LbmctsResult) {
    if !result.is_null() {
        drop(Box::from_raw(result));
    }
}

/// Best score, or NaN when nothing was evaluated successfully or the handle
/// is null.
#[no_mangle]
pub unsafe extern "C" fn lbmcts_result_best_y(result: *const LbmctsResult) -> f64 {
    result.as_ref().and_then(|r| r.inner.summary.best.as_ref()).map_or(f64::NAN, |b| b.y)
}

#[no_mangle]
pub unsafe extern "C" fn lbmcts_result_evaluations(result: *const LbmctsResult) -> usize {
    result.as_ref().map_or(0, |r| r.inner.summary.evaluations)
}

/// `{"algorithm": ..., "params": {...}}` of the incumbent, or null.
#[no_mangle]
pub unsafe extern "C" fn lbmcts_result_best_config_json(result: *const LbmctsResult) -> *mut c_char {
    match result.as_ref().and_then(|r| r.inner.summary.best.as_ref()) {
        Some(b) => to_c_string(serde_json::json!({"algorithm": b.algorithm, "params": b.config}).to_string()),
        None => ptr::null_mut(),
    }
}

/// One JSON trial record per line, or null for a null handle.
#[no_mangle]
pub unsafe extern "C" fn lbmcts_result_history_jsonl(result: *const LbmctsResult) -> *mut c_char {
    let Some(r) = result.as_ref() else { return ptr::null_mut() };
    let mut out = String::new();
    for rec in &r.inner.history {
        out.push_str(&serde_json::to_string(rec).expect("record serializes"));
        out.push('\n');
    }
    to_c_string(out)
}

#[no_mangle]
pub unsafe extern "C" fn lbmcts_result_summary_json(result: *const LbmctsResult) -> *mut c_char {
    match result.as_ref() {
        Some(r) => to_c_string(serde_json::to_string(&r.inner.summary).expect("summary serializes")),
        None => ptr::null_mut(),
    }
}

/// Kendall τ-a of two length-`n` arrays.
#[no_mangle]
pub unsafe extern "C" fn lbmcts_kendall_tau(a: *const f64, b: *const f64, n: usize, out: *mut f64) -> LbmctsStatus {
    guard(|| {
        if a.is_null() || b.is_null() || out.is_null() {
            return Err((LbmctsStatus::NullPointer, "null argument".into()));
        }
        let (a, b) = (std::slice::from_raw_parts(a, n), std::slice::from_raw_parts(b, n));
        *out = lbmcts::metrics::kendall_tau(a, b).map_err(|e| (LbmctsStatus::Invariant, e.to_string()))?;
        Ok(())
    })
}

/// Expected improvement of a Gaussian prediction over `best`.
#[no_mangle]
pub unsafe extern "C" fn lbmcts_expected_improvement(
    mean: f64,
    variance: f64,
    best: f64,
    out: *mut f64,
) -> LbmctsStatus {
    guard(|| {
        if out.is_null() {
            return Err((LbmctsStatus::NullPointer, "out is null".into()));
        }
        if !(mean.is_finite() && variance.is_finite() && variance >= 0.0) {
            return Err((LbmctsStatus::Invariant, "mean and variance must be finite, variance ≥ 0".into()));
        }
        *out = lbmcts::surrogate::expected_improvement(mean, variance, best);
        Ok(())
    })
}
