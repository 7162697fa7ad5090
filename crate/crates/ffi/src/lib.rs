//! C ABI over `tracer-core`.
//!
//! Every function returns a [`TracerStatus`]; on failure the message is
//! available from [`tracer_last_error`] on the same thread. Models are opaque
//! handles created by [`tracer_model_load`] or [`tracer_model_from_json`] and
//! released with [`tracer_model_free`].

use std::cell::RefCell;
use std::ffi::{CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use libc::{c_char, size_t};
use tracer_core::metrics::{self, VariableSummary};
use tracer_core::predictor::{outcome_features, predict_tracer, predict_transition_prob};
use tracer_core::{ModelArtifact, TracerError};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TracerStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Dimension = 3,
    Schema = 4,
    Io = 5,
    Numeric = 6,
    Panic = 7,
}

/// A loaded model artifact.
pub struct TracerModel {
    artifact: ModelArtifact,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(err: &TracerError) -> TracerStatus {
    match err {
        TracerError::Dimension(_) => TracerStatus::Dimension,
        TracerError::Schema(_) | TracerError::Json(_) | TracerError::Csv(_) => TracerStatus::Schema,
        TracerError::Io { .. } => TracerStatus::Io,
        TracerError::InvalidArgument(_) | TracerError::SingleClass(_) => TracerStatus::InvalidArgument,
        _ => TracerStatus::Numeric,
    }
}

struct Fail(TracerStatus, String);

impl From<TracerError> for Fail {
    fn from(e: TracerError) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> TracerStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => TracerStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            TracerStatus::Panic
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(TracerStatus::NullPointer, format!("{what} is null"))
}

unsafe fn slice<'a, T>(p: *const T, n: usize, what: &str) -> Result<&'a [T], Fail> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, n))
}

unsafe fn out_ref<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn model_ref<'a>(m: *const TracerModel) -> Result<&'a TracerModel, Fail> {
    m.as_ref().ok_or_else(|| null("model"))
}

unsafe fn c_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(TracerStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

/// Message of the last failed call on this thread, or NULL. The pointer is
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn tracer_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn tracer_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a model artifact from a JSON file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tracer_model_load(path: *const c_char, out: *mut *mut TracerModel) -> TracerStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        *out = ptr::null_mut();
        let path = c_str(path, "path")?;
        let artifact = ModelArtifact::load(path)?;
        *out = Box::into_raw(Box::new(TracerModel { artifact }));
        Ok(())
    })
}

/// Parses a model artifact from a JSON string.
///
/// # Safety
/// `json` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tracer_model_from_json(json: *const c_char, out: *mut *mut TracerModel) -> TracerStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        *out = ptr::null_mut();
        let artifact = ModelArtifact::from_json(c_str(json, "json")?)?;
        *out = Box::into_raw(Box::new(TracerModel { artifact }));
        Ok(())
    })
}

/// Releases a model. NULL is ignored.
///
/// # Safety
/// `model` must come from a load function and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn tracer_model_free(model: *mut TracerModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of `W` and `A` columns the model expects.
///
/// # Safety
/// `model` must be a live handle; the out pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn tracer_model_dims(
    model: *const TracerModel,
    dim_w: *mut size_t,
    dim_a: *mut size_t,
) -> TracerStatus {
    guard(|| {
        let m = model_ref(model)?;
        *out_ref(dim_w, "dim_w")? = m.artifact.params.dim_w();
        *out_ref(dim_a, "dim_a")? = m.artifact.params.dim_a();
        Ok(())
    })
}

/// First time point at which the model allows a transition.
///
/// # Safety
/// `model` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tracer_model_transition_time(model: *const TracerModel, out: *mut i64) -> TracerStatus {
    guard(|| {
        *out_ref(out, "out")? = model_ref(model)?.artifact.params.transition_time;
        Ok(())
    })
}

/// Risk predictions for `n` records. `w` is `n x dim_w` and `a` is
/// `n x dim_a`, both row-major, in the column order of the artifact.
/// `transition` may be NULL; otherwise it receives the transition
/// probability of each record.
///
/// # Safety
/// Arrays must hold the stated number of elements; `out` must hold `n`.
#[no_mangle]
pub unsafe extern "C" fn tracer_model_predict(
    model: *const TracerModel,
    w: *const f64,
    a: *const f64,
    time: *const i64,
    n: size_t,
    out: *mut f64,
    transition: *mut f64,
) -> TracerStatus {
    guard(|| {
        let params = &model_ref(model)?.artifact.params;
        let (dw, da) = (params.dim_w(), params.dim_a());
        let w = slice(w, n * dw, "w")?;
        let a = slice(a, n * da, "a")?;
        let time = slice(time, n, "time")?;
        if n > 0 && out.is_null() {
            return Err(null("out"));
        }
        for i in 0..n {
            let (wi, ai) = (&w[i * dw..(i + 1) * dw], &a[i * da..(i + 1) * da]);
            let x = outcome_features(ai, wi);
            *out.add(i) = predict_tracer(&x, wi, ai, time[i], params)?;
            if !transition.is_null() {
                *transition.add(i) = predict_transition_prob(wi, ai, time[i], params)?;
            }
        }
        Ok(())
    })
}

type MetricFn = fn(&[f64], &[f64]) -> tracer_core::Result<f64>;

unsafe fn metric(f: MetricFn, preds: *const f64, labels: *const f64, n: size_t, out: *mut f64) -> TracerStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        *out = f(slice(preds, n, "preds")?, slice(labels, n, "labels")?)?;
        Ok(())
    })
}

/// Area under the ROC curve of `scores` against 0/1 `labels`.
///
/// # Safety
/// Both arrays must hold `n` elements; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tracer_auc(scores: *const f64, labels: *const f64, n: size_t, out: *mut f64) -> TracerStatus {
    metric(metrics::auc, scores, labels, n, out)
}

/// Brier score of probabilities against 0/1 labels.
///
/// # Safety
/// Both arrays must hold `n` elements; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tracer_brier(preds: *const f64, labels: *const f64, n: size_t, out: *mut f64) -> TracerStatus {
    metric(metrics::brier, preds, labels, n, out)
}

/// Mean squared error.
///
/// # Safety
/// Both arrays must hold `n` elements; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tracer_mse(preds: *const f64, targets: *const f64, n: size_t, out: *mut f64) -> TracerStatus {
    metric(metrics::mse, preds, targets, n, out)
}

/// `1 - SSE / SST`.
///
/// # Safety
/// Both arrays must hold `n` elements; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tracer_r2(preds: *const f64, targets: *const f64, n: size_t, out: *mut f64) -> TracerStatus {
    metric(metrics::r2, preds, targets, n, out)
}

/// Standardized mean difference of two continuous summaries.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tracer_smd_continuous(
    mean_a: f64,
    sd_a: f64,
    n_a: size_t,
    mean_b: f64,
    sd_b: f64,
    n_b: size_t,
    out: *mut f64,
) -> TracerStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        let a = VariableSummary::continuous(mean_a, sd_a, n_a)?;
        let b = VariableSummary::continuous(mean_b, sd_b, n_b)?;
        *out = metrics::smd(&a, &b)?;
        Ok(())
    })
}

/// Standardized mean difference of two proportions.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tracer_smd_binary(p_a: f64, n_a: size_t, p_b: f64, n_b: size_t, out: *mut f64) -> TracerStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        let a = VariableSummary::binary(p_a, n_a)?;
        let b = VariableSummary::binary(p_b, n_b)?;
        *out = metrics::smd(&a, &b)?;
        Ok(())
    })
}
