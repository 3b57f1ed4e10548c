//! C ABI over the fedlgt core.
//!
//! Every fallible function returns a [`FlgtStatus`]. On failure the
//! thread's last-error message is set and can be read with
//! [`flgt_last_error_message`]. Models are opaque handles created by
//! [`flgt_model_load`] and released with [`flgt_model_free`].
//!
//! Label-state tokens follow the core encoding: unknown = -1,
//! positive = 1, negative = 0.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::slice;

use fedlgt::camle::{
    calibrate_states, CalibrationConfig, CamleError, LabelState, LabelStateVector,
};
use fedlgt::metrics::{evaluate, MetricsError};
use fedlgt::model::{read_checkpoint, CheckpointError, LabelGuidedTransformer, ModelError};
use fedlgt::ParameterSet;
use thiserror::Error;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlgtStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Compute = 5,
    Panic = 6,
}

#[derive(Debug, Error)]
enum FfiError {
    #[error("{0} is null")]
    Null(&'static str),
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Camle(#[from] CamleError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

impl FfiError {
    fn status(&self) -> FlgtStatus {
        match self {
            FfiError::Null(_) => FlgtStatus::NullPointer,
            FfiError::Invalid(_) | FfiError::Camle(_) | FfiError::Metrics(_) => {
                FlgtStatus::InvalidArgument
            }
            FfiError::Checkpoint(CheckpointError::Io(_)) => FlgtStatus::Io,
            FfiError::Checkpoint(_) => FlgtStatus::Format,
            FfiError::Model(_) => FlgtStatus::Compute,
        }
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

/// Runs `f`, recording any error or panic as this thread's last error.
fn guard(f: impl FnOnce() -> Result<(), FfiError>) -> FlgtStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            FlgtStatus::Ok
        }
        Ok(Err(e)) => {
            set_error(e.to_string());
            e.status()
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            FlgtStatus::Panic
        }
    }
}

unsafe fn input<'a, T>(ptr: *const T, len: usize, what: &'static str) -> Result<&'a [T], FfiError> {
    if len == 0 {
        return Ok(&[]);
    }
    if ptr.is_null() {
        return Err(FfiError::Null(what));
    }
    Ok(slice::from_raw_parts(ptr, len))
}

unsafe fn output<'a, T>(
    ptr: *mut T,
    len: usize,
    what: &'static str,
) -> Result<&'a mut [T], FfiError> {
    if len == 0 {
        return Ok(&mut []);
    }
    if ptr.is_null() {
        return Err(FfiError::Null(what));
    }
    Ok(slice::from_raw_parts_mut(ptr, len))
}

/// Message of the last failed call on this thread, or NULL after a
/// successful call. Valid until the next fedlgt call on the same thread.
#[no_mangle]
pub extern "C" fn flgt_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn flgt_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// A trained model: architecture, parameters and frozen label inputs.
pub struct FlgtModel {
    model: LabelGuidedTransformer,
    params: ParameterSet,
}

/// Loads a checkpoint written by `fedlgt train`. On success `*out` owns a
/// new handle; on failure it is set to NULL.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn flgt_model_load(
    path: *const c_char,
    out: *mut *mut FlgtModel,
) -> FlgtStatus {
    guard(|| {
        if out.is_null() {
            return Err(FfiError::Null("out"));
        }
        *out = std::ptr::null_mut();
        if path.is_null() {
            return Err(FfiError::Null("path"));
        }
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| FfiError::Invalid("path is not valid UTF-8".into()))?;
        let ckpt = read_checkpoint(Path::new(path))?;
        let model = LabelGuidedTransformer::new(ckpt.config, ckpt.guide)?;
        *out = Box::into_raw(Box::new(FlgtModel {
            model,
            params: ckpt.params,
        }));
        Ok(())
    })
}

/// Releases a handle from [`flgt_model_load`]. NULL is ignored.
///
/// # Safety
/// `model` must come from `flgt_model_load` and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn flgt_model_free(model: *mut FlgtModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of classes C, or 0 for a NULL handle.
///
/// # Safety
/// `model` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn flgt_model_num_classes(model: *const FlgtModel) -> usize {
    model.as_ref().map_or(0, |m| m.model.config.num_classes)
}

/// Input feature width, or 0 for a NULL handle.
///
/// # Safety
/// `model` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn flgt_model_feature_dim(model: *const FlgtModel) -> usize {
    model.as_ref().map_or(0, |m| m.model.config.feature_dim)
}

/// Class probabilities for one sample, all label states unknown.
/// `features_len` must equal the feature width and `out_len` the class count.
///
/// # Safety
/// Pointers must be valid for the given lengths.
#[no_mangle]
pub unsafe extern "C" fn flgt_model_predict(
    model: *const FlgtModel,
    features: *const f64,
    features_len: usize,
    out_probs: *mut f64,
    out_len: usize,
) -> FlgtStatus {
    guard(|| {
        let m = model.as_ref().ok_or(FfiError::Null("model"))?;
        let cfg = &m.model.config;
        if features_len != cfg.feature_dim || out_len != cfg.num_classes {
            return Err(FfiError::Invalid(format!(
                "model takes {} features and returns {} classes, got {features_len} and {out_len}",
                cfg.feature_dim, cfg.num_classes
            )));
        }
        let x = input(features, features_len, "features")?;
        let out = output(out_probs, out_len, "out_probs")?;
        out.copy_from_slice(&m.model.predict(&m.params, x)?);
        Ok(())
    })
}

/// Client-aware calibration of label-state tokens: classes with
/// `tau - epsilon <= p <= tau + epsilon` become unknown (-1), the rest keep
/// their base token. `out_tokens` may alias `base_tokens`.
///
/// # Safety
/// Pointers must be valid for `len` elements.
#[no_mangle]
pub unsafe extern "C" fn flgt_calibrate(
    probs: *const f64,
    base_tokens: *const i8,
    len: usize,
    tau: f64,
    epsilon: f64,
    out_tokens: *mut i8,
) -> FlgtStatus {
    guard(|| {
        let cfg = CalibrationConfig { tau, epsilon };
        cfg.validate()?;
        let p = input(probs, len, "probs")?;
        let base = input(base_tokens, len, "base_tokens")?
            .iter()
            .map(|&t| {
                LabelState::from_token(t)
                    .ok_or_else(|| FfiError::Invalid(format!("bad state token {t}")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let states = calibrate_states(p, &LabelStateVector::new(base), &cfg)?;
        let out = output(out_tokens, len, "out_tokens")?;
        out.copy_from_slice(&states.tokens());
        Ok(())
    })
}

/// The eight evaluation metrics for `n x c` row-major probabilities and
/// 0/1 targets, written to `out` in the order C-AP, C-P, C-R, C-F1, O-AP,
/// O-P, O-R, O-F1 (each in [0, 1]).
///
/// # Safety
/// `probs` and `targets` must hold `n * c` values and `out` 8.
#[no_mangle]
pub unsafe extern "C" fn flgt_metrics(
    probs: *const f64,
    targets: *const f64,
    n: usize,
    c: usize,
    out: *mut f64,
) -> FlgtStatus {
    guard(|| {
        if n == 0 || c == 0 {
            return Err(FfiError::Invalid(
                "need at least one sample and one class".into(),
            ));
        }
        let len = n
            .checked_mul(c)
            .ok_or_else(|| FfiError::Invalid("n * c overflows".into()))?;
        let rows = |v: &[f64]| v.chunks(c).map(<[f64]>::to_vec).collect::<Vec<_>>();
        let p = rows(input(probs, len, "probs")?);
        let y = rows(input(targets, len, "targets")?);
        let report = evaluate(&p, &y)?;
        output(out, 8, "out")?.copy_from_slice(&report.values());
        Ok(())
    })
}
