//! C ABI over the core crate: load a checkpoint, score tracks files.
//!
//! Conventions:
//! - Every fallible function returns a [`SpellStatus`]; `SPELL_STATUS_OK`
//!   is zero. On any other status, `spell_last_error_message()` returns a
//!   human-readable description. The message is thread-local and stays
//!   valid until the next library call on the same thread.
//! - Strings are NUL-terminated UTF-8. Paths that are not valid UTF-8 are
//!   rejected rather than reinterpreted.
//! - A [`SpellDetector`] is immutable once loaded; sharing one across
//!   threads for concurrent inference is safe. Destroy it exactly once
//!   with `spell_detector_free`.
//! - Panics never unwind across the boundary; they surface as
//!   `SPELL_STATUS_PANIC`.

use spell_core::eval::predict;
use spell_core::io::checkpoint::load_checkpoint;
use spell_core::io::dataset::build_dataset;
use spell_core::io::features::FeatureStore;
use spell_core::io::predictions::write_predictions;
use spell_core::io::tracks::read_tracks;
use spell_core::model::SpellParams;
use spell_core::SpellError;
use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

/// Result of a library call. Zero means success; anything else is an
/// error whose detail is available from `spell_last_error_message`.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SpellStatus {
    Ok = 0,
    /// A required pointer argument was NULL.
    NullArgument = 1,
    /// A string argument was not valid UTF-8.
    InvalidUtf8 = 2,
    /// The operating system refused a file operation.
    IoError = 3,
    /// A file existed but its contents were malformed.
    ParseError = 4,
    /// Inputs were structurally valid but inconsistent (shape mismatches,
    /// missing feature rows, bad labels, invalid hyperparameters).
    InvalidInput = 5,
    /// A computation produced NaN or infinity.
    NumericError = 6,
    /// An internal invariant failed; the library caught a panic.
    Panic = 7,
}

/// A loaded model plus its configuration. Opaque to C callers.
pub struct SpellDetector {
    params: SpellParams<f32>,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_last_error(msg: impl Into<String>) {
    let clean = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(clean).expect("NULs stripped"));
}

fn clear_last_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::default());
}

fn status_for(e: &SpellError) -> SpellStatus {
    match e {
        SpellError::Io(_) => SpellStatus::IoError,
        SpellError::Parse { .. } => SpellStatus::ParseError,
        SpellError::NonFiniteGrad { .. } | SpellError::NonFiniteLoss { .. } => {
            SpellStatus::NumericError
        }
        _ => SpellStatus::InvalidInput,
    }
}

fn fail(e: &SpellError) -> SpellStatus {
    set_last_error(e.to_string());
    status_for(e)
}

/// Runs a body with panic containment; the body reports its own errors.
fn guarded(body: impl FnOnce() -> SpellStatus) -> SpellStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(status) => status,
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".to_string());
            set_last_error(format!("internal panic: {msg}"));
            SpellStatus::Panic
        }
    }
}

/// # Safety
/// `ptr` must be NULL or a NUL-terminated string.
unsafe fn path_arg(ptr: *const c_char, what: &str) -> Result<PathBuf, SpellStatus> {
    if ptr.is_null() {
        set_last_error(format!("{what} is NULL"));
        return Err(SpellStatus::NullArgument);
    }
    match CStr::from_ptr(ptr).to_str() {
        Ok(s) => Ok(PathBuf::from(s)),
        Err(_) => {
            set_last_error(format!("{what} is not valid UTF-8"));
            Err(SpellStatus::InvalidUtf8)
        }
    }
}

/// Library version as a static NUL-terminated string. Never NULL.
#[no_mangle]
pub extern "C" fn spell_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Description of the most recent failure on the calling thread, or an
/// empty string if the last call succeeded. The pointer is invalidated by
/// the next library call on this thread.
#[no_mangle]
pub extern "C" fn spell_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Loads a checkpoint from `ckpt_path` and writes a detector handle to
/// `out`. On failure `*out` is left untouched.
///
/// # Safety
/// `ckpt_path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn spell_detector_load(
    ckpt_path: *const c_char,
    out: *mut *mut SpellDetector,
) -> SpellStatus {
    guarded(|| {
        clear_last_error();
        if out.is_null() {
            set_last_error("out is NULL");
            return SpellStatus::NullArgument;
        }
        let path = match path_arg(ckpt_path, "ckpt_path") {
            Ok(p) => p,
            Err(s) => return s,
        };
        match load_checkpoint(&path) {
            Ok(params) => {
                *out = Box::into_raw(Box::new(SpellDetector { params }));
                SpellStatus::Ok
            }
            Err(e) => fail(&e),
        }
    })
}

/// Releases a detector. NULL is a no-op.
///
/// # Safety
/// `detector` must be NULL or a pointer from `spell_detector_load` that
/// has not already been freed.
#[no_mangle]
pub unsafe extern "C" fn spell_detector_free(detector: *mut SpellDetector) {
    if !detector.is_null() {
        drop(Box::from_raw(detector));
    }
}

/// Number of trainable parameters in the loaded model.
///
/// # Safety
/// `detector` must be a live handle; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn spell_detector_param_count(
    detector: *const SpellDetector,
    out: *mut u64,
) -> SpellStatus {
    guarded(|| {
        clear_last_error();
        if detector.is_null() || out.is_null() {
            set_last_error("detector or out is NULL");
            return SpellStatus::NullArgument;
        }
        *out = (*detector).params.param_count() as u64;
        SpellStatus::Ok
    })
}

/// Scores every box in a tracks file and writes a predictions CSV
/// (`video_id,time,entity_id,score`) to `out_csv_path`. The output is
/// byte-identical to the CLI `infer` subcommand given the same inputs.
///
/// `chunk_size` is the maximum nodes per graph chunk and `tau` the
/// temporal edge threshold in seconds; pass 2000 and 0.9 for the
/// defaults used in training.
///
/// # Safety
/// `detector` must be a live handle; the four path arguments must be
/// NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn spell_detector_infer(
    detector: *const SpellDetector,
    tracks_path: *const c_char,
    features_path: *const c_char,
    features_index_path: *const c_char,
    chunk_size: u64,
    tau: f64,
    out_csv_path: *const c_char,
) -> SpellStatus {
    guarded(|| {
        clear_last_error();
        if detector.is_null() {
            set_last_error("detector is NULL");
            return SpellStatus::NullArgument;
        }
        let paths: Result<Vec<PathBuf>, SpellStatus> = [
            (tracks_path, "tracks_path"),
            (features_path, "features_path"),
            (features_index_path, "features_index_path"),
            (out_csv_path, "out_csv_path"),
        ]
        .into_iter()
        .map(|(p, what)| path_arg(p, what))
        .collect();
        let paths = match paths {
            Ok(p) => p,
            Err(s) => return s,
        };
        let detector = &*detector;
        let run = || -> spell_core::Result<usize> {
            let boxes = read_tracks(&paths[0])?;
            let store = FeatureStore::read(&paths[1], &paths[2])?;
            let dataset = build_dataset(
                boxes,
                &store,
                &detector.params.config,
                chunk_size as usize,
                tau,
            )?;
            let predictions = predict(&detector.params, &dataset)?;
            write_predictions(&paths[3], &predictions)?;
            Ok(predictions.len())
        };
        match run() {
            Ok(_) => SpellStatus::Ok,
            Err(e) => fail(&e),
        }
    })
}
