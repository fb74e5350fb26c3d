//! C ABI over the `mecrf` crate.
//!
//! Every fallible function returns a [`MecrfStatus`]; on failure the message
//! is available from [`mecrf_last_error`] on the same thread. Models are
//! opaque handles created by [`mecrf_model_load`] and released with
//! [`mecrf_model_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use mecrf::autodiff::Tensor;
use mecrf::config::Task;
use mecrf::data::{load_checkpoint, Sentence};
use mecrf::model::MeCrf;
use mecrf::{crf, pipeline, Error};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MecrfStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    NotFound = 3,
    Config = 4,
    Parse = 5,
    Integrity = 6,
    IncompatibleVersion = 7,
    LabelMismatch = 8,
    Numerical = 9,
    InvalidInput = 10,
    Io = 11,
    Panic = 12,
    Other = 13,
}

impl From<&Error> for MecrfStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::NotFound(_) => Self::NotFound,
            Error::Config { .. } => Self::Config,
            Error::Parse { .. } | Error::Json(_) => Self::Parse,
            Error::Integrity(_) => Self::Integrity,
            Error::IncompatibleVersion { .. } => Self::IncompatibleVersion,
            Error::LabelMismatch(_) => Self::LabelMismatch,
            e if e.is_numerical() => Self::Numerical,
            Error::Shape { .. } | Error::Input(_) | Error::Validation { .. } => Self::InvalidInput,
            Error::Io(_) => Self::Io,
            _ => Self::Other,
        }
    }
}

/// Opaque trained model.
pub struct MecrfModel {
    model: MeCrf,
    labels: Vec<CString>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn fail(status: MecrfStatus, msg: impl Into<String>) -> MecrfStatus {
    set_error(msg.into());
    status
}

fn guard(f: impl FnOnce() -> Result<(), MecrfStatus>) -> MecrfStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => MecrfStatus::Ok,
        Ok(Err(s)) => s,
        Err(_) => fail(MecrfStatus::Panic, "internal panic"),
    }
}

fn lift<T>(r: mecrf::Result<T>) -> Result<T, MecrfStatus> {
    r.map_err(|e| fail(MecrfStatus::from(&e), e.to_string()))
}

fn non_null<T>(p: *const T, what: &str) -> Result<(), MecrfStatus> {
    if p.is_null() {
        Err(fail(MecrfStatus::NullPointer, format!("`{what}` is null")))
    } else {
        Ok(())
    }
}

unsafe fn utf8<'a>(p: *const c_char, what: &str) -> Result<&'a str, MecrfStatus> {
    non_null(p, what)?;
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(MecrfStatus::InvalidUtf8, format!("`{what}` is not valid UTF-8")))
}

unsafe fn matrix(data: *const f64, rows: usize, cols: usize, what: &str) -> Result<Tensor, MecrfStatus> {
    non_null(data, what)?;
    let v = std::slice::from_raw_parts(data, rows * cols).to_vec();
    lift(Tensor::new(rows, cols, v))
}

/// Message of the last failed call on this thread, or null. The pointer is
/// valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn mecrf_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn mecrf_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a checkpoint. On success `*out` owns a new handle.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mecrf_model_load(path: *const c_char, out: *mut *mut MecrfModel) -> MecrfStatus {
    guard(|| {
        non_null(out, "out")?;
        *out = ptr::null_mut();
        let path = utf8(path, "path")?;
        let model = lift(load_checkpoint(Path::new(path)))?;
        let labels = model
            .labels
            .iter()
            .map(|l| CString::new(l.as_str()).map_err(|_| fail(MecrfStatus::Integrity, "label contains NUL")))
            .collect::<Result<_, _>>()?;
        *out = Box::into_raw(Box::new(MecrfModel { model, labels }));
        Ok(())
    })
}

/// Releases a handle; null is ignored.
///
/// # Safety
/// `model` must come from [`mecrf_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn mecrf_model_free(model: *mut MecrfModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of output labels, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn mecrf_model_num_labels(model: *const MecrfModel) -> usize {
    model.as_ref().map_or(0, |m| m.labels.len())
}

/// Label name by index, or null when out of range. Owned by the handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn mecrf_model_label(model: *const MecrfModel, index: usize) -> *const c_char {
    model
        .as_ref()
        .and_then(|m| m.labels.get(index))
        .map_or(ptr::null(), |c| c.as_ptr())
}

/// Whether the model tags token sequences (1) or forum threads (0).
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn mecrf_model_is_token_tagger(model: *const MecrfModel) -> bool {
    model.as_ref().is_some_and(|m| m.model.config.task == Task::Ner)
}

/// Tags one sentence. Writes `len` label indices to `out_labels`.
///
/// # Safety
/// `tokens` must point to `len` NUL-terminated strings and `out_labels` to
/// room for `len` values.
#[no_mangle]
pub unsafe extern "C" fn mecrf_model_tag(
    model: *const MecrfModel,
    tokens: *const *const c_char,
    len: usize,
    out_labels: *mut usize,
) -> MecrfStatus {
    guard(|| {
        non_null(model, "model")?;
        non_null(tokens, "tokens")?;
        non_null(out_labels, "out_labels")?;
        let m = &(*model).model;
        if m.config.task != Task::Ner {
            return Err(fail(MecrfStatus::Config, "model was trained for threads, not tokens"));
        }
        let words = std::slice::from_raw_parts(tokens, len)
            .iter()
            .map(|&p| utf8(p, "token").map(str::to_owned))
            .collect::<Result<Vec<_>, _>>()?;
        let sentence = Sentence {
            tags: vec![m.labels[0].clone(); words.len()],
            extra: vec![Vec::new(); words.len()],
            tokens: words,
            doc: 0,
        };
        let tags = lift(pipeline::tag_sentences(m, std::slice::from_ref(&sentence)))?.remove(0);
        let index = m.label_index();
        let out = std::slice::from_raw_parts_mut(out_labels, len);
        for (o, t) in out.iter_mut().zip(&tags) {
            *o = index[t.as_str()];
        }
        Ok(())
    })
}

/// Log partition function of a linear-chain CRF. `emissions` is `len x
/// num_labels`, `transitions` is `(num_labels + 2)^2` with start and stop
/// states last, both row-major.
///
/// # Safety
/// The arrays must have the stated sizes; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn mecrf_crf_log_partition(
    emissions: *const f64,
    len: usize,
    num_labels: usize,
    transitions: *const f64,
    out: *mut f64,
) -> MecrfStatus {
    guard(|| {
        non_null(out, "out")?;
        let e = matrix(emissions, len, num_labels, "emissions")?;
        let a = matrix(transitions, num_labels + 2, num_labels + 2, "transitions")?;
        *out = lift(crf::log_partition(&e, &a))?;
        Ok(())
    })
}

/// Highest-scoring label path (ties toward lower indices) and its score.
///
/// # Safety
/// As for [`mecrf_crf_log_partition`]; `out_path` must have room for `len`
/// values. `out_score` may be null.
#[no_mangle]
pub unsafe extern "C" fn mecrf_crf_viterbi(
    emissions: *const f64,
    len: usize,
    num_labels: usize,
    transitions: *const f64,
    out_path: *mut usize,
    out_score: *mut f64,
) -> MecrfStatus {
    guard(|| {
        non_null(out_path, "out_path")?;
        let e = matrix(emissions, len, num_labels, "emissions")?;
        let a = matrix(transitions, num_labels + 2, num_labels + 2, "transitions")?;
        let path = lift(crf::viterbi_decode(&e, &a))?;
        if !out_score.is_null() {
            *out_score = lift(crf::sequence_score(&e, &a, &path))?;
        }
        std::slice::from_raw_parts_mut(out_path, len).copy_from_slice(&path);
        Ok(())
    })
}
