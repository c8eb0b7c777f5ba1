//! C ABI for loading annotated forms, running a trained model, the linking
//! baseline and the evaluation harness.
//!
//! Every fallible call returns an `MsauStatus`. On failure the message is
//! kept per thread and can be read with `msau_last_error`. Strings handed
//! out by the library must be released with `msau_string_free`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use msaupaf::baseline::{heuristic_link, labeled_boxes, DistanceMode};
use msaupaf::eval::{ClassMatch, EvalReport};
use msaupaf::funsd::{parse_form, write_form, FormDocument};
use msaupaf::model::Model;
use msaupaf::Error;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MsauStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    Parse = 3,
    Validation = 4,
    Config = 5,
    Io = 6,
    Runtime = 7,
    Panic = 8,
}

/// Opaque handle to an annotated form.
pub struct MsauForm {
    inner: FormDocument,
}

/// Opaque handle to a trained model.
pub struct MsauModel {
    inner: Model,
}

/// Scores of one evaluation.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct MsauScores {
    pub labeling_precision: f64,
    pub labeling_recall: f64,
    pub labeling_f1: f64,
    pub linking_precision: f64,
    pub linking_recall: f64,
    pub linking_f1: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> MsauStatus {
    match e {
        Error::Parse { .. } => MsauStatus::Parse,
        Error::Validation(_) => MsauStatus::Validation,
        Error::Config(_) => MsauStatus::Config,
        Error::Io { .. } | Error::IoBare(_) => MsauStatus::Io,
        _ => MsauStatus::Runtime,
    }
}

fn guard(f: impl FnOnce() -> Result<(), (MsauStatus, String)>) -> MsauStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => MsauStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            MsauStatus::Panic
        }
    }
}

fn lib_err(e: Error) -> (MsauStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (MsauStatus, String) {
    (MsauStatus::NullArgument, format!("`{what}` is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, (MsauStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| (MsauStatus::InvalidUtf8, format!("`{what}` is not UTF-8")))
}

fn out_string(s: String, out: *mut *mut c_char) -> Result<(), (MsauStatus, String)> {
    let c = CString::new(s).map_err(|_| (MsauStatus::Runtime, "output contains NUL".to_string()))?;
    // SAFETY: callers check `out` for null before producing output.
    unsafe { *out = c.into_raw() };
    Ok(())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn msau_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or NULL. The pointer
/// stays valid until the next call into the library on the same thread.
#[no_mangle]
pub extern "C" fn msau_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// # Safety
/// `s` must be NULL or a string returned by this library and not yet freed.
#[no_mangle]
pub unsafe extern "C" fn msau_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Parse a FUNSD-schema annotation held in `json` (`len` bytes).
///
/// # Safety
/// `json` must point to `len` readable bytes and `out` to writable storage.
#[no_mangle]
pub unsafe extern "C" fn msau_form_parse(json: *const u8, len: usize, out: *mut *mut MsauForm) -> MsauStatus {
    guard(|| {
        if json.is_null() {
            return Err(null("json"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let bytes = std::slice::from_raw_parts(json, len);
        let form = parse_form(bytes).map_err(lib_err)?;
        *out = Box::into_raw(Box::new(MsauForm { inner: form }));
        Ok(())
    })
}

/// # Safety
/// `form` must be NULL or a handle from `msau_form_parse` not yet freed.
#[no_mangle]
pub unsafe extern "C" fn msau_form_free(form: *mut MsauForm) {
    if !form.is_null() {
        drop(Box::from_raw(form));
    }
}

/// Number of entities and links of a form. Either output may be NULL.
///
/// # Safety
/// `form` must be a live handle; non-NULL outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn msau_form_counts(
    form: *const MsauForm,
    n_entities: *mut usize,
    n_links: *mut usize,
) -> MsauStatus {
    guard(|| {
        let f = &form.as_ref().ok_or_else(|| null("form"))?.inner;
        if !n_entities.is_null() {
            *n_entities = f.entities.len();
        }
        if !n_links.is_null() {
            *n_links = f.links.len();
        }
        Ok(())
    })
}

/// Serialize a form back to FUNSD-schema JSON.
///
/// # Safety
/// `form` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn msau_form_to_json(form: *const MsauForm, out: *mut *mut c_char) -> MsauStatus {
    guard(|| {
        let f = &form.as_ref().ok_or_else(|| null("form"))?.inner;
        if out.is_null() {
            return Err(null("out"));
        }
        out_string(String::from_utf8_lossy(&write_form(f)).into_owned(), out)
    })
}

/// Replace the links of `form` with the distance-based heuristic.
/// `distance` is `"center"` or `"nearest-edge"`.
///
/// # Safety
/// `form` must be a live handle and `distance` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn msau_form_link_heuristic(form: *mut MsauForm, distance: *const c_char) -> MsauStatus {
    guard(|| {
        let mode: DistanceMode = str_arg(distance, "distance")?.parse().map_err(lib_err)?;
        let f = &mut form.as_mut().ok_or_else(|| null("form"))?.inner;
        f.links = heuristic_link(&labeled_boxes(f), mode);
        f.sync_entity_links();
        Ok(())
    })
}

/// Load a model directory written by `train`.
///
/// # Safety
/// `dir` must be a NUL-terminated path and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn msau_model_load(dir: *const c_char, out: *mut *mut MsauModel) -> MsauStatus {
    guard(|| {
        let dir = str_arg(dir, "dir")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let m = Model::load(Path::new(dir)).map_err(lib_err)?;
        *out = Box::into_raw(Box::new(MsauModel { inner: m }));
        Ok(())
    })
}

/// # Safety
/// `model` must be NULL or a handle from `msau_model_load` not yet freed.
#[no_mangle]
pub unsafe extern "C" fn msau_model_free(model: *mut MsauModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Decode `form` with `model`, producing a new form handle holding the
/// predicted entities and links.
///
/// # Safety
/// `model` and `form` must be live handles and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn msau_model_predict(
    model: *const MsauModel,
    form: *const MsauForm,
    out: *mut *mut MsauForm,
) -> MsauStatus {
    guard(|| {
        let m = &model.as_ref().ok_or_else(|| null("model"))?.inner;
        let f = &form.as_ref().ok_or_else(|| null("form"))?.inner;
        if out.is_null() {
            return Err(null("out"));
        }
        let d = m.predict(f).map_err(lib_err)?;
        *out = Box::into_raw(Box::new(MsauForm {
            inner: d.to_form_document(),
        }));
        Ok(())
    })
}

/// Decode `form` with `model` and return the prediction as JSON with
/// per-entity scores.
///
/// # Safety
/// `model` and `form` must be live handles and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn msau_model_predict_json(
    model: *const MsauModel,
    form: *const MsauForm,
    out: *mut *mut c_char,
) -> MsauStatus {
    guard(|| {
        let m = &model.as_ref().ok_or_else(|| null("model"))?.inner;
        let f = &form.as_ref().ok_or_else(|| null("form"))?.inner;
        if out.is_null() {
            return Err(null("out"));
        }
        let d = m.predict(f).map_err(lib_err)?;
        out_string(d.to_json().to_string(), out)
    })
}

/// Score `n` prediction/ground-truth pairs at IoU `threshold`. With
/// `separate_classes` nonzero, boxes are matched ignoring class first.
///
/// # Safety
/// `pred` and `gt` must each point to `n` live handles; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn msau_evaluate(
    pred: *const *const MsauForm,
    gt: *const *const MsauForm,
    n: usize,
    threshold: f64,
    separate_classes: i32,
    out: *mut MsauScores,
) -> MsauStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        if n > 0 && (pred.is_null() || gt.is_null()) {
            return Err(null("pred/gt"));
        }
        if !(threshold > 0.0 && threshold <= 1.0) {
            return Err((MsauStatus::Config, format!("threshold {threshold} outside (0, 1]")));
        }
        let mode = if separate_classes != 0 {
            ClassMatch::Separate
        } else {
            ClassMatch::Joint
        };
        let mut r = EvalReport::default();
        for i in 0..n {
            let p = &(*pred.add(i)).as_ref().ok_or_else(|| null("pred[i]"))?.inner;
            let g = &(*gt.add(i)).as_ref().ok_or_else(|| null("gt[i]"))?.inner;
            r.add_form(p, g, threshold, mode);
        }
        *out = MsauScores {
            labeling_precision: r.labeling.precision(),
            labeling_recall: r.labeling.recall(),
            labeling_f1: r.labeling.f1(),
            linking_precision: r.linking.precision(),
            linking_recall: r.linking.recall(),
            linking_f1: r.linking.f1(),
        };
        Ok(())
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn error_codes_follow_library_errors() {
        assert_eq!(status_of(&Error::Config("x".into())), MsauStatus::Config);
        assert_eq!(
            status_of(&Error::Parse {
                offset: 0,
                message: "x".into()
            }),
            MsauStatus::Parse
        );
        assert_eq!(status_of(&Error::NonFiniteLoss { term: "x" }), MsauStatus::Runtime);
    }

    #[test]
    fn panics_become_status() {
        let s = guard(|| panic!("boom"));
        assert_eq!(s, MsauStatus::Panic);
        assert!(!msau_last_error().is_null());
    }
}
