//! C ABI over the aligner inference surface: load a trained head or a pair of
//! statistical models, align one sentence pair, score Pharaoh text.
//!
//! Every call returns a [`WaStatus`]. On failure the message is available from
//! [`wa_last_error`] on the same thread until the next failing call. Strings
//! returned through out-parameters are owned by the caller and released with
//! [`wa_string_free`]; handles are released with their `*_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use wordalign::corpus::{parse_alignments, SentencePair};
use wordalign::disc::DiscAligner;
use wordalign::eval::{score, ScoreMode};
use wordalign::stat::{Heuristic, StatModel, StatPair};
use wordalign::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WaStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    Io = 3,
    Parse = 4,
    InvalidArgument = 5,
    InvalidModel = 6,
    Internal = 7,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct WaScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Trained alignment head with its encoder-decoder.
pub struct WaDiscAligner(DiscAligner);

/// Forward and backward statistical models.
pub struct WaStatAligner(StatPair);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).unwrap_or_default());
}

struct Fail(WaStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Io { .. } => WaStatus::Io,
            Error::Parse { .. } | Error::LinkOutOfBounds { .. } | Error::Json(_) => WaStatus::Parse,
            Error::Format(_) => WaStatus::InvalidModel,
            Error::Invalid(_) | Error::VocabOverflow { .. } | Error::Shape(_) => WaStatus::InvalidArgument,
            Error::NonFinite(_) => WaStatus::Internal,
        };
        Fail(status, e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> WaStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => WaStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            WaStatus::Internal
        }
    }
}

fn null(name: &str) -> Fail {
    Fail(WaStatus::NullArgument, format!("`{name}` is null"))
}

unsafe fn text<'a>(p: *const c_char, name: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(name));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(WaStatus::InvalidUtf8, format!("`{name}` is not valid UTF-8")))
}

unsafe fn put_string(out: *mut *mut c_char, s: String) -> Result<(), Fail> {
    let c = CString::new(s).map_err(|_| Fail(WaStatus::Internal, "output contains NUL".into()))?;
    *out = c.into_raw();
    Ok(())
}

unsafe fn pair(source: *const c_char, target: *const c_char) -> Result<SentencePair, Fail> {
    Ok(SentencePair::from_text("1", text(source, "source")?, text(target, "target")?)?)
}

/// Message of the last failure on this thread; empty if none. The pointer is
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn wa_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn wa_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// # Safety
/// `s` must be null or a string returned by this library, freed once.
#[no_mangle]
pub unsafe extern "C" fn wa_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Loads a trained aligner written by `train-aligner`.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn wa_disc_load(path: *const c_char, out: *mut *mut WaDiscAligner) -> WaStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let model = DiscAligner::load(PathBuf::from(text(path, "path")?))?;
        *out = Box::into_raw(Box::new(WaDiscAligner(model)));
        Ok(())
    })
}

/// # Safety
/// `handle` must be null or come from [`wa_disc_load`], freed once.
#[no_mangle]
pub unsafe extern "C" fn wa_disc_free(handle: *mut WaDiscAligner) {
    if !handle.is_null() {
        drop(Box::from_raw(handle));
    }
}

/// # Safety
/// `handle` must be live; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn wa_disc_get_alpha(handle: *const WaDiscAligner, out: *mut f64) -> WaStatus {
    guard(|| {
        let h = handle.as_ref().ok_or_else(|| null("handle"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = h.0.alpha;
        Ok(())
    })
}

/// Sets the decision threshold; must lie in [0, 1].
///
/// # Safety
/// `handle` must be live.
#[no_mangle]
pub unsafe extern "C" fn wa_disc_set_alpha(handle: *mut WaDiscAligner, alpha: f64) -> WaStatus {
    guard(|| {
        let h = handle.as_mut().ok_or_else(|| null("handle"))?;
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Fail(WaStatus::InvalidArgument, format!("alpha {alpha} outside [0, 1]")));
        }
        h.0.alpha = alpha;
        Ok(())
    })
}

/// Aligns whitespace-tokenized `source` and `target`; writes Pharaoh `i-j`
/// links to `*out`.
///
/// # Safety
/// `handle` must be live; strings NUL-terminated; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn wa_disc_align(
    handle: *const WaDiscAligner,
    source: *const c_char,
    target: *const c_char,
    out: *mut *mut c_char,
) -> WaStatus {
    guard(|| {
        let h = handle.as_ref().ok_or_else(|| null("handle"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let links = h.0.align(&pair(source, target)?)?;
        put_string(out, links.to_pharaoh())
    })
}

/// Loads `PREFIX.fwd` and `PREFIX.bwd` as written by `em-align --save-models`.
///
/// # Safety
/// `prefix` must be NUL-terminated; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn wa_stat_load(prefix: *const c_char, out: *mut *mut WaStatAligner) -> WaStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let prefix = text(prefix, "prefix")?;
        let models = StatPair {
            forward: StatModel::load(format!("{prefix}.fwd"))?,
            backward: StatModel::load(format!("{prefix}.bwd"))?,
        };
        *out = Box::into_raw(Box::new(WaStatAligner(models)));
        Ok(())
    })
}

/// # Safety
/// `handle` must be null or come from [`wa_stat_load`], freed once.
#[no_mangle]
pub unsafe extern "C" fn wa_stat_free(handle: *mut WaStatAligner) {
    if !handle.is_null() {
        drop(Box::from_raw(handle));
    }
}

/// Symmetrized alignment; `heuristic` is `intersection`, `union` or
/// `grow-diag-final-and`.
///
/// # Safety
/// `handle` must be live; strings NUL-terminated; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn wa_stat_align(
    handle: *const WaStatAligner,
    source: *const c_char,
    target: *const c_char,
    heuristic: *const c_char,
    out: *mut *mut c_char,
) -> WaStatus {
    guard(|| {
        let h = handle.as_ref().ok_or_else(|| null("handle"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let heuristic: Heuristic = text(heuristic, "heuristic")?.parse()?;
        let links = h.0.align(&pair(source, target)?, heuristic)?;
        put_string(out, links.to_pharaoh())
    })
}

/// Scores Pharaoh text `pred` against `gold` (one line per sentence);
/// `mode` is `macro` or `micro`.
///
/// # Safety
/// Strings must be NUL-terminated; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn wa_score(
    pred: *const c_char,
    gold: *const c_char,
    mode: *const c_char,
    out: *mut WaScore,
) -> WaStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let mode: ScoreMode = text(mode, "mode")?.parse()?;
        let pred = parse_alignments(text(pred, "pred")?.as_bytes())?;
        let gold = parse_alignments(text(gold, "gold")?.as_bytes())?;
        let r = score(&pred, &gold, mode)?;
        *out = WaScore {
            precision: r.precision,
            recall: r.recall,
            f1: r.f1,
        };
        Ok(())
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::ptr;

    #[test]
    fn errors_set_the_message() {
        let mut s = WaScore::default();
        let st = unsafe { wa_score(ptr::null(), c"".as_ptr(), c"macro".as_ptr(), &mut s) };
        assert_eq!(st, WaStatus::NullArgument);
        let msg = unsafe { CStr::from_ptr(wa_last_error()) }.to_str().unwrap();
        assert!(msg.contains("pred"), "{msg}");
    }
}
