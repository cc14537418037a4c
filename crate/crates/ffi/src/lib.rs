//! C ABI over the window, alignment and schedule APIs.
//!
//! Every fallible function returns a [`CawStatus`] and writes its result
//! through an out-pointer. On failure the message is kept per thread and
//! can be fetched with [`caw_last_error`]. Strings returned by the library
//! are owned by the caller and released with [`caw_string_free`]; handles
//! are released with their `_free` function.

use caw::config::RunConfig;
use caw::maps::AffineMap;
use caw::schedule::{ChainSchedule, ScheduleError};
use caw::window::{Axis, Membership, Window};
use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CawStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    /// schedule infeasible or windows not aligned
    Infeasible = 3,
    Internal = 4,
}

/// Membership classes returned by [`caw_window_membership`].
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CawMembership {
    Interior = 0,
    Entry = 1,
    Exit = 2,
    Outside = 3,
}

pub struct CawWindow {
    inner: Window,
}

pub struct CawSchedule {
    inner: ChainSchedule,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let text = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(text).ok());
}

fn fail(status: CawStatus, msg: impl Into<String>) -> CawStatus {
    set_error(msg);
    status
}

fn guard(f: impl FnOnce() -> CawStatus) -> CawStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(_) => fail(CawStatus::Internal, "panic inside the library"),
    }
}

unsafe fn read_str<'a>(s: *const c_char) -> Result<&'a str, CawStatus> {
    if s.is_null() {
        return Err(fail(CawStatus::NullPointer, "null string argument"));
    }
    CStr::from_ptr(s).to_str().map_err(|_| fail(CawStatus::InvalidArgument, "string is not valid UTF-8"))
}

fn into_c_string(s: String) -> *mut c_char {
    CString::new(s.replace('\0', " ")).map_or(ptr::null_mut(), CString::into_raw)
}

/// Message of the last failed call on this thread, or null. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn caw_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn caw_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Frees a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn caw_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Unit window `[0,1]^{m1} × [0,1]^{m2}` with axes labelled `u…s…`.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn caw_window_unit(m1: usize, m2: usize, out: *mut *mut CawWindow) -> CawStatus {
    guard(|| {
        if out.is_null() {
            return fail(CawStatus::NullPointer, "null output pointer");
        }
        let mut labels = vec![Axis::U; m1];
        labels.extend(vec![Axis::S; m2]);
        match Window::unit(m1, m2, labels) {
            Ok(w) => {
                *out = Box::into_raw(Box::new(CawWindow { inner: w }));
                CawStatus::Ok
            }
            Err(e) => fail(CawStatus::InvalidArgument, e.to_string()),
        }
    })
}

/// Parses a window from its JSON form.
///
/// # Safety
/// `json` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn caw_window_from_json(json: *const c_char, out: *mut *mut CawWindow) -> CawStatus {
    guard(|| {
        if out.is_null() {
            return fail(CawStatus::NullPointer, "null output pointer");
        }
        let text = match read_str(json) {
            Ok(t) => t,
            Err(s) => return s,
        };
        match Window::from_json(text) {
            Ok(w) => {
                *out = Box::into_raw(Box::new(CawWindow { inner: w }));
                CawStatus::Ok
            }
            Err(e) => fail(CawStatus::InvalidArgument, e.to_string()),
        }
    })
}

/// JSON form of a window; free the result with [`caw_string_free`].
///
/// # Safety
/// `w` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn caw_window_to_json(w: *const CawWindow, out: *mut *mut c_char) -> CawStatus {
    guard(|| {
        if w.is_null() || out.is_null() {
            return fail(CawStatus::NullPointer, "null argument");
        }
        *out = into_c_string((*w).inner.to_json());
        CawStatus::Ok
    })
}

/// Total dimension of the window.
///
/// # Safety
/// `w` must be a live handle or null (which gives 0).
#[no_mangle]
pub unsafe extern "C" fn caw_window_dim(w: *const CawWindow) -> usize {
    if w.is_null() {
        0
    } else {
        (*w).inner.dim()
    }
}

/// Classifies the point `x[0..len]` against the window.
///
/// # Safety
/// `w` must be a live handle, `x` must point to `len` doubles and `out`
/// must be valid.
#[no_mangle]
pub unsafe extern "C" fn caw_window_membership(
    w: *const CawWindow,
    x: *const f64,
    len: usize,
    out: *mut CawMembership,
) -> CawStatus {
    guard(|| {
        if w.is_null() || x.is_null() || out.is_null() {
            return fail(CawStatus::NullPointer, "null argument");
        }
        let point = std::slice::from_raw_parts(x, len);
        match (*w).inner.membership(point) {
            Ok(m) => {
                *out = match m {
                    Membership::Interior => CawMembership::Interior,
                    Membership::Entry => CawMembership::Entry,
                    Membership::Exit => CawMembership::Exit,
                    Membership::Outside => CawMembership::Outside,
                };
                CawStatus::Ok
            }
            Err(e) => fail(CawStatus::InvalidArgument, e.to_string()),
        }
    })
}

/// Releases a window handle. Null is ignored.
///
/// # Safety
/// `w` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn caw_window_free(w: *mut CawWindow) {
    if !w.is_null() {
        drop(Box::from_raw(w));
    }
}

/// Checks `w1 ⇒ w2` under the affine map `spec`
/// (`affine:a11,…;b1,…[;amp,freq]`). Writes 1 or 0 to `aligned` and the
/// margin (≤ 0 when not aligned) to `margin`; both outputs are set even
/// when the windows are not aligned, in which case the status is `Ok`.
///
/// # Safety
/// Handles must be live, `spec` NUL-terminated, outputs valid.
#[no_mangle]
pub unsafe extern "C" fn caw_check_alignment_affine(
    w1: *const CawWindow,
    w2: *const CawWindow,
    spec: *const c_char,
    samples: usize,
    aligned: *mut i32,
    margin: *mut f64,
) -> CawStatus {
    guard(|| {
        if w1.is_null() || w2.is_null() || aligned.is_null() || margin.is_null() {
            return fail(CawStatus::NullPointer, "null argument");
        }
        let text = match read_str(spec) {
            Ok(t) => t,
            Err(s) => return s,
        };
        let map = match AffineMap::parse(text) {
            Ok(m) => m,
            Err(e) => return fail(CawStatus::InvalidArgument, e.to_string()),
        };
        match caw::check_alignment(&(*w1).inner, &(*w2).inner, &map, samples) {
            Ok(r) => {
                *aligned = i32::from(r.aligned);
                *margin = r.margin;
                if let Some(w) = &r.witness {
                    set_error(format!("{} check failed: {}", w.check, w.detail));
                }
                CawStatus::Ok
            }
            Err(e) => fail(CawStatus::InvalidArgument, e.to_string()),
        }
    })
}

/// Solves the chain schedule of a TOML run configuration. Infeasible
/// configurations return `Infeasible` with the witness in the last error.
///
/// # Safety
/// `toml` must be NUL-terminated and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn caw_schedule_from_toml(toml: *const c_char, out: *mut *mut CawSchedule) -> CawStatus {
    guard(|| {
        if out.is_null() {
            return fail(CawStatus::NullPointer, "null output pointer");
        }
        let text = match read_str(toml) {
            Ok(t) => t,
            Err(s) => return s,
        };
        let cfg = match RunConfig::from_toml_str(text).and_then(|c| c.validate().map(|_| c)) {
            Ok(c) => c,
            Err(e) => return fail(CawStatus::InvalidArgument, e.to_string()),
        };
        match cfg.schedule() {
            Ok(s) => {
                *out = Box::into_raw(Box::new(CawSchedule { inner: s }));
                CawStatus::Ok
            }
            Err(e @ ScheduleError::Invalid(_)) => fail(CawStatus::InvalidArgument, e.to_string()),
            Err(e) => fail(CawStatus::Infeasible, e.to_string()),
        }
    })
}

/// Number of links in the schedule.
///
/// # Safety
/// `s` must be a live handle or null (which gives 0).
#[no_mangle]
pub unsafe extern "C" fn caw_schedule_link_count(s: *const CawSchedule) -> usize {
    if s.is_null() {
        0
    } else {
        (*s).inner.links.len()
    }
}

/// Iterate counts `N, K, M` of link `index` (0-based).
///
/// # Safety
/// `s` must be a live handle and `counts` must point to 3 writable values.
#[no_mangle]
pub unsafe extern "C" fn caw_schedule_link_counts(s: *const CawSchedule, index: usize, counts: *mut u64) -> CawStatus {
    guard(|| {
        if s.is_null() || counts.is_null() {
            return fail(CawStatus::NullPointer, "null argument");
        }
        let sched = &*s;
        match sched.inner.links.get(index) {
            Some(l) => {
                let out = std::slice::from_raw_parts_mut(counts, 3);
                out.copy_from_slice(&[l.n, l.k, l.m]);
                CawStatus::Ok
            }
            None => fail(CawStatus::InvalidArgument, format!("link {index} out of range")),
        }
    })
}

/// Sum of all iterate counts.
///
/// # Safety
/// `s` must be a live handle or null (which gives 0).
#[no_mangle]
pub unsafe extern "C" fn caw_schedule_total_steps(s: *const CawSchedule) -> u64 {
    if s.is_null() {
        0
    } else {
        (*s).inner.total_steps
    }
}

/// JSON form of the schedule; free the result with [`caw_string_free`].
///
/// # Safety
/// `s` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn caw_schedule_to_json(s: *const CawSchedule, out: *mut *mut c_char) -> CawStatus {
    guard(|| {
        if s.is_null() || out.is_null() {
            return fail(CawStatus::NullPointer, "null argument");
        }
        *out = into_c_string((*s).inner.to_json());
        CawStatus::Ok
    })
}

/// Releases a schedule handle. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn caw_schedule_free(s: *mut CawSchedule) {
    if !s.is_null() {
        drop(Box::from_raw(s));
    }
}
