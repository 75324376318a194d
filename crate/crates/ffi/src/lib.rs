//! C ABI for loading detectors, scoring logits, reading logit dumps and
//! computing metrics.
//!
//! Every fallible function returns a [`MuliStatus`]. On failure the message
//! is available from [`muli_last_error`] on the same thread until the next
//! failing call. Handles are opaque and must be released with their `_free`
//! function. Panics never cross the boundary; they surface as
//! [`MuliStatus::Panic`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use muli::datamodel::Label;
use muli::ingest::{read_logit_dump, LogitDump};
use muli::metrics::{auprc, balanced_optimal_accuracy, tpr_at_fpr, ScoreSeries, DEFAULT_PROFILE};
use muli::trainer::{load_model, DetectorModel};
use muli::Error;

/// Result codes. Values 1 to 3 match the CLI exit codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MuliStatus {
    Ok = 0,
    InvalidArgument = 1,
    Data = 2,
    Backend = 3,
    NullPointer = 4,
    DimensionMismatch = 5,
    FingerprintMismatch = 6,
    Version = 7,
    Io = 8,
    Panic = 9,
}

impl From<&Error> for MuliStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::InvalidArgument(_) => MuliStatus::InvalidArgument,
            Error::Backend { .. } => MuliStatus::Backend,
            Error::DimensionMismatch { .. } => MuliStatus::DimensionMismatch,
            Error::FingerprintMismatch { .. } => MuliStatus::FingerprintMismatch,
            Error::Version { .. } => MuliStatus::Version,
            Error::Io { .. } => MuliStatus::Io,
            _ => MuliStatus::Data,
        }
    }
}

/// Loaded detector.
pub struct MuliModel {
    model: DetectorModel,
    fingerprint: CString,
}

/// Loaded logit dump.
pub struct MuliDump {
    dump: LogitDump,
    fingerprint: CString,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MuliTprAtFpr {
    pub tpr: f64,
    pub threshold: f64,
    pub achieved_fpr: f64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MuliModeration {
    pub score: f64,
    pub threshold: f64,
    pub flagged: bool,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

struct Failure(MuliStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(MuliStatus::from(&e), e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(MuliStatus::NullPointer, format!("{what} is null"))
}

fn set_last_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> MuliStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => MuliStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_last_error(&msg);
            status
        }
        Err(_) => {
            set_last_error("internal panic");
            MuliStatus::Panic
        }
    }
}

unsafe fn slice<'a, T>(ptr: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if ptr.is_null() {
        return Err(null(what));
    }
    // SAFETY: caller guarantees `ptr` points to `len` readable elements.
    Ok(unsafe { std::slice::from_raw_parts(ptr, len) })
}

unsafe fn string<'a>(ptr: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if ptr.is_null() {
        return Err(null(what));
    }
    // SAFETY: caller guarantees a NUL-terminated string.
    unsafe { CStr::from_ptr(ptr) }
        .to_str()
        .map_err(|_| Failure(MuliStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn out<'a, T>(ptr: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    // SAFETY: caller guarantees `ptr` is null or valid for writes.
    unsafe { ptr.as_mut() }.ok_or_else(|| null(what))
}

unsafe fn handle<'a, T>(ptr: *const T, what: &str) -> Result<&'a T, Failure> {
    // SAFETY: caller passes a live handle from the matching constructor.
    unsafe { ptr.as_ref() }.ok_or_else(|| null(what))
}

unsafe fn series(scores: *const f64, labels: *const u8, n: usize) -> Result<ScoreSeries, Failure> {
    let s = unsafe { slice(scores, n, "scores")? };
    let l = unsafe { slice(labels, n, "labels")? };
    let labels = l
        .iter()
        .map(|&v| Label::try_from(v))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|_| Failure(MuliStatus::InvalidArgument, "labels must be 0 or 1".into()))?;
    Ok(ScoreSeries::from_scores(s, &labels)?)
}

/// Message of the last failure on this thread; empty if none. Valid until
/// the next failing call on this thread.
#[no_mangle]
pub extern "C" fn muli_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn muli_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a model file. On success `*out` owns a handle for [`muli_model_free`].
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn muli_model_load(path: *const c_char, out: *mut *mut MuliModel) -> MuliStatus {
    guard(|| {
        let out = unsafe { self::out(out, "out")? };
        *out = std::ptr::null_mut();
        let path = PathBuf::from(unsafe { string(path, "path")? });
        let model = load_model(&path)?;
        let fingerprint = CString::new(model.backend_fingerprint.clone()).unwrap_or_default();
        *out = Box::into_raw(Box::new(MuliModel { model, fingerprint }));
        Ok(())
    })
}

/// Releases a model handle. Null is ignored.
///
/// # Safety
/// `m` must come from [`muli_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn muli_model_free(m: *mut MuliModel) {
    if !m.is_null() {
        // SAFETY: produced by Box::into_raw in muli_model_load.
        drop(unsafe { Box::from_raw(m) });
    }
}

/// # Safety
/// `m` must be a live model handle; `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn muli_model_vocab_size(m: *const MuliModel, out: *mut usize) -> MuliStatus {
    guard(|| {
        *unsafe { self::out(out, "out")? } = unsafe { handle(m, "model")? }.model.vocab_size;
        Ok(())
    })
}

/// Backend fingerprint of the model, owned by the handle.
///
/// # Safety
/// `m` must be a live model handle or null (returns null).
#[no_mangle]
pub unsafe extern "C" fn muli_model_fingerprint(m: *const MuliModel) -> *const c_char {
    match unsafe { m.as_ref() } {
        Some(m) => m.fingerprint.as_ptr(),
        None => std::ptr::null(),
    }
}

/// Scores one logit vector of length `vocab_size`.
///
/// # Safety
/// `logits` must point to `len` doubles; `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn muli_model_score(
    m: *const MuliModel,
    logits: *const f64,
    len: usize,
    out: *mut f64,
) -> MuliStatus {
    guard(|| {
        let m = unsafe { handle(m, "model")? };
        let l = unsafe { slice(logits, len, "logits")? };
        *unsafe { self::out(out, "out")? } = m.model.score(l)?;
        Ok(())
    })
}

/// Like [`muli_model_score`] for single-precision logits.
///
/// # Safety
/// `logits` must point to `len` floats; `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn muli_model_score_f32(
    m: *const MuliModel,
    logits: *const f32,
    len: usize,
    out: *mut f64,
) -> MuliStatus {
    guard(|| {
        let m = unsafe { handle(m, "model")? };
        let l = unsafe { slice(logits, len, "logits")? };
        *unsafe { self::out(out, "out")? } = m.model.score_f32(l)?;
        Ok(())
    })
}

/// Threshold stored for `profile`.
///
/// # Safety
/// `profile` must be a NUL-terminated string; `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn muli_model_threshold(
    m: *const MuliModel,
    profile: *const c_char,
    out: *mut f64,
) -> MuliStatus {
    guard(|| {
        let m = unsafe { handle(m, "model")? };
        let name = unsafe { string(profile, "profile")? };
        let t = m
            .model
            .threshold(name)
            .ok_or_else(|| Failure(MuliStatus::InvalidArgument, format!("unknown profile '{name}'")))?;
        *unsafe { self::out(out, "out")? } = t;
        Ok(())
    })
}

/// Scores and applies the profile threshold (`flagged = score > threshold`).
/// A null `profile` selects the default profile.
///
/// # Safety
/// `logits` must point to `len` doubles; `profile` null or NUL-terminated;
/// `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn muli_model_moderate(
    m: *const MuliModel,
    logits: *const f64,
    len: usize,
    profile: *const c_char,
    out: *mut MuliModeration,
) -> MuliStatus {
    guard(|| {
        let m = unsafe { handle(m, "model")? };
        let name = if profile.is_null() {
            DEFAULT_PROFILE
        } else {
            unsafe { string(profile, "profile")? }
        };
        let threshold = m
            .model
            .threshold(name)
            .ok_or_else(|| Failure(MuliStatus::InvalidArgument, format!("unknown profile '{name}'")))?;
        let score = m.model.score(unsafe { slice(logits, len, "logits")? })?;
        *unsafe { self::out(out, "out")? } = MuliModeration {
            score,
            threshold,
            flagged: score > threshold,
        };
        Ok(())
    })
}

/// Opens a logit dump. On success `*out` owns a handle for [`muli_dump_free`].
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn muli_dump_open(path: *const c_char, out: *mut *mut MuliDump) -> MuliStatus {
    guard(|| {
        let out = unsafe { self::out(out, "out")? };
        *out = std::ptr::null_mut();
        let path = PathBuf::from(unsafe { string(path, "path")? });
        let dump = read_logit_dump(&path)?;
        let fingerprint = CString::new(dump.fingerprint()).unwrap_or_default();
        *out = Box::into_raw(Box::new(MuliDump { dump, fingerprint }));
        Ok(())
    })
}

/// Releases a dump handle. Null is ignored.
///
/// # Safety
/// `d` must come from [`muli_dump_open`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn muli_dump_free(d: *mut MuliDump) {
    if !d.is_null() {
        // SAFETY: produced by Box::into_raw in muli_dump_open.
        drop(unsafe { Box::from_raw(d) });
    }
}

/// # Safety
/// `d` must be a live dump handle; `rows` and `cols` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn muli_dump_shape(d: *const MuliDump, rows: *mut usize, cols: *mut usize) -> MuliStatus {
    guard(|| {
        let d = unsafe { handle(d, "dump")? };
        *unsafe { out(rows, "rows")? } = d.dump.n_rows();
        *unsafe { out(cols, "cols")? } = d.dump.n_cols();
        Ok(())
    })
}

/// Backend fingerprint of the dump, owned by the handle.
///
/// # Safety
/// `d` must be a live dump handle or null (returns null).
#[no_mangle]
pub unsafe extern "C" fn muli_dump_fingerprint(d: *const MuliDump) -> *const c_char {
    match unsafe { d.as_ref() } {
        Some(d) => d.fingerprint.as_ptr(),
        None => std::ptr::null(),
    }
}

/// Points `*out` at the `cols` floats of row `i`, owned by the handle.
///
/// # Safety
/// `d` must be a live dump handle; `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn muli_dump_row(d: *const MuliDump, i: usize, out: *mut *const f32) -> MuliStatus {
    guard(|| {
        let d = unsafe { handle(d, "dump")? };
        if i >= d.dump.n_rows() {
            return Err(Failure(
                MuliStatus::InvalidArgument,
                format!("row {i} out of range {}", d.dump.n_rows()),
            ));
        }
        *unsafe { self::out(out, "out")? } = d.dump.entry_logits(i).as_ptr();
        Ok(())
    })
}

/// Label (0 benign, 1 toxic) of row `i`.
///
/// # Safety
/// `d` must be a live dump handle; `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn muli_dump_label(d: *const MuliDump, i: usize, out: *mut u8) -> MuliStatus {
    guard(|| {
        let d = unsafe { handle(d, "dump")? };
        let entry = d.dump.manifest.get(i).ok_or_else(|| {
            Failure(MuliStatus::InvalidArgument, format!("row {i} out of range {}", d.dump.n_rows()))
        })?;
        *unsafe { self::out(out, "out")? } = entry.label.as_u8();
        Ok(())
    })
}

/// Scores every dump row into `out[0..rows)`. Fails on a fingerprint
/// mismatch unless `force` is set, and when `cap < rows`.
///
/// # Safety
/// Handles must be live; `out` must point to `cap` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn muli_model_score_dump(
    m: *const MuliModel,
    d: *const MuliDump,
    force: bool,
    out: *mut f64,
    cap: usize,
) -> MuliStatus {
    guard(|| {
        let m = unsafe { handle(m, "model")? };
        let d = unsafe { handle(d, "dump")? };
        let n = d.dump.n_rows();
        if cap < n {
            return Err(Failure(MuliStatus::InvalidArgument, format!("output holds {cap}, need {n}")));
        }
        if n == 0 {
            return Ok(());
        }
        muli::app::check_fingerprint(&m.model, d.dump.fingerprint(), force)?;
        if out.is_null() {
            return Err(null("out"));
        }
        // SAFETY: caller guarantees `cap >= n` writable doubles.
        let dst = unsafe { std::slice::from_raw_parts_mut(out, n) };
        for (i, slot) in dst.iter_mut().enumerate() {
            *slot = m.model.score_f32(d.dump.entry_logits(i))?;
        }
        Ok(())
    })
}

/// Average precision of `n` scores with 0/1 labels.
///
/// # Safety
/// `scores` and `labels` must each point to `n` elements; `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn muli_auprc(scores: *const f64, labels: *const u8, n: usize, out: *mut f64) -> MuliStatus {
    guard(|| {
        let s = unsafe { series(scores, labels, n)? };
        *unsafe { self::out(out, "out")? } = auprc(&s)?;
        Ok(())
    })
}

/// Balanced optimal accuracy in percent.
///
/// # Safety
/// `scores` and `labels` must each point to `n` elements; `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn muli_balanced_accuracy(
    scores: *const f64,
    labels: *const u8,
    n: usize,
    out: *mut f64,
) -> MuliStatus {
    guard(|| {
        let s = unsafe { series(scores, labels, n)? };
        *unsafe { self::out(out, "out")? } = balanced_optimal_accuracy(&s)?;
        Ok(())
    })
}

/// Best TPR with FPR at most `fpr_cap`, and the threshold realizing it.
///
/// # Safety
/// `scores` and `labels` must each point to `n` elements; `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn muli_tpr_at_fpr(
    scores: *const f64,
    labels: *const u8,
    n: usize,
    fpr_cap: f64,
    out: *mut MuliTprAtFpr,
) -> MuliStatus {
    guard(|| {
        let s = unsafe { series(scores, labels, n)? };
        let r = tpr_at_fpr(&s, fpr_cap)?;
        *unsafe { self::out(out, "out")? } = MuliTprAtFpr {
            tpr: r.tpr,
            threshold: r.threshold,
            achieved_fpr: r.achieved_fpr,
        };
        Ok(())
    })
}
