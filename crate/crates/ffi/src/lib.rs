//! C ABI over the evaluation protocol, cue validation and dataset generation.
//!
//! Every fallible call returns a [`PloStatus`]. On failure the message is
//! available from [`plo_last_error`] on the same thread until the next call.
//! Handles are opaque and must be released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::fs::File;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use plo_core::config::RunConfig;
use plo_core::eval::{sweep_and_score, EvalReport, ScoreMatrix};
use plo_core::prompts::cues::{validate_cues, CueVerdict};
use plo_core::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PloStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    Parse = 4,
    Io = 5,
    Config = 6,
    Protocol = 7,
    Validation = 8,
    Panic = 9,
}

/// Score matrix handle.
pub struct PloScoreMatrix(ScoreMatrix);

/// Evaluation report handle.
pub struct PloEvalReport(EvalReport);

#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PloMetrics {
    pub seen: f64,
    pub unseen: f64,
    pub harmonic_mean: f64,
    pub auc: f64,
}

/// One operating point; `bias` may be ±infinity at the curve ends.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PloCurvePoint {
    pub bias: f64,
    pub seen: f64,
    pub unseen: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("no interior nul");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> PloStatus {
    match e {
        Error::Shape { .. } | Error::Index { .. } => PloStatus::Shape,
        Error::Parse { .. } | Error::Csv(_) | Error::Json(_) => PloStatus::Parse,
        Error::Io(_) | Error::Missing { .. } | Error::Checkpoint(_) => PloStatus::Io,
        Error::Config(_) | Error::Param(_) => PloStatus::Config,
        Error::Protocol(_) => PloStatus::Protocol,
        Error::Validation(_) | Error::Degenerate(_) | Error::Contract(_) => PloStatus::Validation,
    }
}

struct Fail(PloStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(PloStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: impl Into<String>) -> Fail {
    Fail(PloStatus::InvalidArgument, msg.into())
}

/// Runs `f`, recording any error or panic.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> PloStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => PloStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            PloStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| invalid(format!("{what} is not valid UTF-8")))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| null(what))
}

/// Message of the last failed call on this thread, or null. The pointer stays
/// valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn plo_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn plo_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Frees a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn plo_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Builds a score matrix from row-major `scores` (`rows × cols`), a per-column
/// unseen flag (nonzero = unseen) and per-row true column indices. Column
/// names are `c0`, `c1`, ...
///
/// # Safety
/// Pointers must reference arrays of the stated lengths; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn plo_score_matrix_new(
    scores: *const f64,
    rows: usize,
    cols: usize,
    unseen: *const u8,
    labels: *const usize,
    out: *mut *mut PloScoreMatrix,
) -> PloStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let n = rows.checked_mul(cols).ok_or_else(|| invalid("rows × cols overflows"))?;
        let scores = slice_arg(scores, n, "scores")?.to_vec();
        let unseen = slice_arg(unseen, cols, "unseen")?.iter().map(|&u| u != 0).collect();
        let labels = slice_arg(labels, rows, "labels")?.to_vec();
        let names = (0..cols).map(|c| format!("c{c}")).collect();
        let m = ScoreMatrix::new(names, unseen, scores, labels)?;
        *out = Box::into_raw(Box::new(PloScoreMatrix(m)));
        Ok(())
    })
}

/// Reads a score matrix CSV as written by `plo train` (`scores.csv`).
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn plo_score_matrix_read_csv(path: *const c_char, out: *mut *mut PloScoreMatrix) -> PloStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let path = str_arg(path, "path")?;
        let file = File::open(path).map_err(Error::from)?;
        let m = ScoreMatrix::read_csv(file, path)?;
        *out = Box::into_raw(Box::new(PloScoreMatrix(m)));
        Ok(())
    })
}

/// # Safety
/// `m` must be null or a live handle from this library.
#[no_mangle]
pub unsafe extern "C" fn plo_score_matrix_free(m: *mut PloScoreMatrix) {
    if !m.is_null() {
        drop(Box::from_raw(m));
    }
}

/// # Safety
/// `m` must be a live handle; `rows` and `cols` must be writable.
#[no_mangle]
pub unsafe extern "C" fn plo_score_matrix_shape(m: *const PloScoreMatrix, rows: *mut usize, cols: *mut usize) -> PloStatus {
    guard(|| {
        let m = m.as_ref().ok_or_else(|| null("matrix"))?;
        *out_arg(rows, "rows")? = m.0.rows();
        *out_arg(cols, "cols")? = m.0.cols();
        Ok(())
    })
}

/// Sweeps the calibration bias and scores the matrix.
///
/// # Safety
/// `m` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn plo_evaluate(m: *const PloScoreMatrix, out: *mut *mut PloEvalReport) -> PloStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let m = m.as_ref().ok_or_else(|| null("matrix"))?;
        let r = sweep_and_score(&m.0)?;
        *out = Box::into_raw(Box::new(PloEvalReport(r)));
        Ok(())
    })
}

/// # Safety
/// `r` must be null or a live handle from this library.
#[no_mangle]
pub unsafe extern "C" fn plo_report_free(r: *mut PloEvalReport) {
    if !r.is_null() {
        drop(Box::from_raw(r));
    }
}

/// # Safety
/// `r` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn plo_report_metrics(r: *const PloEvalReport, out: *mut PloMetrics) -> PloStatus {
    guard(|| {
        let r = &r.as_ref().ok_or_else(|| null("report"))?.0;
        *out_arg(out, "out")? = PloMetrics {
            seen: r.best_seen,
            unseen: r.best_unseen,
            harmonic_mean: r.best_hm,
            auc: r.auc,
        };
        Ok(())
    })
}

/// Number of points on the seen/unseen curve; 0 for a null handle.
///
/// # Safety
/// `r` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn plo_report_curve_len(r: *const PloEvalReport) -> usize {
    r.as_ref().map_or(0, |r| r.0.curve.len())
}

/// # Safety
/// `r` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn plo_report_curve_point(r: *const PloEvalReport, index: usize, out: *mut PloCurvePoint) -> PloStatus {
    guard(|| {
        let r = &r.as_ref().ok_or_else(|| null("report"))?.0;
        let p = r.curve.get(index).ok_or(Error::Index {
            index,
            len: r.curve.len(),
        })?;
        *out_arg(out, "out")? = PloCurvePoint {
            bias: p.bias,
            seen: p.seen,
            unseen: p.unseen,
        };
        Ok(())
    })
}

/// The report as JSON. Free the string with [`plo_string_free`].
///
/// # Safety
/// `r` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn plo_report_to_json(r: *const PloEvalReport, out: *mut *mut c_char) -> PloStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let r = &r.as_ref().ok_or_else(|| null("report"))?.0;
        let json = r.to_json()?;
        *out = CString::new(json).map_err(|_| invalid("report contains NUL"))?.into_raw();
        Ok(())
    })
}

/// Checks one cue sequence for `state object` against the fixture rules.
/// `accepted` receives 1 or 0; when rejected and `reason` is non-null it
/// receives an owned string (free with [`plo_string_free`]), otherwise null.
///
/// # Safety
/// `cues` must point to `count` NUL-terminated strings; other string
/// arguments must be NUL-terminated; out pointers must be writable or null
/// where allowed.
#[no_mangle]
pub unsafe extern "C" fn plo_validate_cues(
    cues: *const *const c_char,
    count: usize,
    state: *const c_char,
    object: *const c_char,
    n: usize,
    accepted: *mut u8,
    reason: *mut *mut c_char,
) -> PloStatus {
    guard(|| {
        let accepted = out_arg(accepted, "accepted")?;
        let lines = slice_arg(cues, count, "cues")?
            .iter()
            .enumerate()
            .map(|(i, &p)| str_arg(p, &format!("cue {i}")))
            .collect::<Result<Vec<_>, _>>()?;
        let state = str_arg(state, "state")?;
        let object = str_arg(object, "object")?;
        let verdict = validate_cues(&lines, state, object, n);
        *accepted = u8::from(verdict == CueVerdict::Accepted);
        if let Some(reason) = reason.as_mut() {
            *reason = match verdict {
                CueVerdict::Accepted => ptr::null_mut(),
                CueVerdict::Rejected(r) => CString::new(r.to_string()).expect("no NUL").into_raw(),
            };
        }
        Ok(())
    })
}

/// Renders the synthetic dataset into the new directory `out_dir`. With a
/// null `config_path` the default configuration is used.
///
/// # Safety
/// String arguments must be NUL-terminated (`config_path` may be null).
#[no_mangle]
pub unsafe extern "C" fn plo_generate_dataset(config_path: *const c_char, out_dir: *const c_char) -> PloStatus {
    guard(|| {
        let cfg = if config_path.is_null() {
            RunConfig::default()
        } else {
            RunConfig::load(&PathBuf::from(str_arg(config_path, "config_path")?))?.0
        };
        let out = PathBuf::from(str_arg(out_dir, "out_dir")?);
        plo_core::commands::gen_data(&cfg, &out)?;
        Ok(())
    })
}
