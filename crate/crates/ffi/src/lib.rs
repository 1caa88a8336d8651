//! C ABI over `fbe-core`.
//!
//! Objects are opaque heap handles (`FbeBank`, `FbeBoundaries`, `FbeHead`)
//! created by `*_load`, `*_from_data` or an operation, and released with the
//! matching `*_free`. Every fallible call returns an [`FbeStatus`]; on
//! failure, [`fbe_last_error_message`] describes the error for the calling
//! thread. Panics never cross the boundary; they surface as
//! `FBE_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use fbe_core::bank::{self, BankFormat, FeatureBank, LinearHead};
use fbe_core::fbe::{self, DeviationBoundaries};
use fbe_core::metrics::{self, EvalSet};
use fbe_core::scores::{ScoreKind, ScoreSpec, Scorer};
use fbe_core::Error;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FbeStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    DimensionMismatch = 3,
    Io = 4,
    Format = 5,
    NonFinite = 6,
    Singular = 7,
    MissingLabels = 8,
    Panic = 9,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FbeScoreKind {
    Knn = 0,
    Mahalanobis = 1,
    Nnguide = 2,
    Energy = 3,
    Msp = 4,
    Maxlogit = 5,
}

/// Score configuration. `k` is read for KNN and NNGuide only. A
/// `react_percentile` of 0 (or less) disables ReAct clipping.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct FbeScoreSpec {
    pub kind: FbeScoreKind,
    pub k: usize,
    pub temperature: f64,
    pub react_percentile: f64,
}

/// Opaque feature bank.
pub struct FbeBank(FeatureBank);
/// Opaque per-dimension clamp boundaries.
pub struct FbeBoundaries(DeviationBoundaries);
/// Opaque linear classification head.
pub struct FbeHead(LinearHead);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).unwrap_or_default());
}

fn status_of(e: &Error) -> FbeStatus {
    match e {
        Error::Io { .. } => FbeStatus::Io,
        Error::Format { .. } | Error::Ragged { .. } => FbeStatus::Format,
        Error::NonFinite { .. } => FbeStatus::NonFinite,
        Error::LabelOutOfRange { .. } | Error::InvalidParameter(_) => FbeStatus::InvalidArgument,
        Error::DimensionMismatch { .. } => FbeStatus::DimensionMismatch,
        Error::MissingLabels(_) => FbeStatus::MissingLabels,
        Error::Singular(_) => FbeStatus::Singular,
    }
}

struct Fail(FbeStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(FbeStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: impl Into<String>) -> Fail {
    Fail(FbeStatus::InvalidArgument, msg.into())
}

/// Runs `f`, recording the error message and mapping panics.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> FbeStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            FbeStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            FbeStatus::Panic
        }
    }
}

unsafe fn as_ref<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut<'a, T>(p: *mut T, len: usize, what: &str) -> Result<&'a mut [T], Fail> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn to_path(p: *const c_char) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(null("path"));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| invalid("path is not valid UTF-8"))?;
    Ok(PathBuf::from(s))
}

unsafe fn put<T>(out: *mut *mut T, value: T) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null("output handle"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

fn check_len(what: &str, expected: usize, found: usize) -> Result<(), Fail> {
    if expected != found {
        return Err(Fail(
            FbeStatus::DimensionMismatch,
            format!("{what}: buffer holds {found} values, expected {expected}"),
        ));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Library information

/// Version string of the library (static storage).
#[no_mangle]
pub extern "C" fn fbe_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message for the last failed call on this thread ("" after a success).
/// Valid until the next call into the library on the same thread.
#[no_mangle]
pub extern "C" fn fbe_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

// ---------------------------------------------------------------------------
// Banks

/// Copies an `n x m` row-major matrix (and optional `n` labels) into a new
/// bank.
///
/// # Safety
/// `data` must point to `n * m` floats; `labels` must be null or point to
/// `n` integers; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fbe_bank_from_data(
    data: *const f32,
    n: usize,
    m: usize,
    labels: *const i32,
    out: *mut *mut FbeBank,
) -> FbeStatus {
    guard(|| {
        let len = n.checked_mul(m).ok_or_else(|| invalid("n * m overflows"))?;
        let values = slice(data, len, "data")?.to_vec();
        let labels = if labels.is_null() {
            None
        } else {
            Some(slice(labels, n, "labels")?.to_vec())
        };
        put(out, FbeBank(FeatureBank::new(n, m, values, labels)?))
    })
}

/// Loads a bank. Files ending in `.csv` or `.txt` are parsed as CSV, with a
/// trailing label column when `csv_labels` is non-zero; anything else is
/// read as the binary format.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fbe_bank_load(
    path: *const c_char,
    csv_labels: i32,
    out: *mut *mut FbeBank,
) -> FbeStatus {
    guard(|| {
        let p = to_path(path)?;
        let format = BankFormat::from_path(&p, csv_labels != 0);
        put(out, FbeBank(bank::load_bank(&p, format)?))
    })
}

/// Writes a bank in the binary format.
///
/// # Safety
/// `bank` must be a live handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn fbe_bank_save(bank: *const FbeBank, path: *const c_char) -> FbeStatus {
    guard(|| {
        let b = as_ref(bank, "bank")?;
        Ok(bank::save_bank(&b.0, to_path(path)?)?)
    })
}

/// Number of rows, or 0 for a null handle.
///
/// # Safety
/// `bank` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn fbe_bank_rows(bank: *const FbeBank) -> usize {
    bank.as_ref().map_or(0, |b| b.0.n())
}

/// Number of columns, or 0 for a null handle.
///
/// # Safety
/// `bank` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn fbe_bank_cols(bank: *const FbeBank) -> usize {
    bank.as_ref().map_or(0, |b| b.0.m())
}

/// Copies the row-major features into `out`, which must hold exactly
/// `rows * cols` floats.
///
/// # Safety
/// `bank` must be a live handle; `out` must point to `len` floats.
#[no_mangle]
pub unsafe extern "C" fn fbe_bank_copy_data(
    bank: *const FbeBank,
    out: *mut f32,
    len: usize,
) -> FbeStatus {
    guard(|| {
        let b = as_ref(bank, "bank")?;
        check_len("bank data", b.0.data().len(), len)?;
        slice_mut(out, len, "out")?.copy_from_slice(b.0.data());
        Ok(())
    })
}

/// # Safety
/// `bank` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn fbe_bank_free(bank: *mut FbeBank) {
    if !bank.is_null() {
        drop(Box::from_raw(bank));
    }
}

// ---------------------------------------------------------------------------
// Boundaries

/// Fits per-dimension boundaries at percentile `lambda` in [0, 100].
///
/// # Safety
/// `bank` must be a live handle; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fbe_fit_boundaries(
    bank: *const FbeBank,
    lambda: f64,
    out: *mut *mut FbeBoundaries,
) -> FbeStatus {
    guard(|| {
        let b = as_ref(bank, "bank")?;
        put(out, FbeBoundaries(fbe::fit_boundaries(&b.0, lambda)?))
    })
}

/// # Safety
/// `path` must be a NUL-terminated string; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fbe_boundaries_load(
    path: *const c_char,
    out: *mut *mut FbeBoundaries,
) -> FbeStatus {
    guard(|| put(out, FbeBoundaries(fbe::load_boundaries(to_path(path)?)?)))
}

/// # Safety
/// `b` must be a live handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn fbe_boundaries_save(
    b: *const FbeBoundaries,
    path: *const c_char,
) -> FbeStatus {
    guard(|| {
        let b = as_ref(b, "boundaries")?;
        Ok(fbe::save_boundaries(&b.0, to_path(path)?)?)
    })
}

/// Dimension count, or 0 for a null handle.
///
/// # Safety
/// `b` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn fbe_boundaries_dim(b: *const FbeBoundaries) -> usize {
    b.as_ref().map_or(0, |b| b.0.m())
}

/// Copies the centers and radii into two buffers of `len == dim` floats.
///
/// # Safety
/// `b` must be a live handle; `mu` and `d_star` must each point to `len`
/// floats.
#[no_mangle]
pub unsafe extern "C" fn fbe_boundaries_copy(
    b: *const FbeBoundaries,
    mu: *mut f32,
    d_star: *mut f32,
    len: usize,
) -> FbeStatus {
    guard(|| {
        let b = as_ref(b, "boundaries")?;
        check_len("boundaries", b.0.m(), len)?;
        slice_mut(mu, len, "mu")?.copy_from_slice(b.0.mu());
        slice_mut(d_star, len, "d_star")?.copy_from_slice(b.0.d_star());
        Ok(())
    })
}

/// # Safety
/// `b` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn fbe_boundaries_free(b: *mut FbeBoundaries) {
    if !b.is_null() {
        drop(Box::from_raw(b));
    }
}

/// Clamps `bank` onto `b` into a new bank. When `clamped` is non-null it
/// receives the number of entries that were moved.
///
/// # Safety
/// `bank` and `b` must be live handles; `out` a valid pointer; `clamped`
/// null or valid.
#[no_mangle]
pub unsafe extern "C" fn fbe_clamp_bank(
    bank: *const FbeBank,
    b: *const FbeBoundaries,
    out: *mut *mut FbeBank,
    clamped: *mut usize,
) -> FbeStatus {
    guard(|| {
        let bank = as_ref(bank, "bank")?;
        let b = as_ref(b, "boundaries")?;
        let outcome = fbe::clamp_bank_with_stats(&bank.0, &b.0)?;
        if !clamped.is_null() {
            *clamped = outcome.total_clamped();
        }
        put(out, FbeBank(outcome.bank))
    })
}

/// Fits boundaries at `lambda` and clamps the same bank onto them.
///
/// # Safety
/// `bank` must be a live handle; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fbe_enhance(
    bank: *const FbeBank,
    lambda: f64,
    out: *mut *mut FbeBank,
) -> FbeStatus {
    guard(|| {
        let bank = as_ref(bank, "bank")?;
        put(out, FbeBank(fbe::enhance(&bank.0, lambda)?.0))
    })
}

// ---------------------------------------------------------------------------
// Heads

/// Copies a `c x m` row-major weight matrix and `c` biases into a new head.
///
/// # Safety
/// `weights` must point to `c * m` floats and `bias` to `c` floats; `out`
/// must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fbe_head_from_data(
    weights: *const f32,
    bias: *const f32,
    c: usize,
    m: usize,
    out: *mut *mut FbeHead,
) -> FbeStatus {
    guard(|| {
        let len = c.checked_mul(m).ok_or_else(|| invalid("c * m overflows"))?;
        let w = slice(weights, len, "weights")?.to_vec();
        let b = slice(bias, c, "bias")?.to_vec();
        put(out, FbeHead(LinearHead::new(c, m, w, b)?))
    })
}

/// # Safety
/// `path` must be a NUL-terminated string; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fbe_head_load(path: *const c_char, out: *mut *mut FbeHead) -> FbeStatus {
    guard(|| put(out, FbeHead(bank::load_head(to_path(path)?)?)))
}

/// # Safety
/// `head` must be a live handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn fbe_head_save(head: *const FbeHead, path: *const c_char) -> FbeStatus {
    guard(|| {
        let h = as_ref(head, "head")?;
        Ok(bank::save_head(&h.0, to_path(path)?)?)
    })
}

/// # Safety
/// `head` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn fbe_head_free(head: *mut FbeHead) {
    if !head.is_null() {
        drop(Box::from_raw(head));
    }
}

// ---------------------------------------------------------------------------
// Scoring and metrics

fn spec_of(s: &FbeScoreSpec) -> ScoreSpec {
    let kind = match s.kind {
        FbeScoreKind::Knn => ScoreKind::Knn,
        FbeScoreKind::Mahalanobis => ScoreKind::Mahalanobis,
        FbeScoreKind::Nnguide => ScoreKind::Nnguide,
        FbeScoreKind::Energy => ScoreKind::Energy,
        FbeScoreKind::Msp => ScoreKind::Msp,
        FbeScoreKind::Maxlogit => ScoreKind::Maxlogit,
    };
    let mut spec = ScoreSpec::new(kind);
    if kind.needs_k() {
        spec.k = Some(s.k);
    }
    spec.temperature = s.temperature;
    if s.react_percentile > 0.0 {
        spec.react_percentile = Some(s.react_percentile);
    }
    spec
}

/// Scores every row of `queries` against `bank` (higher means more
/// in-distribution) into `out`, which must hold exactly `rows(queries)`
/// values. `head` may be null for KNN and Mahalanobis.
///
/// # Safety
/// Handles must be live (or null where allowed); `spec` must be valid;
/// `out` must point to `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn fbe_score(
    bank: *const FbeBank,
    head: *const FbeHead,
    spec: *const FbeScoreSpec,
    queries: *const FbeBank,
    out: *mut f64,
    len: usize,
) -> FbeStatus {
    guard(|| {
        let bank = as_ref(bank, "bank")?;
        let queries = as_ref(queries, "queries")?;
        let spec = spec_of(as_ref(spec, "spec")?);
        let head = head.as_ref().map(|h| &h.0);
        check_len("scores", queries.0.n(), len)?;
        let dst = slice_mut(out, len, "out")?;
        let scores = Scorer::fit(&spec, &bank.0, head)?.score(&queries.0)?;
        dst.copy_from_slice(&scores.scores);
        Ok(())
    })
}

unsafe fn eval_set(id: *const f64, p: usize, ood: *const f64, q: usize) -> Result<EvalSet, Fail> {
    let id = slice(id, p, "id scores")?.to_vec();
    let ood = slice(ood, q, "ood scores")?.to_vec();
    Ok(EvalSet::new(id, ood)?)
}

/// Area under the ROC curve, ID as the positive class.
///
/// # Safety
/// `id` must point to `p` doubles, `ood` to `q`; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn fbe_auroc(
    id: *const f64,
    p: usize,
    ood: *const f64,
    q: usize,
    out: *mut f64,
) -> FbeStatus {
    guard(|| {
        let set = eval_set(id, p, ood, q)?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = metrics::auroc(&set);
        Ok(())
    })
}

/// False positive rate at the given true positive rate in (0, 1].
///
/// # Safety
/// `id` must point to `p` doubles, `ood` to `q`; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn fbe_fpr_at_tpr(
    id: *const f64,
    p: usize,
    ood: *const f64,
    q: usize,
    tpr: f64,
    out: *mut f64,
) -> FbeStatus {
    guard(|| {
        let set = eval_set(id, p, ood, q)?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = metrics::fpr_at_tpr(&set, tpr)?;
        Ok(())
    })
}
