//! C ABI over `plab-core`.
//!
//! Objects cross the boundary as opaque handles (`PlabMatrix`, `PlabModel`)
//! created by `*_new` functions and released with the matching `*_free`.
//! Every fallible call returns a `PlabStatus`; on failure the message is
//! available from `plab_last_error` until the next failing call on the same
//! thread. Panics are caught and reported as `PLAB_ERR_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::slice;

use plab_core::analysis::pearson;
use plab_core::collapse::{accumulate_stats, nc1, CollapseReport, FeatureBatch};
use plab_core::data::LabeledDataset;
use plab_core::experiments::{train_epoch, EpochKey, TrainSettings};
use plab_core::interventions::{shrink_and_perturb, ShrinkPerturbParams};
use plab_core::linalg::{pseudoinverse, Matrix};
use plab_core::{Error, MlpModel, SgdConfig};

/// Status codes returned by every fallible function.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PlabStatus {
    Ok = 0,
    NullPointer = 1,
    Shape = 2,
    InvalidArgument = 3,
    /// Degenerate input: too few classes, vanished between-class scatter,
    /// zero-variance series, zero norms.
    Degenerate = 4,
    NoConvergence = 5,
    Io = 6,
    Other = 98,
    Panic = 99,
}

/// Row-major dense matrix of doubles.
pub struct PlabMatrix(Matrix);

/// Multi-layer perceptron with ReLU hidden layers.
pub struct PlabModel(MlpModel);

/// The four collapse metrics (NC2 as two numbers).
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PlabCollapseReport {
    pub nc1: f64,
    pub nc2_norm_cv: f64,
    pub nc2_angle_dev: f64,
    pub nc3: f64,
    pub nc4_mismatch: f64,
}

impl From<CollapseReport> for PlabCollapseReport {
    fn from(r: CollapseReport) -> Self {
        PlabCollapseReport {
            nc1: r.nc1,
            nc2_norm_cv: r.nc2_norm_cv,
            nc2_angle_dev: r.nc2_angle_dev,
            nc3: r.nc3,
            nc4_mismatch: r.nc4_mismatch,
        }
    }
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_last_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> PlabStatus {
    match e {
        Error::Shape { .. } | Error::NotSquare { .. } | Error::CountMismatch { .. } => {
            PlabStatus::Shape
        }
        Error::TooFewClasses { .. }
        | Error::VanishedBetweenClass { .. }
        | Error::DegenerateNorm { .. }
        | Error::DegenerateSeries(_)
        | Error::EmptyDataset => PlabStatus::Degenerate,
        Error::NoConvergence { .. } => PlabStatus::NoConvergence,
        Error::Io { .. } | Error::BadMagic { .. } | Error::Truncated { .. } => PlabStatus::Io,
        Error::InvalidArgument(_)
        | Error::LabelOutOfRange { .. }
        | Error::NotSymmetric { .. }
        | Error::Config { .. }
        | Error::Csv { .. } => PlabStatus::InvalidArgument,
        _ => PlabStatus::Other,
    }
}

enum Fail {
    Null(&'static str),
    Core(Error),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Core(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> PlabStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => PlabStatus::Ok,
        Ok(Err(Fail::Null(what))) => {
            set_last_error(format!("null pointer: {what}"));
            PlabStatus::NullPointer
        }
        Ok(Err(Fail::Core(e))) => {
            set_last_error(e.to_string());
            status_of(&e)
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_last_error(format!("panic: {msg}"));
            PlabStatus::Panic
        }
    }
}

unsafe fn deref<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or(Fail::Null(what))
}

unsafe fn deref_mut<'a, T>(p: *mut T, what: &'static str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or(Fail::Null(what))
}

unsafe fn slice_of<'a, T>(p: *const T, len: usize, what: &'static str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    Ok(slice::from_raw_parts(p, len))
}

unsafe fn put<T>(out: *mut *mut T, value: T) -> Result<(), Fail> {
    if out.is_null() {
        return Err(Fail::Null("out"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

unsafe fn labels_of(p: *const u32, n: usize) -> Result<Vec<usize>, Fail> {
    Ok(slice_of(p, n, "labels")?.iter().map(|&y| y as usize).collect())
}

/// Message of the most recent failure on this thread, or "" if none. The
/// pointer stays valid until the next failing call on this thread.
#[no_mangle]
pub extern "C" fn plab_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn plab_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copies `rows * cols` row-major values into a new matrix.
///
/// # Safety
/// `data` must point to `rows * cols` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn plab_matrix_new(
    rows: usize,
    cols: usize,
    data: *const f64,
    out: *mut *mut PlabMatrix,
) -> PlabStatus {
    guard(|| {
        let n = rows
            .checked_mul(cols)
            .ok_or_else(|| Error::InvalidArgument("matrix size overflows".into()))?;
        let m = Matrix::new(rows, cols, slice_of(data, n, "data")?.to_vec())?;
        put(out, PlabMatrix(m))
    })
}

/// # Safety
/// `m` must come from this library and not have been freed; null is ignored.
#[no_mangle]
pub unsafe extern "C" fn plab_matrix_free(m: *mut PlabMatrix) {
    if !m.is_null() {
        drop(Box::from_raw(m));
    }
}

/// # Safety
/// `m` must be a live matrix handle or null (returns 0).
#[no_mangle]
pub unsafe extern "C" fn plab_matrix_rows(m: *const PlabMatrix) -> usize {
    m.as_ref().map_or(0, |m| m.0.rows())
}

/// # Safety
/// `m` must be a live matrix handle or null (returns 0).
#[no_mangle]
pub unsafe extern "C" fn plab_matrix_cols(m: *const PlabMatrix) -> usize {
    m.as_ref().map_or(0, |m| m.0.cols())
}

/// Copies the matrix into `buf`, which must hold `len >= rows * cols` values.
///
/// # Safety
/// `m` must be live; `buf` must point to `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn plab_matrix_copy_to(
    m: *const PlabMatrix,
    buf: *mut f64,
    len: usize,
) -> PlabStatus {
    guard(|| {
        let m = &deref(m, "matrix")?.0;
        let data = m.data();
        if len < data.len() {
            return Err(Error::InvalidArgument(format!(
                "buffer holds {len} values, matrix has {}",
                data.len()
            ))
            .into());
        }
        if data.is_empty() {
            return Ok(());
        }
        if buf.is_null() {
            return Err(Fail::Null("buf"));
        }
        ptr::copy_nonoverlapping(data.as_ptr(), buf, data.len());
        Ok(())
    })
}

/// Moore–Penrose pseudoinverse of a symmetric matrix; eigenvalues at or
/// below `rank_tol * lambda_max` are treated as zero.
///
/// # Safety
/// `m` must be live; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn plab_pseudoinverse(
    m: *const PlabMatrix,
    rank_tol: f64,
    out: *mut *mut PlabMatrix,
) -> PlabStatus {
    guard(|| {
        let p = pseudoinverse(&deref(m, "matrix")?.0, rank_tol)?;
        put(out, PlabMatrix(p))
    })
}

/// He-initialised MLP `input_dim -> hidden[0] -> ... -> num_classes`.
///
/// # Safety
/// `hidden` must point to `n_hidden` values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn plab_model_new(
    input_dim: usize,
    hidden: *const usize,
    n_hidden: usize,
    num_classes: usize,
    seed: u64,
    out: *mut *mut PlabModel,
) -> PlabStatus {
    guard(|| {
        let hidden = slice_of(hidden, n_hidden, "hidden")?;
        if input_dim == 0 || num_classes == 0 || hidden.contains(&0) {
            return Err(Error::InvalidArgument("layer widths must be >= 1".into()).into());
        }
        put(out, PlabModel(MlpModel::new(input_dim, hidden, num_classes, seed)))
    })
}

/// # Safety
/// `m` must come from this library and not have been freed; null is ignored.
#[no_mangle]
pub unsafe extern "C" fn plab_model_free(m: *mut PlabModel) {
    if !m.is_null() {
        drop(Box::from_raw(m));
    }
}

/// SHA-256 of the parameters, hex, written NUL-terminated into `buf`
/// (65 bytes needed).
///
/// # Safety
/// `model` must be live; `buf` must point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn plab_model_param_hash(
    model: *const PlabModel,
    buf: *mut c_char,
    len: usize,
) -> PlabStatus {
    guard(|| {
        let h = deref(model, "model")?.0.param_hash();
        if len < h.len() + 1 {
            return Err(Error::InvalidArgument(format!("hash needs {} bytes", h.len() + 1)).into());
        }
        if buf.is_null() {
            return Err(Fail::Null("buf"));
        }
        ptr::copy_nonoverlapping(h.as_ptr().cast(), buf, h.len());
        *buf.add(h.len()) = 0;
        Ok(())
    })
}

/// Logits (`n x num_classes`) and penultimate features (`n x feature_dim`)
/// for a batch of inputs. Either output may be null to skip it.
///
/// # Safety
/// `model` and `inputs` must be live; non-null outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn plab_model_forward(
    model: *const PlabModel,
    inputs: *const PlabMatrix,
    logits_out: *mut *mut PlabMatrix,
    features_out: *mut *mut PlabMatrix,
) -> PlabStatus {
    guard(|| {
        let (logits, features) = deref(model, "model")?.0.infer(&deref(inputs, "inputs")?.0)?;
        if !logits_out.is_null() {
            put(logits_out, PlabMatrix(logits))?;
        }
        if !features_out.is_null() {
            put(features_out, PlabMatrix(features))?;
        }
        Ok(())
    })
}

/// Copy of the last-layer weight (`num_classes x feature_dim`).
///
/// # Safety
/// `model` must be live; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn plab_model_classifier_weight(
    model: *const PlabModel,
    out: *mut *mut PlabMatrix,
) -> PlabStatus {
    guard(|| {
        let w = deref(model, "model")?.0.classifier_weight().clone();
        put(out, PlabMatrix(w))
    })
}

/// One epoch of minibatch SGD with cross-entropy on `inputs` / `labels`.
/// The shuffle order is determined by `seed` and `epoch`.
///
/// # Safety
/// `model` and `inputs` must be live; `labels` must hold `inputs` rows values.
#[no_mangle]
pub unsafe extern "C" fn plab_model_train_epoch(
    model: *mut PlabModel,
    inputs: *const PlabMatrix,
    labels: *const u32,
    learning_rate: f64,
    momentum: f64,
    batch_size: usize,
    seed: u64,
    epoch: usize,
    mean_loss_out: *mut f64,
) -> PlabStatus {
    guard(|| {
        let model = &mut deref_mut(model, "model")?.0;
        let x = &deref(inputs, "inputs")?.0;
        let y = labels_of(labels, x.rows())?;
        let ds = LabeledDataset::new(x.clone(), y, "ffi")?;
        let sgd = SgdConfig {
            learning_rate,
            momentum,
        };
        sgd.validate()?;
        if batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be >= 1".into()).into());
        }
        let settings = TrainSettings {
            sgd,
            batch_size,
            seed,
            reg: None,
        };
        let s = train_epoch(model, &ds, &settings, EpochKey::new(0, epoch))?;
        if let Some(out) = mean_loss_out.as_mut() {
            *out = s.mean_loss;
        }
        Ok(())
    })
}

/// New model with every parameter replaced by `lambda * p + b * eps`,
/// `eps ~ N(0, 2 / fan_in)`.
///
/// # Safety
/// `model` must be live; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn plab_shrink_perturb(
    model: *const PlabModel,
    lambda: f64,
    b: f64,
    seed: u64,
    out: *mut *mut PlabModel,
) -> PlabStatus {
    guard(|| {
        let m = shrink_and_perturb(&deref(model, "model")?.0, &ShrinkPerturbParams { lambda, b, seed })?;
        put(out, PlabModel(m))
    })
}

/// NC1 of `features` (`n x d`) with `labels` in `[0, num_classes)`.
///
/// # Safety
/// `features` must be live; `labels` must hold `n` values; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn plab_nc1(
    features: *const PlabMatrix,
    labels: *const u32,
    num_classes: usize,
    out: *mut f64,
) -> PlabStatus {
    guard(|| {
        let f = &deref(features, "features")?.0;
        let batch = FeatureBatch::new(f.clone(), labels_of(labels, f.rows())?, num_classes)?;
        let v = nc1(&accumulate_stats(&batch)?)?;
        *deref_mut(out, "out")? = v;
        Ok(())
    })
}

/// All collapse metrics for `features` (`n x d`), classifier weight `w`
/// (`num_classes x d`) and `logits` (`n x num_classes`).
///
/// # Safety
/// Handles must be live; `labels` must hold `n` values; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn plab_collapse_report(
    features: *const PlabMatrix,
    labels: *const u32,
    num_classes: usize,
    w: *const PlabMatrix,
    logits: *const PlabMatrix,
    out: *mut PlabCollapseReport,
) -> PlabStatus {
    guard(|| {
        let f = &deref(features, "features")?.0;
        let batch = FeatureBatch::new(f.clone(), labels_of(labels, f.rows())?, num_classes)?;
        let r = CollapseReport::compute(&batch, &deref(w, "w")?.0, &deref(logits, "logits")?.0)?;
        *deref_mut(out, "out")? = r.into();
        Ok(())
    })
}

/// Pearson product-moment correlation of two length-`n` series.
///
/// # Safety
/// `x` and `y` must point to `n` values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn plab_pearson(
    x: *const f64,
    y: *const f64,
    n: usize,
    out: *mut f64,
) -> PlabStatus {
    guard(|| {
        let r = pearson(slice_of(x, n, "x")?, slice_of(y, n, "y")?)?;
        *deref_mut(out, "out")? = r.r;
        Ok(())
    })
}
