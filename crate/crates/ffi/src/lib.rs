//! C ABI over `sal-core`.
//!
//! Datasets and models are opaque heap handles created and destroyed by
//! this library. Every fallible function returns a [`SalStatus`]; on failure
//! the message is available from [`sal_last_error`] on the same thread until
//! the next failing call. Matrices are row-major `f64` buffers.

use std::cell::RefCell;
use std::ffi::{c_char, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use ndarray::{Array1, Array2, ArrayView1};
use sal_core::cost::{cost_w, project_weights, CovariateWeights};
use sal_core::model::{LinearModel, LossKind};
use sal_core::sal::{train_sal, SalHyperParams};
use sal_core::{EnvDataset, SalError};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SalStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    DimensionMismatch = 3,
    Diverged = 4,
    Io = 5,
    Panic = 6,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SalLoss {
    Absolute = 0,
    Squared = 1,
    LogLoss = 2,
}

impl From<SalLoss> for LossKind {
    fn from(l: SalLoss) -> Self {
        match l {
            SalLoss::Absolute => LossKind::Absolute,
            SalLoss::Squared => LossKind::Squared,
            SalLoss::LogLoss => LossKind::LogLoss,
        }
    }
}

/// Trainer hyperparameters; fill with [`sal_hyper_default`] first.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SalHyper {
    pub outer_iters: usize,
    pub theta_iters: usize,
    pub w_iters: usize,
    pub ascent_steps: usize,
    pub step_x: f64,
    pub step_theta: f64,
    pub step_w: f64,
    pub lambda: f64,
    pub alpha: f64,
    pub seed: u64,
}

impl From<&SalHyper> for SalHyperParams {
    fn from(h: &SalHyper) -> Self {
        SalHyperParams {
            outer_iters: h.outer_iters,
            theta_iters: h.theta_iters,
            w_iters: h.w_iters,
            ascent_steps: h.ascent_steps,
            step_x: h.step_x,
            step_theta: h.step_theta,
            step_w: h.step_w,
            lambda: h.lambda,
            alpha: h.alpha,
            seed: h.seed,
            ..SalHyperParams::default()
        }
    }
}

/// A list of environments sharing one covariate dimension.
pub struct SalDataset {
    dim: usize,
    envs: Vec<EnvDataset>,
}

/// A trained linear model and, for the robust trainer, its learned weights.
pub struct SalModel {
    model: LinearModel,
    weights: Option<CovariateWeights>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &SalError) -> SalStatus {
    match e {
        SalError::DimensionMismatch { .. } => SalStatus::DimensionMismatch,
        SalError::Diverged { .. } | SalError::AdversaryDiverged { .. } | SalError::NonFinite(_) => {
            SalStatus::Diverged
        }
        SalError::Io(_) | SalError::Csv(_) => SalStatus::Io,
        _ => SalStatus::InvalidArgument,
    }
}

struct Fail(SalStatus, String);

impl From<SalError> for Fail {
    fn from(e: SalError) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(SalStatus::NullPointer, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> SalStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SalStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            SalStatus::Panic
        }
    }
}

unsafe fn slice<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut<'a>(p: *mut f64, len: usize, what: &str) -> Result<&'a mut [f64], Fail> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

/// Message of the last failure on this thread, or null. Owned by the library.
#[no_mangle]
pub extern "C" fn sal_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// # Safety
/// `out` must point to writable memory for one `SalHyper`.
#[no_mangle]
pub unsafe extern "C" fn sal_hyper_default(out: *mut SalHyper) -> SalStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let h = SalHyperParams::default();
        *out = SalHyper {
            outer_iters: h.outer_iters,
            theta_iters: h.theta_iters,
            w_iters: h.w_iters,
            ascent_steps: h.ascent_steps,
            step_x: h.step_x,
            step_theta: h.step_theta,
            step_w: h.step_w,
            lambda: h.lambda,
            alpha: h.alpha,
            seed: h.seed,
        };
        Ok(())
    })
}

/// Creates an empty dataset of covariate dimension `dim`; null if `dim == 0`.
#[no_mangle]
pub extern "C" fn sal_dataset_new(dim: usize) -> *mut SalDataset {
    if dim == 0 {
        set_error("dimension must be >= 1".into());
        return ptr::null_mut();
    }
    Box::into_raw(Box::new(SalDataset { dim, envs: Vec::new() }))
}

/// Appends an environment of `n` rows: `x` is `n × dim`, `y` has `n` entries.
///
/// # Safety
/// `ds` must come from [`sal_dataset_new`]; `x` and `y` must be readable for
/// `n * dim` and `n` values.
#[no_mangle]
pub unsafe extern "C" fn sal_dataset_add_env(
    ds: *mut SalDataset,
    x: *const f64,
    y: *const f64,
    n: usize,
) -> SalStatus {
    guard(|| {
        let ds = ds.as_mut().ok_or_else(|| null("dataset"))?;
        if n == 0 {
            return Err(Fail(SalStatus::InvalidArgument, "environment has no rows".into()));
        }
        let xs = slice(x, n * ds.dim, "x")?;
        let ys = slice(y, n, "y")?;
        let xa = Array2::from_shape_vec((n, ds.dim), xs.to_vec())
            .map_err(|e| Fail(SalStatus::InvalidArgument, e.to_string()))?;
        let id = format!("e{}", ds.envs.len());
        ds.envs.push(EnvDataset::new(xa, Array1::from(ys.to_vec()), id)?);
        Ok(())
    })
}

#[no_mangle]
pub extern "C" fn sal_dataset_num_envs(ds: *const SalDataset) -> usize {
    // SAFETY: null is handled; other pointers must come from sal_dataset_new.
    unsafe { ds.as_ref() }.map_or(0, |d| d.envs.len())
}

/// # Safety
/// `ds` must be null or come from [`sal_dataset_new`] and not be used again.
#[no_mangle]
pub unsafe extern "C" fn sal_dataset_free(ds: *mut SalDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// Runs the robust trainer; on success `*out` receives a new model handle.
///
/// # Safety
/// `ds` must come from [`sal_dataset_new`], `hyper` must point to a valid
/// `SalHyper`, and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sal_train(
    ds: *const SalDataset,
    hyper: *const SalHyper,
    loss: SalLoss,
    out: *mut *mut SalModel,
) -> SalStatus {
    guard(|| {
        let ds = ds.as_ref().ok_or_else(|| null("dataset"))?;
        let hyper = hyper.as_ref().ok_or_else(|| null("hyper"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let m = train_sal(&ds.envs, &SalHyperParams::from(hyper), loss.into())?;
        *out = Box::into_raw(Box::new(SalModel {
            model: m.model,
            weights: Some(m.weights),
        }));
        Ok(())
    })
}

#[no_mangle]
pub extern "C" fn sal_model_dim(m: *const SalModel) -> usize {
    // SAFETY: null is handled; other pointers must come from sal_train.
    unsafe { m.as_ref() }.map_or(0, |m| m.model.dim())
}

/// Copies θ into `out`, which must hold `len == dim` values.
///
/// # Safety
/// `m` must come from [`sal_train`]; `out` must be writable for `len` values.
#[no_mangle]
pub unsafe extern "C" fn sal_model_theta(m: *const SalModel, out: *mut f64, len: usize) -> SalStatus {
    guard(|| {
        let m = m.as_ref().ok_or_else(|| null("model"))?;
        copy_out(m.model.theta.view(), out, len)
    })
}

/// Copies the learned cost weights into `out` (`len == dim`).
///
/// # Safety
/// As for [`sal_model_theta`].
#[no_mangle]
pub unsafe extern "C" fn sal_model_weights(m: *const SalModel, out: *mut f64, len: usize) -> SalStatus {
    guard(|| {
        let m = m.as_ref().ok_or_else(|| null("model"))?;
        let w = m
            .weights
            .as_ref()
            .ok_or_else(|| Fail(SalStatus::InvalidArgument, "model has no weights".into()))?;
        copy_out(w.view(), out, len)
    })
}

unsafe fn copy_out(v: ArrayView1<f64>, out: *mut f64, len: usize) -> Result<(), Fail> {
    if len != v.len() {
        return Err(SalError::DimensionMismatch {
            expected: v.len(),
            got: len,
        }
        .into());
    }
    let dst = slice_mut(out, len, "out")?;
    for (d, s) in dst.iter_mut().zip(v.iter()) {
        *d = *s;
    }
    Ok(())
}

/// Predictions for the `n × d` row-major matrix `x` into `out` (`n` values):
/// regression values or class-1 probabilities.
///
/// # Safety
/// `m` must come from [`sal_train`]; `x` readable for `n * d`, `out` writable for `n`.
#[no_mangle]
pub unsafe extern "C" fn sal_model_predict(
    m: *const SalModel,
    x: *const f64,
    n: usize,
    d: usize,
    out: *mut f64,
) -> SalStatus {
    guard(|| {
        let m = m.as_ref().ok_or_else(|| null("model"))?;
        if d != m.model.dim() {
            return Err(SalError::DimensionMismatch {
                expected: m.model.dim(),
                got: d,
            }
            .into());
        }
        let xs = slice(x, n * d, "x")?;
        let dst = slice_mut(out, n, "out")?;
        for (row, o) in xs.chunks_exact(d.max(1)).zip(dst.iter_mut()) {
            *o = m.model.predict(ArrayView1::from(row))?;
        }
        Ok(())
    })
}

/// # Safety
/// `m` must be null or come from [`sal_train`] and not be used again.
#[no_mangle]
pub unsafe extern "C" fn sal_model_free(m: *mut SalModel) {
    if !m.is_null() {
        drop(Box::from_raw(m));
    }
}

/// `Σ (w_i (x1_i − x2_i))²`; `w` must satisfy `w ≥ 1, min w = 1`.
///
/// # Safety
/// `x1`, `x2`, `w` readable for `d` values; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn sal_cost_w(
    x1: *const f64,
    x2: *const f64,
    w: *const f64,
    d: usize,
    out: *mut f64,
) -> SalStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let w = CovariateWeights::new(Array1::from(slice(w, d, "w")?.to_vec()))?;
        *out = cost_w(
            ArrayView1::from(slice(x1, d, "x1")?),
            ArrayView1::from(slice(x2, d, "x2")?),
            &w,
        )?;
        Ok(())
    })
}

/// Euclidean projection of `raw` onto `{w ≥ 1, min w = 1}`, written to `out`.
///
/// # Safety
/// `raw` readable and `out` writable for `d` values.
#[no_mangle]
pub unsafe extern "C" fn sal_project_weights(raw: *const f64, d: usize, out: *mut f64) -> SalStatus {
    guard(|| {
        let w = project_weights(ArrayView1::from(slice(raw, d, "raw")?))?;
        copy_out(w.view(), out, d)
    })
}
