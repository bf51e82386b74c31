//! C ABI over `fbsindy`.
//!
//! Datasets, models and controllers are opaque handles released with the
//! matching `*_free` function. Every fallible call returns an [`FbsStatus`];
//! on failure the message is kept per thread and read with
//! [`fbs_last_error`]. Panics are caught at the boundary and reported as
//! [`FbsStatus::Panic`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use fbsindy::control::{synthesize, ControlError};
use fbsindy::dynamics::{integrate, simulate_closed_loop, vdp_system};
use fbsindy::lie::relative_degree;
use fbsindy::regression::{identify, ModelFile};
use fbsindy::{
    ControllerSpec, DataError, Dataset, DynamicsError, Error, Excitation, GainSource, InputSignal, LibrarySpec,
    ReferenceSignal, RegressionConfig, RegressionError, SparseModel,
};
use num_complex::Complex64;
use serde::Deserialize;

/// Tolerance used when deciding whether a Lie derivative vanishes.
const LIE_TOL: f64 = 1e-8;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FbsStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Parse = 4,
    /// Identification could not satisfy the sparsity or constraint requirements.
    Infeasible = 5,
    /// The output has no well-defined relative degree, or it is below the state dimension.
    NoRelativeDegree = 6,
    /// Integration diverged or the control law hit a singularity.
    Diverged = 7,
    Panic = 8,
}

pub struct FbsDataset(Dataset);

pub struct FbsModel(SparseModel);

pub struct FbsController(ControllerSpec);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure(FbsStatus, String);

impl Failure {
    fn new(status: FbsStatus, msg: impl Into<String>) -> Self {
        Failure(status, msg.into())
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Data(DataError::Io(_)) => FbsStatus::Io,
            Error::Data(DataError::Csv(_)) => FbsStatus::Parse,
            Error::Regression(r) => match r {
                RegressionError::Infeasible { .. }
                | RegressionError::ConstraintViolation { .. }
                | RegressionError::NonConvergence { .. } => FbsStatus::Infeasible,
                RegressionError::Io(_) => FbsStatus::Io,
                RegressionError::Json(_) | RegressionError::Malformed(_) => FbsStatus::Parse,
                RegressionError::Lie(_) => FbsStatus::NoRelativeDegree,
                _ => FbsStatus::InvalidArgument,
            },
            Error::Lie(_) | Error::Control(ControlError::Lie(_) | ControlError::BetaZero) => {
                FbsStatus::NoRelativeDegree
            }
            Error::Control(ControlError::Singular { .. } | ControlError::NonFinite) => FbsStatus::Diverged,
            Error::Dynamics(DynamicsError::Divergence { .. } | DynamicsError::Input { .. }) => FbsStatus::Diverged,
            _ => FbsStatus::InvalidArgument,
        };
        Failure(status, e.to_string())
    }
}

macro_rules! lib_err {
    ($($t:ty),*) => {$(
        impl From<$t> for Failure {
            fn from(e: $t) -> Self {
                Error::from(e).into()
            }
        }
    )*};
}

lib_err!(DataError, DynamicsError, RegressionError, ControlError, fbsindy::LieError);

fn set_last_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> FbsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            FbsStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_last_error(&msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_last_error(&format!("panic: {msg}"));
            FbsStatus::Panic
        }
    }
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| Failure::new(FbsStatus::NullPointer, format!("{what} is null")))
}

unsafe fn out_ptr<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| Failure::new(FbsStatus::NullPointer, format!("{what} is null")))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure::new(FbsStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(p).to_str().map_err(|_| Failure::new(FbsStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn slice_arg<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Failure::new(FbsStatus::NullPointer, format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

fn into_c_string(s: String) -> Result<*mut c_char, Failure> {
    CString::new(s)
        .map(CString::into_raw)
        .map_err(|_| Failure::new(FbsStatus::InvalidArgument, "string contains a NUL byte"))
}

/// Message of the last failed call on this thread, or NULL after a
/// successful call. The pointer stays valid until the next call on the same
/// thread.
#[no_mangle]
pub extern "C" fn fbs_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// # Safety
/// `s` must be NULL or a string returned by this library and not yet freed.
#[no_mangle]
pub unsafe extern "C" fn fbs_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Reads a dataset CSV with columns `t,x1..xn,u,y` and optional `xdot1..xdotn`.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fbs_dataset_load_csv(path: *const c_char, out: *mut *mut FbsDataset) -> FbsStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let d = Dataset::load_csv(str_arg(path, "path")?)?;
        *out = Box::into_raw(Box::new(FbsDataset(d)));
        Ok(())
    })
}

/// Simulates the forced Van der Pol oscillator under the default multisine
/// excitation; `x0` holds two entries and the result has `steps + 1` rows.
///
/// # Safety
/// `x0` must point to two doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fbs_dataset_simulate_vdp(
    theta: f64,
    sigma: f64,
    mu: f64,
    x0: *const f64,
    dt: f64,
    steps: usize,
    out: *mut *mut FbsDataset,
) -> FbsStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let x0 = slice_arg(x0, 2, "x0")?;
        let d = integrate(&vdp_system(theta, sigma, mu), x0, &InputSignal::Open(Excitation::default()), dt, steps)?;
        *out = Box::into_raw(Box::new(FbsDataset(d)));
        Ok(())
    })
}

/// Number of samples, or 0 for NULL.
///
/// # Safety
/// `ds` must be NULL or a live dataset handle.
#[no_mangle]
pub unsafe extern "C" fn fbs_dataset_len(ds: *const FbsDataset) -> usize {
    ds.as_ref().map_or(0, |d| d.0.len())
}

/// Number of states, or 0 for NULL.
///
/// # Safety
/// `ds` must be NULL or a live dataset handle.
#[no_mangle]
pub unsafe extern "C" fn fbs_dataset_n_states(ds: *const FbsDataset) -> usize {
    ds.as_ref().map_or(0, |d| d.0.n_states())
}

/// Copies the output column into `buf`, which must hold exactly
/// `fbs_dataset_len` entries.
///
/// # Safety
/// `ds` must be a live dataset handle; `buf` must point to `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn fbs_dataset_output(ds: *const FbsDataset, buf: *mut f64, len: usize) -> FbsStatus {
    guard(|| {
        let d = &handle(ds, "dataset")?.0;
        if len != d.len() {
            return Err(Failure::new(
                FbsStatus::InvalidArgument,
                format!("buffer holds {len}, dataset has {}", d.len()),
            ));
        }
        let buf = out_ptr(buf, "buf")?;
        std::slice::from_raw_parts_mut(buf, len).copy_from_slice(d.output());
        Ok(())
    })
}

/// # Safety
/// `ds` must be NULL or a handle from this library that is not yet freed.
#[no_mangle]
pub unsafe extern "C" fn fbs_dataset_free(ds: *mut FbsDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

#[derive(Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct IdentifyOptions {
    library: LibrarySpec,
    regression: RegressionConfig,
}

/// Identifies a sparse model. `options_json` may be NULL or a JSON object
/// with optional `library` and `regression` keys; missing keys use defaults.
/// Derivatives are estimated by finite differences when the dataset has none.
///
/// # Safety
/// `ds` must be a live dataset handle; `options_json` NULL or NUL-terminated;
/// `out` writable.
#[no_mangle]
pub unsafe extern "C" fn fbs_identify(
    ds: *const FbsDataset,
    options_json: *const c_char,
    out: *mut *mut FbsModel,
) -> FbsStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let d = &handle(ds, "dataset")?.0;
        let opts: IdentifyOptions = if options_json.is_null() {
            IdentifyOptions::default()
        } else {
            serde_json::from_str(str_arg(options_json, "options_json")?)
                .map_err(|e| Failure::new(FbsStatus::Parse, format!("options: {e}")))?
        };
        let model = identify(d, &opts.library, &opts.regression)?;
        *out = Box::into_raw(Box::new(FbsModel(model)));
        Ok(())
    })
}

/// # Safety
/// `json` must be NUL-terminated; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn fbs_model_from_json(json: *const c_char, out: *mut *mut FbsModel) -> FbsStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let file: ModelFile = serde_json::from_str(str_arg(json, "json")?)
            .map_err(|e| Failure::new(FbsStatus::Parse, format!("model: {e}")))?;
        let model = SparseModel::from_file(&file)?;
        *out = Box::into_raw(Box::new(FbsModel(model)));
        Ok(())
    })
}

/// Serializes a model; free the result with [`fbs_string_free`].
///
/// # Safety
/// `model` must be a live model handle; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn fbs_model_to_json(model: *const FbsModel, out: *mut *mut c_char) -> FbsStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let m = &handle(model, "model")?.0;
        let s =
            serde_json::to_string_pretty(&m.to_file()).map_err(|e| Failure::new(FbsStatus::Parse, e.to_string()))?;
        *out = into_c_string(s)?;
        Ok(())
    })
}

/// Relative degree of the identified output; [`FbsStatus::NoRelativeDegree`]
/// when it is undefined up to the state dimension.
///
/// # Safety
/// `model` must be a live model handle; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn fbs_model_relative_degree(model: *const FbsModel, tol: f64, out: *mut usize) -> FbsStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let m = &handle(model, "model")?.0;
        let sys = m.system()?;
        let chain = relative_degree(&sys, tol, sys.n_states())?;
        *out = chain.require_degree()?;
        Ok(())
    })
}

/// # Safety
/// `model` must be NULL or a handle from this library that is not yet freed.
#[no_mangle]
pub unsafe extern "C" fn fbs_model_free(model: *mut FbsModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

fn synthesize_from(model: &SparseModel, source: GainSource) -> Result<ControllerSpec, Failure> {
    let sys = model.system()?;
    let chain = relative_degree(&sys, LIE_TOL, sys.n_states())?;
    Ok(synthesize(&chain, &source)?)
}

/// Feedback-linearizing controller with error-dynamics coefficients
/// `gains[0..n]` (`a_0, ..., a_{r-1}`).
///
/// # Safety
/// `model` must be a live model handle; `gains` must point to `n` doubles;
/// `out` writable.
#[no_mangle]
pub unsafe extern "C" fn fbs_synthesize_gains(
    model: *const FbsModel,
    gains: *const f64,
    n: usize,
    out: *mut *mut FbsController,
) -> FbsStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let m = &handle(model, "model")?.0;
        let spec = synthesize_from(m, GainSource::Gains(slice_arg(gains, n, "gains")?.to_vec()))?;
        *out = Box::into_raw(Box::new(FbsController(spec)));
        Ok(())
    })
}

/// Controller whose error dynamics have the poles `re[k] + i im[k]`.
/// Complex poles must come in conjugate pairs.
///
/// # Safety
/// `model` must be a live model handle; `re` and `im` must point to `n`
/// doubles; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn fbs_synthesize_poles(
    model: *const FbsModel,
    re: *const f64,
    im: *const f64,
    n: usize,
    out: *mut *mut FbsController,
) -> FbsStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let m = &handle(model, "model")?.0;
        let re = slice_arg(re, n, "re")?;
        let im = slice_arg(im, n, "im")?;
        let poles = re.iter().zip(im).map(|(&a, &b)| Complex64::new(a, b)).collect();
        let spec = synthesize_from(m, GainSource::Poles(poles))?;
        *out = Box::into_raw(Box::new(FbsController(spec)));
        Ok(())
    })
}

/// Relative degree the controller was built for, or 0 for NULL.
///
/// # Safety
/// `ctrl` must be NULL or a live controller handle.
#[no_mangle]
pub unsafe extern "C" fn fbs_controller_relative_degree(ctrl: *const FbsController) -> usize {
    ctrl.as_ref().map_or(0, |c| c.0.relative_degree)
}

/// Copies the gains into `buf`, which must hold exactly the relative degree
/// number of entries.
///
/// # Safety
/// `ctrl` must be a live controller handle; `buf` must point to `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn fbs_controller_gains(ctrl: *const FbsController, buf: *mut f64, len: usize) -> FbsStatus {
    guard(|| {
        let c = &handle(ctrl, "controller")?.0;
        if len != c.gains.len() {
            return Err(Failure::new(
                FbsStatus::InvalidArgument,
                format!("buffer holds {len}, controller has {}", c.gains.len()),
            ));
        }
        let buf = out_ptr(buf, "buf")?;
        std::slice::from_raw_parts_mut(buf, len).copy_from_slice(&c.gains);
        Ok(())
    })
}

/// Evaluates `u(x, r, r', ..., r^(r))`. `x` holds the state and `refs` the
/// reference and its first `r` derivatives.
///
/// # Safety
/// `ctrl` must be a live controller handle; `x` must point to `n_x` doubles,
/// `refs` to `n_refs` doubles; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn fbs_controller_evaluate(
    ctrl: *const FbsController,
    x: *const f64,
    n_x: usize,
    refs: *const f64,
    n_refs: usize,
    out: *mut f64,
) -> FbsStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let c = &handle(ctrl, "controller")?.0;
        if n_x != c.n_states() || n_refs != c.relative_degree + 1 {
            return Err(Failure::new(
                FbsStatus::InvalidArgument,
                format!("expected {} states and {} reference values", c.n_states(), c.relative_degree + 1),
            ));
        }
        *out = c.law.evaluate(slice_arg(x, n_x, "x")?, slice_arg(refs, n_refs, "refs")?)?;
        Ok(())
    })
}

/// Human-readable control law; free with [`fbs_string_free`].
///
/// # Safety
/// `ctrl` must be a live controller handle; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn fbs_controller_law(ctrl: *const FbsController, out: *mut *mut c_char) -> FbsStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let c = &handle(ctrl, "controller")?.0;
        *out = into_c_string(c.law.to_string())?;
        Ok(())
    })
}

/// Regulates the Van der Pol oscillator to zero from `x0` (two entries).
///
/// # Safety
/// `ctrl` must be a live controller handle; `x0` must point to two doubles;
/// `out` writable.
#[no_mangle]
pub unsafe extern "C" fn fbs_controller_stabilize_vdp(
    ctrl: *const FbsController,
    theta: f64,
    sigma: f64,
    mu: f64,
    x0: *const f64,
    dt: f64,
    steps: usize,
    out: *mut *mut FbsDataset,
) -> FbsStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let c = &handle(ctrl, "controller")?.0;
        let x0 = slice_arg(x0, 2, "x0")?;
        let d = simulate_closed_loop(&vdp_system(theta, sigma, mu), c, &ReferenceSignal::Zero, x0, dt, steps)?;
        *out = Box::into_raw(Box::new(FbsDataset(d)));
        Ok(())
    })
}

/// # Safety
/// `ctrl` must be NULL or a handle from this library that is not yet freed.
#[no_mangle]
pub unsafe extern "C" fn fbs_controller_free(ctrl: *mut FbsController) {
    if !ctrl.is_null() {
        drop(Box::from_raw(ctrl));
    }
}
