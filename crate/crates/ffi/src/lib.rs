//! C interface to `koopsos`.
//!
//! Objects cross the boundary as opaque handles (`KsController`,
//! `KsSurrogate`) that the caller frees with the matching `*_free` function.
//! Every fallible call returns a [`KsStatus`]; on failure a description is
//! available from [`ks_last_error`] on the same thread until the next failing
//! call. Strings returned by the library are released with [`ks_string_free`].
//!
//! Panics never unwind into C: they are caught and reported as
//! [`KsStatus::Panic`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use koopsos::design::{
    build_design, synthesize, DenominatorSpec, DesignMode, Objective, RationalController,
    SynthesisOutcome,
};
use koopsos::koopman::{Dictionary, ResidualBound, Surrogate};
use koopsos::sdp::DEFAULT_TOL;
use koopsos::Error;
use nalgebra::DMatrix;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KsStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    /// Malformed JSON or an unparsable field.
    Parse = 3,
    /// Array length disagrees with the object's dimensions.
    Dimension = 4,
    /// Argument out of range (negative bound constant, α = 0, ...).
    InvalidArgument = 5,
    /// The solver certified that no controller exists.
    Infeasible = 6,
    /// The solver stopped without a usable answer either way.
    Inconclusive = 7,
    /// Evaluation hit a point where the controller is undefined.
    Numerical = 8,
    Panic = 9,
    Internal = 10,
}

/// Rational state-feedback controller with its Lyapunov certificate.
pub struct KsController(RationalController);

/// Lifted bilinear surrogate model.
pub struct KsSurrogate(Surrogate);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn status_of(err: &Error) -> KsStatus {
    match err {
        Error::Dimension(_) => KsStatus::Dimension,
        Error::Parse(_) | Error::Json(_) | Error::Config(_) => KsStatus::Parse,
        Error::Spec(_) | Error::Degree(_) | Error::DegenerateBound(_) => KsStatus::InvalidArgument,
        Error::Integration { .. } | Error::Structure(_) => KsStatus::Numerical,
        _ => KsStatus::Internal,
    }
}

/// Runs `f`, translating errors and panics into status codes.
fn guard<F: FnOnce() -> Result<(), (KsStatus, String)>>(f: F) -> KsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => KsStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| payload.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            KsStatus::Panic
        }
    }
}

fn core_err(err: Error) -> (KsStatus, String) {
    (status_of(&err), err.to_string())
}

fn null(what: &str) -> (KsStatus, String) {
    (KsStatus::NullPointer, format!("{what} is null"))
}

unsafe fn read_str<'a>(s: *const c_char, what: &str) -> Result<&'a str, (KsStatus, String)> {
    if s.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(s)
        .to_str()
        .map_err(|e| (KsStatus::InvalidUtf8, format!("{what}: {e}")))
}

unsafe fn read_slice<'a>(
    p: *const f64,
    len: usize,
    expected: usize,
    what: &str,
) -> Result<&'a [f64], (KsStatus, String)> {
    if len != expected {
        return Err((
            KsStatus::Dimension,
            format!("{what} has length {len}, expected {expected}"),
        ));
    }
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn write_slice(
    p: *mut f64,
    len: usize,
    values: &[f64],
    what: &str,
) -> Result<(), (KsStatus, String)> {
    if len != values.len() {
        return Err((
            KsStatus::Dimension,
            format!("{what} has length {len}, expected {}", values.len()),
        ));
    }
    if len == 0 {
        return Ok(());
    }
    if p.is_null() {
        return Err(null(what));
    }
    std::slice::from_raw_parts_mut(p, len).copy_from_slice(values);
    Ok(())
}

fn finite(values: &[f64], what: &str) -> Result<(), (KsStatus, String)> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err((KsStatus::Numerical, format!("{what} is not finite")))
    }
}

/// Message describing the last failure on this thread, or null if none.
/// The pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn ks_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn ks_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Releases a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not have been freed already.
#[no_mangle]
pub unsafe extern "C" fn ks_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

unsafe fn export_string(s: String, out: *mut *mut c_char) -> Result<(), (KsStatus, String)> {
    let c = CString::new(s).map_err(|e| (KsStatus::Internal, e.to_string()))?;
    *out = c.into_raw();
    Ok(())
}

/// Parses a controller from its JSON form.
///
/// # Safety
/// `json` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ks_controller_from_json(
    json: *const c_char,
    out: *mut *mut KsController,
) -> KsStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let s = read_str(json, "json")?;
        let ctrl = RationalController::from_json(s).map_err(core_err)?;
        *out = Box::into_raw(Box::new(KsController(ctrl)));
        Ok(())
    })
}

/// Serializes a controller to JSON. Free the result with [`ks_string_free`].
///
/// # Safety
/// `ctrl` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ks_controller_to_json(
    ctrl: *const KsController,
    out: *mut *mut c_char,
) -> KsStatus {
    guard(|| {
        let ctrl = ctrl.as_ref().ok_or_else(|| null("controller"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        export_string(ctrl.0.to_json().map_err(core_err)?, out)
    })
}

/// Writes the state dimension `n`, input dimension `m` and lifted
/// dimension `N`. Any output pointer may be null.
///
/// # Safety
/// `ctrl` must be a live handle; non-null outputs must be valid.
#[no_mangle]
pub unsafe extern "C" fn ks_controller_dims(
    ctrl: *const KsController,
    n: *mut usize,
    m: *mut usize,
    big_n: *mut usize,
) -> KsStatus {
    guard(|| {
        let ctrl = ctrl.as_ref().ok_or_else(|| null("controller"))?;
        if !n.is_null() {
            *n = ctrl.0.dictionary.n();
        }
        if !m.is_null() {
            *m = ctrl.0.m();
        }
        if !big_n.is_null() {
            *big_n = ctrl.0.big_n();
        }
        Ok(())
    })
}

/// Evaluates the control input `u = μ(x)`.
///
/// # Safety
/// `x` must hold `n` readable doubles and `u` `m` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn ks_controller_eval(
    ctrl: *const KsController,
    x: *const f64,
    n: usize,
    u: *mut f64,
    m: usize,
) -> KsStatus {
    guard(|| {
        let ctrl = ctrl.as_ref().ok_or_else(|| null("controller"))?;
        let x = read_slice(x, n, ctrl.0.dictionary.n(), "x")?;
        let value = ctrl.0.eval(x).map_err(core_err)?;
        finite(value.as_slice(), "control input")?;
        write_slice(u, m, value.as_slice(), "u")
    })
}

/// Evaluates the Lyapunov function `V(Φ(x))`.
///
/// # Safety
/// `x` must hold `n` readable doubles and `v` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ks_controller_lyapunov(
    ctrl: *const KsController,
    x: *const f64,
    n: usize,
    v: *mut f64,
) -> KsStatus {
    guard(|| {
        let ctrl = ctrl.as_ref().ok_or_else(|| null("controller"))?;
        if v.is_null() {
            return Err(null("v"));
        }
        let x = read_slice(x, n, ctrl.0.dictionary.n(), "x")?;
        *v = ctrl.0.lyapunov(x).map_err(core_err)?;
        Ok(())
    })
}

/// Releases a controller. Null is ignored.
///
/// # Safety
/// `ctrl` must come from this library and not have been freed already.
#[no_mangle]
pub unsafe extern "C" fn ks_controller_free(ctrl: *mut KsController) {
    if !ctrl.is_null() {
        drop(Box::from_raw(ctrl));
    }
}

/// Parses a surrogate model from its JSON form.
///
/// # Safety
/// `json` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ks_surrogate_from_json(
    json: *const c_char,
    out: *mut *mut KsSurrogate,
) -> KsStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let s = read_str(json, "json")?;
        let model = Surrogate::from_json(s).map_err(core_err)?;
        *out = Box::into_raw(Box::new(KsSurrogate(model)));
        Ok(())
    })
}

/// Writes `n`, `m` and `N` of a surrogate. Any output pointer may be null.
///
/// # Safety
/// `model` must be a live handle; non-null outputs must be valid.
#[no_mangle]
pub unsafe extern "C" fn ks_surrogate_dims(
    model: *const KsSurrogate,
    n: *mut usize,
    m: *mut usize,
    big_n: *mut usize,
) -> KsStatus {
    guard(|| {
        let model = model.as_ref().ok_or_else(|| null("surrogate"))?;
        if !n.is_null() {
            *n = model.0.n();
        }
        if !m.is_null() {
            *m = model.0.m();
        }
        if !big_n.is_null() {
            *big_n = model.0.big_n();
        }
        Ok(())
    })
}

/// One-step prediction of the lifted state, `z⁺ = A z + B0 u + B̃ (u ⊗ z)`
/// with `z = Φ(x)`.
///
/// # Safety
/// `x`, `u` and `z_next` must hold `n`, `m` and `big_n` doubles.
#[no_mangle]
pub unsafe extern "C" fn ks_surrogate_predict(
    model: *const KsSurrogate,
    x: *const f64,
    n: usize,
    u: *const f64,
    m: usize,
    z_next: *mut f64,
    big_n: usize,
) -> KsStatus {
    guard(|| {
        let model = model.as_ref().ok_or_else(|| null("surrogate"))?;
        let x = read_slice(x, n, model.0.n(), "x")?;
        let u = read_slice(u, m, model.0.m(), "u")?;
        let z = model.0.predict(x, u).map_err(core_err)?;
        write_slice(z_next, big_n, z.as_slice(), "z_next")
    })
}

/// Releases a surrogate. Null is ignored.
///
/// # Safety
/// `model` must come from this library and not have been freed already.
#[no_mangle]
pub unsafe extern "C" fn ks_surrogate_free(model: *mut KsSurrogate) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

fn run_synthesis(
    model: &Surrogate,
    u_d: DenominatorSpec,
    c_x: f64,
    c_u: f64,
    objective: Objective,
    out: *mut *mut KsController,
) -> Result<(), (KsStatus, String)> {
    let bound = ResidualBound::fixed(c_x, c_u).map_err(core_err)?;
    let design =
        build_design(model, &bound, &u_d, DesignMode::default(), DEFAULT_TOL).map_err(core_err)?;
    match synthesize(&design, objective, DEFAULT_TOL).map_err(core_err)? {
        SynthesisOutcome::Feasible(syn) => {
            // SAFETY: callers check `out` before calling.
            unsafe { *out = Box::into_raw(Box::new(KsController(syn.controller))) };
            Ok(())
        }
        SynthesisOutcome::Infeasible {
            inconclusive,
            reason,
            ..
        } => Err((
            if inconclusive {
                KsStatus::Inconclusive
            } else {
                KsStatus::Infeasible
            },
            reason,
        )),
    }
}

/// Synthesizes a controller for `model` with the full-quadratic denominator
/// `1 + ‖z‖²` (α = 1), maximizing the smallest eigenvalue of `P`.
///
/// Returns [`KsStatus::Infeasible`] or [`KsStatus::Inconclusive`] when no
/// certified controller is found; `*out` is untouched in that case.
///
/// # Safety
/// `model` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ks_design(
    model: *const KsSurrogate,
    c_x: f64,
    c_u: f64,
    out: *mut *mut KsController,
) -> KsStatus {
    guard(|| {
        let model = model.as_ref().ok_or_else(|| null("surrogate"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let u_d = DenominatorSpec::full_quadratic(model.0.big_n()).map_err(core_err)?;
        run_synthesis(&model.0, u_d, c_x, c_u, Objective::MaxMinEigP, out)
    })
}

/// Feasibility synthesis for the single-zone building model
/// `x⁺ = x − 0.5u − 0.5ux` with `u_d = 0.01 + (1 + x)^{2α}`.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ks_design_building(
    alpha: u32,
    c_x: f64,
    c_u: f64,
    out: *mut *mut KsController,
) -> KsStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let model = Surrogate::new(
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, -0.5),
            DMatrix::from_element(1, 1, -0.5),
            Dictionary::identity(1),
            1.0,
        )
        .map_err(core_err)?;
        let u_d = DenominatorSpec::building(alpha).map_err(core_err)?;
        run_synthesis(&model, u_d, c_x, c_u, Objective::Feasibility, out)
    })
}
