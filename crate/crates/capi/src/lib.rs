//! C ABI for the crossdiff solvers: opaque handles, integer status codes,
//! and a thread-local last-error message. All pointers passed in must be
//! valid for the stated lengths; all handles must be freed with the matching
//! `_free` function exactly once.

use std::cell::RefCell;
use std::ffi::{c_char, c_int, CString};
use std::ptr;

use crossdiff::grid::{w2_distance, DensityPair, Grid1D};
use crossdiff::lyapunov;
use crossdiff::model::{Kernel, ModelSpec};
use crossdiff::steady::{solve_steady_quadratic, SteadyState};
use crossdiff::Error;

/// Status codes returned by every fallible entry point.
pub const CROSSDIFF_OK: c_int = 0;
/// Invalid argument (bad parameter, inadmissible model, bad sizes).
pub const CROSSDIFF_ERR_INVALID: c_int = 1;
/// Domain error (evaluation outside the admissible region).
pub const CROSSDIFF_ERR_DOMAIN: c_int = 2;
/// Numeric failure (divergence, non-finite values).
pub const CROSSDIFF_ERR_NUMERIC: c_int = 3;
/// Null pointer where a value was required.
pub const CROSSDIFF_ERR_NULL: c_int = 4;

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn code_of(e: &Error) -> c_int {
    match e {
        Error::Domain(_) => CROSSDIFF_ERR_DOMAIN,
        Error::Numeric(_) => CROSSDIFF_ERR_NUMERIC,
        _ => CROSSDIFF_ERR_INVALID,
    }
}

fn fail(e: Error) -> c_int {
    let code = code_of(&e);
    set_error(&e.to_string());
    code
}

/// Opaque model handle.
pub struct CrossdiffModel {
    spec: ModelSpec,
}

/// Opaque steady-state handle; remembers the grid it was solved on.
pub struct CrossdiffSteady {
    state: SteadyState,
}

/// Copy the last error message for the calling thread into `buf`
/// (NUL-terminated, truncated to `len`). Returns the full message length.
///
/// # Safety
/// `buf` must point to `len` writable bytes, or be null (query length only).
#[no_mangle]
pub unsafe extern "C" fn crossdiff_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        let bytes = msg.as_bytes_with_nul();
        if !buf.is_null() && len > 0 {
            let n = bytes.len().min(len);
            ptr::copy_nonoverlapping(bytes.as_ptr() as *const c_char, buf, n);
            // Ensure termination even when truncated.
            *buf.add(n - 1) = 0;
        }
        bytes.len() - 1
    })
}

/// Create a model with a quadratic kernel K(z) = lambda z^2 / 2. On success
/// writes a handle to `out` and returns CROSSDIFF_OK.
///
/// # Safety
/// `out` must be a valid pointer to a handle slot.
#[no_mangle]
pub unsafe extern "C" fn crossdiff_model_new(
    a1: f64,
    a2: f64,
    b1: f64,
    b2: f64,
    gamma: f64,
    lambda: f64,
    eps: f64,
    out: *mut *mut CrossdiffModel,
) -> c_int {
    if out.is_null() {
        set_error("null output handle");
        return CROSSDIFF_ERR_NULL;
    }
    match ModelSpec::new(a1, a2, b1, b2, gamma, Kernel::Quadratic { lambda }, eps) {
        Ok(spec) => {
            *out = Box::into_raw(Box::new(CrossdiffModel { spec }));
            CROSSDIFF_OK
        }
        Err(e) => fail(e),
    }
}

/// Free a model handle. Null is a no-op.
///
/// # Safety
/// `h` must come from `crossdiff_model_new` and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn crossdiff_model_free(h: *mut CrossdiffModel) {
    if !h.is_null() {
        drop(Box::from_raw(h));
    }
}

/// Check the admissibility conditions without constructing a model; writes 1
/// or 0 to `admissible`.
///
/// # Safety
/// `admissible` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn crossdiff_validate_params(
    a1: f64,
    a2: f64,
    b1: f64,
    b2: f64,
    gamma: f64,
    admissible: *mut c_int,
) -> c_int {
    if admissible.is_null() {
        set_error("null output pointer");
        return CROSSDIFF_ERR_NULL;
    }
    match crossdiff::model::validate_example_params(a1, a2, b1, b2, gamma) {
        Ok(report) => {
            *admissible = report.admissible as c_int;
            CROSSDIFF_OK
        }
        Err(e) => fail(e),
    }
}

/// Evaluate the perturbed-potential map Gamma_eps at (u1, u2).
///
/// # Safety
/// `v1`, `v2` must be valid pointers; `h` a live model handle.
#[no_mangle]
pub unsafe extern "C" fn crossdiff_gamma_map(
    h: *const CrossdiffModel,
    u1: f64,
    u2: f64,
    v1: *mut f64,
    v2: *mut f64,
) -> c_int {
    if h.is_null() || v1.is_null() || v2.is_null() {
        set_error("null pointer");
        return CROSSDIFF_ERR_NULL;
    }
    match (*h).spec.gamma_map(u1, u2) {
        Ok(v) => {
            *v1 = v[0];
            *v2 = v[1];
            CROSSDIFF_OK
        }
        Err(e) => fail(e),
    }
}

/// Invert Gamma_eps at (v1, v2) to tolerance `tol`.
///
/// # Safety
/// `u1`, `u2` must be valid pointers; `h` a live model handle.
#[no_mangle]
pub unsafe extern "C" fn crossdiff_gamma_inverse(
    h: *const CrossdiffModel,
    v1: f64,
    v2: f64,
    tol: f64,
    u1: *mut f64,
    u2: *mut f64,
) -> c_int {
    if h.is_null() || u1.is_null() || u2.is_null() {
        set_error("null pointer");
        return CROSSDIFF_ERR_NULL;
    }
    match (*h).spec.gamma_inverse(v1, v2, tol) {
        Ok(u) => {
            *u1 = u[0];
            *u2 = u[1];
            CROSSDIFF_OK
        }
        Err(e) => fail(e),
    }
}

unsafe fn pair_from_raw(
    half_width: f64,
    n: usize,
    rho1: *const f64,
    rho2: *const f64,
) -> Result<DensityPair, Error> {
    let grid = Grid1D::new(half_width, n)?;
    let r1 = std::slice::from_raw_parts(rho1, n).to_vec();
    let r2 = std::slice::from_raw_parts(rho2, n).to_vec();
    DensityPair::new_unchecked(grid, r1, r2)
}

/// Total energy E_eps of a density pair given as two cell-average arrays of
/// length `n` on the symmetric box [-half_width, half_width].
///
/// # Safety
/// `rho1`, `rho2` must point to `n` readable doubles; `energy` must be valid.
#[no_mangle]
pub unsafe extern "C" fn crossdiff_energy(
    h: *const CrossdiffModel,
    half_width: f64,
    n: usize,
    rho1: *const f64,
    rho2: *const f64,
    energy: *mut f64,
) -> c_int {
    if h.is_null() || rho1.is_null() || rho2.is_null() || energy.is_null() {
        set_error("null pointer");
        return CROSSDIFF_ERR_NULL;
    }
    let pair = match pair_from_raw(half_width, n, rho1, rho2) {
        Ok(p) => p,
        Err(e) => return fail(e),
    };
    match lyapunov::energy(&pair, &(*h).spec) {
        Ok(e) => {
            *energy = e;
            CROSSDIFF_OK
        }
        Err(e) => fail(e),
    }
}

/// Solve the steady state for quadratic internal energies (a1 = a2 = 2) with
/// the model's quadratic kernel on an n-cell grid.
///
/// # Safety
/// `out` must be a valid pointer to a handle slot; `h` a live model handle.
#[no_mangle]
pub unsafe extern "C" fn crossdiff_steady_solve(
    h: *const CrossdiffModel,
    half_width: f64,
    n: usize,
    tol: f64,
    out: *mut *mut CrossdiffSteady,
) -> c_int {
    if h.is_null() || out.is_null() {
        set_error("null pointer");
        return CROSSDIFF_ERR_NULL;
    }
    let grid = match Grid1D::new(half_width, n) {
        Ok(g) => g,
        Err(e) => return fail(e),
    };
    match solve_steady_quadratic(&(*h).spec, &grid, tol) {
        Ok(state) => {
            *out = Box::into_raw(Box::new(CrossdiffSteady { state }));
            CROSSDIFF_OK
        }
        Err(e) => fail(e),
    }
}

/// Free a steady-state handle. Null is a no-op.
///
/// # Safety
/// `h` must come from `crossdiff_steady_solve` and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn crossdiff_steady_free(h: *mut CrossdiffSteady) {
    if !h.is_null() {
        drop(Box::from_raw(h));
    }
}

/// Lagrange constant C_j (species = 0 or 1) of a solved steady state.
///
/// # Safety
/// `c` must be a valid pointer; `h` a live steady handle.
#[no_mangle]
pub unsafe extern "C" fn crossdiff_steady_constant(
    h: *const CrossdiffSteady,
    species: c_int,
    c: *mut f64,
) -> c_int {
    if h.is_null() || c.is_null() {
        set_error("null pointer");
        return CROSSDIFF_ERR_NULL;
    }
    match species {
        0 => *c = (*h).state.c1,
        1 => *c = (*h).state.c2,
        _ => {
            set_error("species must be 0 or 1");
            return CROSSDIFF_ERR_INVALID;
        }
    }
    CROSSDIFF_OK
}

/// Support radius of species 0 or 1 of a solved steady state.
///
/// # Safety
/// `r` must be a valid pointer; `h` a live steady handle.
#[no_mangle]
pub unsafe extern "C" fn crossdiff_steady_support(
    h: *const CrossdiffSteady,
    species: c_int,
    r: *mut f64,
) -> c_int {
    if h.is_null() || r.is_null() {
        set_error("null pointer");
        return CROSSDIFF_ERR_NULL;
    }
    match species {
        0 => *r = (*h).state.support1,
        1 => *r = (*h).state.support2,
        _ => {
            set_error("species must be 0 or 1");
            return CROSSDIFF_ERR_INVALID;
        }
    }
    CROSSDIFF_OK
}

/// Copy the steady profile of one species into `buf` (length `n`, the grid
/// size the state was solved on). Writes the cell count to `written`.
///
/// # Safety
/// `buf` must point to `n` writable doubles; `h` a live steady handle.
#[no_mangle]
pub unsafe extern "C" fn crossdiff_steady_profile(
    h: *const CrossdiffSteady,
    species: c_int,
    buf: *mut f64,
    n: usize,
    written: *mut usize,
) -> c_int {
    if h.is_null() || buf.is_null() || written.is_null() {
        set_error("null pointer");
        return CROSSDIFF_ERR_NULL;
    }
    let rho = match species {
        0 => &(*h).state.pair.rho1,
        1 => &(*h).state.pair.rho2,
        _ => {
            set_error("species must be 0 or 1");
            return CROSSDIFF_ERR_INVALID;
        }
    };
    if n < rho.len() {
        set_error("buffer too small for the steady profile");
        return CROSSDIFF_ERR_INVALID;
    }
    ptr::copy_nonoverlapping(rho.as_ptr(), buf, rho.len());
    *written = rho.len();
    CROSSDIFF_OK
}

/// 1D Wasserstein-2 distance between two unit-mass densities given as
/// cell-average arrays of length `n` on [-half_width, half_width], using
/// `quantiles` quadrature points.
///
/// # Safety
/// `rho_a`, `rho_b` must point to `n` readable doubles; `d` must be valid.
#[no_mangle]
pub unsafe extern "C" fn crossdiff_w2_distance(
    half_width: f64,
    n: usize,
    rho_a: *const f64,
    rho_b: *const f64,
    quantiles: usize,
    d: *mut f64,
) -> c_int {
    if rho_a.is_null() || rho_b.is_null() || d.is_null() {
        set_error("null pointer");
        return CROSSDIFF_ERR_NULL;
    }
    let grid = match Grid1D::new(half_width, n) {
        Ok(g) => g,
        Err(e) => return fail(e),
    };
    let a = std::slice::from_raw_parts(rho_a, n);
    let b = std::slice::from_raw_parts(rho_b, n);
    match w2_distance(a, b, &grid, quantiles) {
        Ok(v) => {
            *d = v;
            CROSSDIFF_OK
        }
        Err(e) => fail(e),
    }
}
