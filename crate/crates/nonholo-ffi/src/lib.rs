//! C ABI for the constrained-dynamics engine.
//!
//! Handles are opaque pointers; every fallible call returns an
//! `NhStatus` and leaves a human-readable message retrievable through
//! [`nh_last_error`] (thread-local, valid until the next failing call on
//! the same thread). Arrays are written into caller-provided buffers
//! sized via [`nh_engine_dims`].

use nonholo::integrate::{IntegratorOpts, Scheme, Stabilization};
use nonholo::scenarios::ScenarioConfig;
use nonholo::sim::{run, write_csv, RunMethod, RunOutput};
use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::os::raw::c_double;

/// Status codes mirroring the CLI exit codes, plus FFI-specific ones.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NhStatus {
    Ok = 0,
    /// Bad input: unknown scenario/method, schema or expression errors.
    Usage = 1,
    /// Numerical failure (no convergence, singular systems, step floor).
    Numerical = 2,
    /// Constraint drift exceeded the abort threshold.
    DriftAbort = 3,
    /// A required pointer argument was null.
    NullPointer = 4,
    /// A string argument was not valid UTF-8.
    InvalidUtf8 = 5,
    /// An index was out of range.
    OutOfRange = 6,
}

/// Integration method selector.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NhMethod {
    Oracle = 0,
    Dirac = 1,
    Flannery = 2,
}

/// Run options; obtain defaults from [`nh_run_options_default`].
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct NhRunOptions {
    pub t_end: c_double,
    /// Nonzero: adaptive Dormand-Prince 5(4); zero: fixed-step RK4.
    pub adaptive: u8,
    /// Relative tolerance (adaptive).
    pub rel_tol: c_double,
    /// Absolute tolerance (adaptive).
    pub abs_tol: c_double,
    /// Step size (fixed-step).
    pub dt: c_double,
    /// Number of dense-output samples (at least 2).
    pub samples: u32,
    /// Nonzero: post-step momentum projection.
    pub stabilize_projection: u8,
    /// Abort threshold on max |g_k|; non-positive disables.
    pub drift_abort: c_double,
}

/// Opaque: a validated scenario (system plus initial data).
pub struct NhEngine {
    cfg: ScenarioConfig,
}

/// Opaque: a finished run with its sampled trajectory.
pub struct NhRun {
    cfg: ScenarioConfig,
    out: RunOutput,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::new("").unwrap());
}

fn set_error(msg: &str) {
    let sanitized = msg.replace('\0', " ");
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(sanitized).unwrap_or_default();
    });
}

fn status_for(e: &nonholo::Error) -> NhStatus {
    use nonholo::Error as E;
    match e {
        E::Syntax { .. }
        | E::UnknownFunction { .. }
        | E::UnboundVariable { .. }
        | E::DuplicateBinding { .. }
        | E::Domain { .. }
        | E::InvalidSystem(_)
        | E::Schema { .. }
        | E::ConstraintViolated { .. }
        | E::UnknownScenario(_) => NhStatus::Usage,
        E::DriftAbort { .. } => NhStatus::DriftAbort,
        _ => NhStatus::Numerical,
    }
}

fn fail(e: nonholo::Error) -> NhStatus {
    set_error(&e.to_string());
    status_for(&e)
}

unsafe fn read_str<'a>(ptr: *const c_char) -> Result<&'a str, NhStatus> {
    if ptr.is_null() {
        set_error("null string argument");
        return Err(NhStatus::NullPointer);
    }
    CStr::from_ptr(ptr).to_str().map_err(|_| {
        set_error("string argument is not valid UTF-8");
        NhStatus::InvalidUtf8
    })
}

/// Message describing the most recent failure on this thread. The
/// pointer stays valid until the next failing call on the same thread;
/// do not free it.
#[no_mangle]
pub extern "C" fn nh_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Default options: adaptive at 1e-10/1e-12, 2 seconds, 400 samples,
/// drift abort at 1e-3, no stabilization.
#[no_mangle]
pub extern "C" fn nh_run_options_default() -> NhRunOptions {
    NhRunOptions {
        t_end: 2.0,
        adaptive: 1,
        rel_tol: 1e-10,
        abs_tol: 1e-12,
        dt: 1e-3,
        samples: 400,
        stabilize_projection: 0,
        drift_abort: 1e-3,
    }
}

/// Create an engine from a built-in scenario name.
///
/// # Safety
/// `name` must be a valid NUL-terminated string; `out` must be a valid
/// pointer. On success `*out` owns the engine until [`nh_engine_free`].
#[no_mangle]
pub unsafe extern "C" fn nh_engine_builtin(
    name: *const c_char,
    out: *mut *mut NhEngine,
) -> NhStatus {
    if out.is_null() {
        set_error("null output pointer");
        return NhStatus::NullPointer;
    }
    let name = match read_str(name) {
        Ok(s) => s,
        Err(status) => return status,
    };
    match ScenarioConfig::builtin(name) {
        Ok(cfg) => {
            *out = Box::into_raw(Box::new(NhEngine { cfg }));
            NhStatus::Ok
        }
        Err(e) => fail(e),
    }
}

/// Create an engine from scenario JSON text (the same schema the CLI
/// loads from files).
///
/// # Safety
/// `json` must be a valid NUL-terminated string; `out` must be a valid
/// pointer. On success `*out` owns the engine until [`nh_engine_free`].
#[no_mangle]
pub unsafe extern "C" fn nh_engine_from_json(
    json: *const c_char,
    out: *mut *mut NhEngine,
) -> NhStatus {
    if out.is_null() {
        set_error("null output pointer");
        return NhStatus::NullPointer;
    }
    let text = match read_str(json) {
        Ok(s) => s,
        Err(status) => return status,
    };
    match ScenarioConfig::from_json_str(text) {
        Ok(cfg) => {
            *out = Box::into_raw(Box::new(NhEngine { cfg }));
            NhStatus::Ok
        }
        Err(e) => fail(e),
    }
}

/// # Safety
/// `engine` must have come from an `nh_engine_*` constructor and not
/// already be freed. Passing null is a no-op.
#[no_mangle]
pub unsafe extern "C" fn nh_engine_free(engine: *mut NhEngine) {
    if !engine.is_null() {
        drop(Box::from_raw(engine));
    }
}

/// Coordinate count `n` and constraint count `m`.
///
/// # Safety
/// `engine` must be a live engine handle; `n` and `m` must each be valid
/// or null (null outputs are skipped).
#[no_mangle]
pub unsafe extern "C" fn nh_engine_dims(
    engine: *const NhEngine,
    n: *mut u32,
    m: *mut u32,
) -> NhStatus {
    if engine.is_null() {
        set_error("null engine");
        return NhStatus::NullPointer;
    }
    let cfg = &(*engine).cfg;
    if !n.is_null() {
        *n = cfg.spec.n() as u32;
    }
    if !m.is_null() {
        *m = cfg.spec.m() as u32;
    }
    NhStatus::Ok
}

fn build_opts(options: &NhRunOptions) -> Result<IntegratorOpts, NhStatus> {
    if options.t_end <= 0.0 {
        set_error("t_end must be positive");
        return Err(NhStatus::Usage);
    }
    let scheme = if options.adaptive != 0 {
        if options.rel_tol <= 0.0 || options.abs_tol <= 0.0 {
            set_error("tolerances must be positive");
            return Err(NhStatus::Usage);
        }
        Scheme::Dp45 {
            rel_tol: options.rel_tol,
            abs_tol: options.abs_tol,
        }
    } else {
        if options.dt <= 0.0 {
            set_error("dt must be positive");
            return Err(NhStatus::Usage);
        }
        Scheme::Rk4 { dt: options.dt }
    };
    Ok(IntegratorOpts {
        scheme,
        max_steps: 2_000_000,
        drift_abort: (options.drift_abort > 0.0).then_some(options.drift_abort),
        samples: (options.samples.max(2)) as usize,
        stabilization: if options.stabilize_projection != 0 {
            Stabilization::Projection
        } else {
            Stabilization::None
        },
    })
}

/// Integrate the engine's scenario and return a sampled trajectory.
///
/// # Safety
/// `engine` must be a live engine handle, `options` and `out` valid
/// pointers. On success `*out` owns the run until [`nh_run_free`].
#[no_mangle]
pub unsafe extern "C" fn nh_run(
    engine: *const NhEngine,
    method: NhMethod,
    options: *const NhRunOptions,
    out: *mut *mut NhRun,
) -> NhStatus {
    if engine.is_null() || options.is_null() || out.is_null() {
        set_error("null argument");
        return NhStatus::NullPointer;
    }
    let cfg = &(*engine).cfg;
    let opts = match build_opts(&*options) {
        Ok(o) => o,
        Err(status) => return status,
    };
    let method = match method {
        NhMethod::Oracle => RunMethod::Oracle,
        NhMethod::Dirac => RunMethod::Phase(nonholo::dynamics::MethodKind::Dirac),
        NhMethod::Flannery => RunMethod::Phase(nonholo::dynamics::MethodKind::Flannery),
    };
    match run(cfg, method, (*options).t_end, &opts) {
        Ok(output) => {
            *out = Box::into_raw(Box::new(NhRun {
                cfg: cfg.clone(),
                out: output,
            }));
            NhStatus::Ok
        }
        Err(e) => fail(e),
    }
}

/// # Safety
/// `run` must have come from [`nh_run`] and not already be freed.
/// Passing null is a no-op.
#[no_mangle]
pub unsafe extern "C" fn nh_run_free(run: *mut NhRun) {
    if !run.is_null() {
        drop(Box::from_raw(run));
    }
}

/// Number of samples in the run.
///
/// # Safety
/// `run` must be a live run handle (null yields 0).
#[no_mangle]
pub unsafe extern "C" fn nh_run_len(run: *const NhRun) -> u32 {
    if run.is_null() {
        return 0;
    }
    (*run).out.len() as u32
}

/// Copy sample `index` into caller buffers. `q` and `p` need `n` slots,
/// `lam` and `g` need `m`; any output pointer may be null to skip that
/// field. For oracle runs `p` carries `dL/dq_dot` and `lam` the
/// reference multipliers.
///
/// # Safety
/// `run` must be a live run handle and every non-null buffer large
/// enough as described above.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn nh_run_sample(
    run: *const NhRun,
    index: u32,
    t: *mut c_double,
    q: *mut c_double,
    p: *mut c_double,
    lam: *mut c_double,
    g: *mut c_double,
    energy: *mut c_double,
    h: *mut c_double,
) -> NhStatus {
    if run.is_null() {
        set_error("null run");
        return NhStatus::NullPointer;
    }
    let handle = &*run;
    let i = index as usize;
    if i >= handle.out.len() {
        set_error("sample index out of range");
        return NhStatus::OutOfRange;
    }
    let row = match handle.out.row(&handle.cfg, i) {
        Ok(row) => row,
        Err(e) => return fail(e),
    };
    let n = handle.out.n;
    let m = handle.out.m;
    if !t.is_null() {
        *t = row[0];
    }
    if !q.is_null() {
        std::ptr::copy_nonoverlapping(row[1..1 + n].as_ptr(), q, n);
    }
    if !p.is_null() {
        std::ptr::copy_nonoverlapping(row[1 + n..1 + 2 * n].as_ptr(), p, n);
    }
    if !lam.is_null() {
        std::ptr::copy_nonoverlapping(row[1 + 2 * n..1 + 2 * n + m].as_ptr(), lam, m);
    }
    if !g.is_null() {
        std::ptr::copy_nonoverlapping(row[1 + 2 * n + m..1 + 2 * n + 2 * m].as_ptr(), g, m);
    }
    if !energy.is_null() {
        *energy = row[1 + 2 * n + 2 * m];
    }
    if !h.is_null() {
        *h = row[2 + 2 * n + 2 * m];
    }
    NhStatus::Ok
}

/// Largest constraint residual seen at any accepted step.
///
/// # Safety
/// `run` must be a live run handle (null yields NaN).
#[no_mangle]
pub unsafe extern "C" fn nh_run_max_residual(run: *const NhRun) -> c_double {
    if run.is_null() {
        return f64::NAN;
    }
    (*run).out.trajectory.stats.max_g_inf
}

/// Write the run as CSV (same format as the CLI).
///
/// # Safety
/// `run` must be a live run handle and `path` a valid NUL-terminated
/// string.
#[no_mangle]
pub unsafe extern "C" fn nh_run_write_csv(run: *const NhRun, path: *const c_char) -> NhStatus {
    if run.is_null() {
        set_error("null run");
        return NhStatus::NullPointer;
    }
    let path = match read_str(path) {
        Ok(s) => s,
        Err(status) => return status,
    };
    let handle = &*run;
    let file = match std::fs::File::create(path) {
        Ok(f) => f,
        Err(e) => {
            set_error(&format!("cannot create {path}: {e}"));
            return NhStatus::Usage;
        }
    };
    let mut writer = std::io::BufWriter::new(file);
    match write_csv(&mut writer, &handle.cfg, &handle.out, &[]) {
        Ok(()) => NhStatus::Ok,
        Err(e) => fail(e),
    }
}
