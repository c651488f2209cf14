//! C ABI for the `quantred` laboratory.
//!
//! Objects are exposed as opaque handles ([`QrAction`], [`QrGram`],
//! [`QrScenario`]) created by `qr_*_new`/`qr_*_from_*` functions and
//! released by the matching `qr_*_free`. Every fallible function returns a
//! [`QrStatus`]; on failure a message is available from
//! [`qr_last_error_message`] on the same thread. Results are written through
//! caller-provided out-pointers. Panics never cross the boundary: they are
//! reported as [`QrStatus::Panic`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::sync::OnceLock;

use num_complex::Complex64;
use num_rational::Ratio;
use quantred::asymptotics_lab::{defect_from_grams, density_i, density_j};
use quantred::cli_runner::{describe, run, validate_with, Overrides, Scenario};
use quantred::hilbert_spaces::{invariant_basis, GramMatrix, StratifiedPlan};
use quantred::kahler_models::{make_model, PointM};
use quantred::reduction_maps::reduced_gram_with;
use quantred::strata_flow::stratum_of_support;
use quantred::torus_actions::{moment_map, support_of, Twist, WeightAction};
use quantred::{catalog, Error, QuadConfig};

/// Status code returned by every fallible function.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QrStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullPointer = 1,
    /// A string argument was not valid UTF-8.
    InvalidUtf8 = 2,
    /// Invalid model, action, scenario or quadrature configuration.
    Config = 3,
    /// Invalid geometric input (wrong sizes, degenerate coordinates).
    Invalid = 4,
    /// A numerical procedure failed.
    Numerical = 5,
    /// The stratification cross-check failed.
    Stratification = 6,
    /// An index or size argument was out of range (including too-small buffers).
    OutOfRange = 7,
    /// An internal panic was caught.
    Panic = 8,
}

/// Section bundle selector.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QrTwist {
    Plain = 0,
    Halfform = 1,
}

impl From<QrTwist> for Twist {
    fn from(t: QrTwist) -> Twist {
        match t {
            QrTwist::Plain => Twist::Plain,
            QrTwist::Halfform => Twist::Halfform,
        }
    }
}

/// A torus action on a product of projective spaces (opaque).
pub struct QrAction {
    action: WeightAction,
    plan: OnceLock<Result<StratifiedPlan, Error>>,
}

impl QrAction {
    fn new(action: WeightAction) -> QrAction {
        QrAction { action, plan: OnceLock::new() }
    }

    fn plan(&self) -> Result<&StratifiedPlan, Error> {
        self.plan.get_or_init(|| StratifiedPlan::new(&self.action)).as_ref().map_err(Clone::clone)
    }
}

/// A Gram matrix of invariant sections with per-entry errors (opaque).
pub struct QrGram {
    gram: GramMatrix,
}

/// A validated scenario (opaque).
pub struct QrScenario {
    scenario: Scenario,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let text = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(CString::new(text).expect("nul bytes removed")));
}

fn fail(status: QrStatus, msg: impl Into<String>) -> QrStatus {
    set_error(msg);
    status
}

fn from_error(e: Error) -> QrStatus {
    let status = match e {
        Error::Config(_) => QrStatus::Config,
        Error::Invalid(_) => QrStatus::Invalid,
        Error::Numerical(_) => QrStatus::Numerical,
        Error::Stratification(_) => QrStatus::Stratification,
    };
    fail(status, e.to_string())
}

/// Run `body`, translating panics into [`QrStatus::Panic`].
fn guard(body: impl FnOnce() -> QrStatus) -> QrStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(s) => s,
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            fail(QrStatus::Panic, format!("internal panic: {msg}"))
        }
    }
}

macro_rules! non_null {
    ($($p:ident),+) => {
        $(if $p.is_null() {
            return fail(QrStatus::NullPointer, concat!("argument `", stringify!($p), "` is null"));
        })+
    };
}

macro_rules! try_qr {
    ($e:expr) => {
        match $e {
            Ok(v) => v,
            Err(e) => return from_error(e),
        }
    };
}

unsafe fn str_arg<'a>(p: *const c_char) -> Result<&'a str, QrStatus> {
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(QrStatus::InvalidUtf8, "string argument is not valid UTF-8"))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn qr_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Message of the last failure on this thread, or null if the last call
/// succeeded. The pointer stays valid until the next call on this thread.
#[no_mangle]
pub extern "C" fn qr_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |s| s.as_ptr()))
}

/// Create one of the built-in examples (`"E1"`, `"E2"`, `"E3"`).
///
/// # Safety
/// `name` must be a valid NUL-terminated string and `out` a valid pointer to
/// writable storage for a handle. The returned handle must be released with
/// [`qr_action_free`].
#[no_mangle]
pub unsafe extern "C" fn qr_action_from_example(name: *const c_char, out: *mut *mut QrAction) -> QrStatus {
    guard(|| {
        non_null!(name, out);
        let name = match str_arg(name) {
            Ok(s) => s,
            Err(s) => return s,
        };
        match catalog::by_name(name) {
            Some(a) => {
                *out = Box::into_raw(Box::new(QrAction::new(a)));
                QrStatus::Ok
            }
            None => fail(QrStatus::Config, format!("unknown example {name:?}")),
        }
    })
}

/// Create an action from raw data.
///
/// `factors` and `bundle_degrees` have `num_factors` entries; `weights` is a
/// row-major `rank × N` matrix with `N = Σ (factors[j] + 1)`; the moment
/// shift is `shift_num[a] / shift_den[a]` for `a < rank`.
///
/// # Safety
/// Every array pointer must be valid for reads of the stated length, and
/// `out` must be valid for a write. Release the handle with
/// [`qr_action_free`].
#[no_mangle]
pub unsafe extern "C" fn qr_action_new(
    factors: *const usize,
    bundle_degrees: *const i64,
    num_factors: usize,
    weights: *const i64,
    rank: usize,
    shift_num: *const i64,
    shift_den: *const i64,
    out: *mut *mut QrAction,
) -> QrStatus {
    guard(|| {
        non_null!(factors, bundle_degrees, weights, shift_num, shift_den, out);
        if num_factors == 0 || rank == 0 {
            return fail(QrStatus::Config, "num_factors and rank must be positive");
        }
        let f = std::slice::from_raw_parts(factors, num_factors);
        let l = std::slice::from_raw_parts(bundle_degrees, num_factors);
        let model = try_qr!(make_model(f, l));
        let n = model.num_coords();
        let w = std::slice::from_raw_parts(weights, rank * n);
        let num = std::slice::from_raw_parts(shift_num, rank);
        let den = std::slice::from_raw_parts(shift_den, rank);
        if let Some(a) = den.iter().position(|&d| d == 0) {
            return fail(QrStatus::Config, format!("shift denominator {a} is zero"));
        }
        let shift = num.iter().zip(den).map(|(&p, &q)| Ratio::new(p, q)).collect();
        let rows = w.chunks(n).map(|r| r.to_vec()).collect();
        let action = try_qr!(WeightAction::new(model, rows, shift));
        *out = Box::into_raw(Box::new(QrAction::new(action)));
        QrStatus::Ok
    })
}

/// Release an action handle (null is ignored).
///
/// # Safety
/// `action` must be null or a handle obtained from this library that has not
/// been freed yet.
#[no_mangle]
pub unsafe extern "C" fn qr_action_free(action: *mut QrAction) {
    if !action.is_null() {
        drop(Box::from_raw(action));
    }
}

/// Number of homogeneous coordinates `N` and torus rank `d`.
///
/// # Safety
/// `action` must be a live handle; `num_coords` and `rank` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn qr_action_shape(action: *const QrAction, num_coords: *mut usize, rank: *mut usize) -> QrStatus {
    guard(|| {
        non_null!(action, num_coords, rank);
        let a = &(*action).action;
        *num_coords = a.model.num_coords();
        *rank = a.rank;
        QrStatus::Ok
    })
}

/// Dimension of the invariant subspace at tensor power `k`.
///
/// # Safety
/// `action` must be a live handle and `out` valid for a write.
#[no_mangle]
pub unsafe extern "C" fn qr_invariant_dim(action: *const QrAction, k: u32, twist: QrTwist, out: *mut usize) -> QrStatus {
    guard(|| {
        non_null!(action, out);
        *out = try_qr!(invariant_basis(&(*action).action, k, twist.into())).len();
        QrStatus::Ok
    })
}

/// Number of orbit-type strata of the zero level set.
///
/// # Safety
/// `action` must be a live handle and `out` valid for a write.
#[no_mangle]
pub unsafe extern "C" fn qr_strata_count(action: *const QrAction, out: *mut usize) -> QrStatus {
    guard(|| {
        non_null!(action, out);
        *out = try_qr!((*action).plan()).strata.len();
        QrStatus::Ok
    })
}

unsafe fn point_arg(a: &WeightAction, re: *const f64, im: *const f64, len: usize) -> Result<PointM, QrStatus> {
    let n = a.model.num_coords();
    if len != n {
        return Err(fail(QrStatus::OutOfRange, format!("expected {n} coordinates, got {len}")));
    }
    let re = std::slice::from_raw_parts(re, n);
    let im = std::slice::from_raw_parts(im, n);
    let z: Vec<Complex64> = re.iter().zip(im).map(|(&x, &y)| Complex64::new(x, y)).collect();
    PointM::from_flat(&a.model, &z).map_err(from_error)
}

/// Moment map at the point with homogeneous coordinates `re + i·im`
/// (each factor block is normalized internally). Writes `rank` values.
///
/// # Safety
/// `re` and `im` must be valid for `len` reads, `out` for `rank` writes.
#[no_mangle]
pub unsafe extern "C" fn qr_moment_map(
    action: *const QrAction,
    re: *const f64,
    im: *const f64,
    len: usize,
    out: *mut f64,
) -> QrStatus {
    guard(|| {
        non_null!(action, re, im, out);
        let a = &(*action).action;
        let x = match point_arg(a, re, im, len) {
            Ok(x) => x,
            Err(s) => return s,
        };
        let phi = moment_map(a, &x);
        std::slice::from_raw_parts_mut(out, phi.len()).copy_from_slice(&phi);
        QrStatus::Ok
    })
}

/// Density `I_k` (plain) or `J_k` (half-form) at a zero-level point.
///
/// # Safety
/// `re` and `im` must be valid for `len` reads; `value` and `stderr` valid
/// for writes.
#[no_mangle]
pub unsafe extern "C" fn qr_density(
    action: *const QrAction,
    re: *const f64,
    im: *const f64,
    len: usize,
    k: f64,
    twist: QrTwist,
    value: *mut f64,
    stderr: *mut f64,
) -> QrStatus {
    guard(|| {
        non_null!(action, re, im, value, stderr);
        let h = &*action;
        let x = match point_arg(&h.action, re, im, len) {
            Ok(x) => x,
            Err(s) => return s,
        };
        let plan = try_qr!(h.plan());
        let Some(idx) = stratum_of_support(&plan.strata, &support_of(&x, 1e-9)) else {
            return fail(QrStatus::Invalid, "the point does not lie on a stratum of the zero level set");
        };
        let label = &plan.strata[idx];
        let e = try_qr!(match twist {
            QrTwist::Plain => density_i(&h.action, label, &x, k),
            QrTwist::Halfform => density_j(&h.action, label, &x, k),
        });
        *value = e.value;
        *stderr = e.stderr;
        QrStatus::Ok
    })
}

unsafe fn gram_common(
    action: *const QrAction,
    k: u32,
    twist: QrTwist,
    norm_def: u8,
    samples: usize,
    seed: u64,
    out: *mut *mut QrGram,
    downstairs: bool,
) -> QrStatus {
    guard(|| {
        non_null!(action, out);
        let h = &*action;
        let quad = QuadConfig { samples, seed, ..Default::default() };
        try_qr!(quad.validate());
        if !(1..=2).contains(&norm_def) {
            return fail(QrStatus::Config, format!("unknown norm definition {norm_def}"));
        }
        let plan = try_qr!(h.plan());
        let gram = if downstairs {
            try_qr!(reduced_gram_with(&h.action, plan, k, twist.into(), norm_def, &quad)).gram
        } else {
            try_qr!(plan.gram_upstairs(&h.action, k, twist.into(), norm_def, &quad))
        };
        *out = Box::into_raw(Box::new(QrGram { gram }));
        QrStatus::Ok
    })
}

/// Upstairs Gram matrix of the invariant monomial basis.
///
/// # Safety
/// `action` must be a live handle and `out` valid for a write. Release the
/// result with [`qr_gram_free`].
#[no_mangle]
pub unsafe extern "C" fn qr_gram_upstairs(
    action: *const QrAction,
    k: u32,
    twist: QrTwist,
    norm_def: u8,
    samples: usize,
    seed: u64,
    out: *mut *mut QrGram,
) -> QrStatus {
    gram_common(action, k, twist, norm_def, samples, seed, out, false)
}

/// Downstairs (reduced) Gram matrix of the descended basis.
///
/// # Safety
/// `action` must be a live handle and `out` valid for a write. Release the
/// result with [`qr_gram_free`].
#[no_mangle]
pub unsafe extern "C" fn qr_gram_downstairs(
    action: *const QrAction,
    k: u32,
    twist: QrTwist,
    norm_def: u8,
    samples: usize,
    seed: u64,
    out: *mut *mut QrGram,
) -> QrStatus {
    gram_common(action, k, twist, norm_def, samples, seed, out, true)
}

/// Release a Gram handle (null is ignored).
///
/// # Safety
/// `gram` must be null or a live handle from this library.
#[no_mangle]
pub unsafe extern "C" fn qr_gram_free(gram: *mut QrGram) {
    if !gram.is_null() {
        drop(Box::from_raw(gram));
    }
}

/// Matrix dimension.
///
/// # Safety
/// `gram` must be a live handle and `out` valid for a write.
#[no_mangle]
pub unsafe extern "C" fn qr_gram_dim(gram: *const QrGram, out: *mut usize) -> QrStatus {
    guard(|| {
        non_null!(gram, out);
        *out = (*gram).gram.matrix.len();
        QrStatus::Ok
    })
}

/// Entry `(i, j)` with its Monte Carlo standard error.
///
/// # Safety
/// `gram` must be a live handle; `re`, `im` and `stderr` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn qr_gram_entry(
    gram: *const QrGram,
    i: usize,
    j: usize,
    re: *mut f64,
    im: *mut f64,
    stderr: *mut f64,
) -> QrStatus {
    guard(|| {
        non_null!(gram, re, im, stderr);
        let g = &(*gram).gram;
        let n = g.matrix.len();
        if i >= n || j >= n {
            return fail(QrStatus::OutOfRange, format!("entry ({i}, {j}) outside a {n}×{n} matrix"));
        }
        *re = g.matrix[i][j].re;
        *im = g.matrix[i][j].im;
        *stderr = g.mc_error[i][j];
        QrStatus::Ok
    })
}

/// Unitarity defect `max |λ − 1|` of the generalized eigenproblem
/// `G_down v = λ G_up v`.
///
/// # Safety
/// Both handles must be live; `value` and `stderr` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn qr_unitarity_defect(
    up: *const QrGram,
    down: *const QrGram,
    value: *mut f64,
    stderr: *mut f64,
) -> QrStatus {
    guard(|| {
        non_null!(up, down, value, stderr);
        let d = try_qr!(defect_from_grams(&(*up).gram, &(*down).gram));
        *value = d.defect.value;
        *stderr = d.defect.stderr;
        QrStatus::Ok
    })
}

/// Parse and validate a scenario (JSON text). On failure every violation
/// is listed in the error message, one per line.
///
/// # Safety
/// `json` must be a valid NUL-terminated string and `out` valid for a
/// write. Release the handle with [`qr_scenario_free`].
#[no_mangle]
pub unsafe extern "C" fn qr_scenario_from_json(json: *const c_char, out: *mut *mut QrScenario) -> QrStatus {
    guard(|| {
        non_null!(json, out);
        let text = match str_arg(json) {
            Ok(s) => s,
            Err(s) => return s,
        };
        match validate_with(text, &Overrides::default()) {
            Ok(scenario) => {
                *out = Box::into_raw(Box::new(QrScenario { scenario }));
                QrStatus::Ok
            }
            Err(issues) => fail(
                QrStatus::Config,
                issues.iter().map(|i| i.to_string()).collect::<Vec<_>>().join("\n"),
            ),
        }
    })
}

/// Release a scenario handle (null is ignored).
///
/// # Safety
/// `scenario` must be null or a live handle from this library.
#[no_mangle]
pub unsafe extern "C" fn qr_scenario_free(scenario: *mut QrScenario) {
    if !scenario.is_null() {
        drop(Box::from_raw(scenario));
    }
}

/// Write the scenario description into `buf` (NUL-terminated). `needed`
/// receives the full length including the terminator; if `buf_len` is too
/// small nothing is written and [`QrStatus::OutOfRange`] is returned.
///
/// # Safety
/// `scenario` must be a live handle, `needed` valid for a write, and `buf`
/// valid for `buf_len` writes (it may be null when `buf_len` is 0).
#[no_mangle]
pub unsafe extern "C" fn qr_scenario_describe(
    scenario: *const QrScenario,
    buf: *mut c_char,
    buf_len: usize,
    needed: *mut usize,
) -> QrStatus {
    guard(|| {
        non_null!(scenario, needed);
        let text = try_qr!(describe(&(*scenario).scenario));
        let bytes = text.as_bytes();
        *needed = bytes.len() + 1;
        if buf.is_null() || buf_len < bytes.len() + 1 {
            return fail(QrStatus::OutOfRange, format!("buffer needs {} bytes", bytes.len() + 1));
        }
        std::ptr::copy_nonoverlapping(bytes.as_ptr(), buf as *mut u8, bytes.len());
        *buf.add(bytes.len()) = 0;
        QrStatus::Ok
    })
}

/// Run the scenario, writing its outputs into `out_dir` (or the scenario's
/// own `output_dir` when `out_dir` is null).
///
/// # Safety
/// `scenario` must be a live handle; `out_dir` null or a valid
/// NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn qr_scenario_run(scenario: *const QrScenario, out_dir: *const c_char) -> QrStatus {
    guard(|| {
        non_null!(scenario);
        let mut s = (*scenario).scenario.clone();
        if !out_dir.is_null() {
            match str_arg(out_dir) {
                Ok(d) => s.output_dir = PathBuf::from(d),
                Err(st) => return st,
            }
        }
        try_qr!(run(&s));
        QrStatus::Ok
    })
}
