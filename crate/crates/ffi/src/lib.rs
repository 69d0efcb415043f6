//! C ABI for `padro`.
//!
//! Objects cross the boundary as opaque handles that the caller releases with
//! the matching `*_free` function. Every entry point returns a
//! [`PadroStatus`]; on failure a message is kept per thread and can be read
//! with [`padro_last_error`]. Matrices are dense and row-major.
//!
//! Panics never unwind into the caller: they are caught and reported as
//! [`PadroStatus::Panic`].

use std::cell::RefCell;
use std::ffi::{c_char, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use nalgebra::{DMatrix, DVector};
use padro::dual::MonteCarloDual;
use padro::optimizer::{bisect_lambda, BisectionConfig, Boundary, BsmdConfig, SolveReport};
use padro::ot::{entropic_w1, DiscreteMeasure, SinkhornOptions};
use padro::{
    AnisotropicGaussianFamily, DualProblem, EmpiricalJoint, Error, IsotropicGaussianFamily, PerturbationFamily,
    Reconstructor, RngStream,
};

/// Result code of every call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PadroStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    DimensionMismatch = 3,
    Singular = 4,
    Diverged = 5,
    NotConverged = 6,
    Io = 7,
    /// Caller-provided buffer is too small; the required length is reported.
    BufferTooSmall = 8,
    Panic = 9,
}

/// Which end of the multiplier interval the solution sits on.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PadroBoundary {
    Interior = 0,
    Lower = 1,
    Upper = 2,
}

/// Solver settings; start from [`padro_solve_options_default`].
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PadroSolveOptions {
    pub epsilon: f64,
    pub delta: f64,
    /// Largest admissible covariance eigenvalue.
    pub sigma_max: f64,
    pub initial_variance: f64,
    pub lambda_lo: f64,
    pub lambda_hi: f64,
    pub lambda_tolerance: f64,
    pub lambda_max_iters: usize,
    pub iters: usize,
    pub lr_g: f64,
    pub lr_q: f64,
    pub batch_anchors: usize,
    pub seed: u64,
}

/// Training pairs `(x_i, y_i)`.
pub struct PadroDataset {
    inner: EmpiricalJoint,
}

enum Family {
    Isotropic(IsotropicGaussianFamily),
    Anisotropic(AnisotropicGaussianFamily),
}

/// Output of a solve.
pub struct PadroSolution {
    g: Reconstructor,
    family: Family,
    lambda: f64,
    value: f64,
    std_error: f64,
    boundary: PadroBoundary,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(err: &Error) -> PadroStatus {
    match err {
        Error::DimensionMismatch { .. } => PadroStatus::DimensionMismatch,
        Error::Singular(_) => PadroStatus::Singular,
        Error::Diverged { .. } => PadroStatus::Diverged,
        Error::NotConverged { .. } => PadroStatus::NotConverged,
        Error::Io(_) | Error::Idx { .. } => PadroStatus::Io,
        _ => PadroStatus::InvalidArgument,
    }
}

/// Runs `body`, converting errors and panics into a status.
fn guard(body: impl FnOnce() -> Result<(), (PadroStatus, String)>) -> PadroStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            PadroStatus::Ok
        }
        Ok(Err((status, message))) => {
            set_last_error(message);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_last_error(format!("panic: {msg}"));
            PadroStatus::Panic
        }
    }
}

fn lib_err(err: Error) -> (PadroStatus, String) {
    (status_of(&err), err.to_string())
}

fn null(name: &str) -> (PadroStatus, String) {
    (PadroStatus::NullPointer, format!("`{name}` is null"))
}

fn invalid(msg: impl Into<String>) -> (PadroStatus, String) {
    (PadroStatus::InvalidArgument, msg.into())
}

/// # Safety
/// `p` must be null or point to `len` readable values.
unsafe fn slice<'a, T>(p: *const T, len: usize, name: &str) -> Result<&'a [T], (PadroStatus, String)> {
    if p.is_null() {
        return Err(null(name));
    }
    // SAFETY: non-null, and the caller promises `len` readable elements.
    Ok(unsafe { std::slice::from_raw_parts(p, len) })
}

fn rows(data: &[f64], n: usize, dim: usize) -> Vec<DVector<f64>> {
    (0..n)
        .map(|i| DVector::from_row_slice(&data[i * dim..(i + 1) * dim]))
        .collect()
}

/// Copies `values` into a caller buffer of capacity `len`.
///
/// # Safety
/// `out` must be null or point to `len` writable values.
unsafe fn write_out(values: &[f64], out: *mut f64, len: usize) -> Result<(), (PadroStatus, String)> {
    if out.is_null() {
        return Err(null("out"));
    }
    if len < values.len() {
        return Err((
            PadroStatus::BufferTooSmall,
            format!("buffer holds {len} values, {} needed", values.len()),
        ));
    }
    // SAFETY: `out` has room for `len >= values.len()` values and cannot
    // overlap the Rust-owned `values`.
    unsafe { ptr::copy_nonoverlapping(values.as_ptr(), out, values.len()) };
    Ok(())
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next call into this library from the same thread.
#[no_mangle]
pub extern "C" fn padro_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Static NUL-terminated version string.
#[no_mangle]
pub extern "C" fn padro_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Library defaults for the 2×2 inversion experiments.
#[no_mangle]
pub extern "C" fn padro_solve_options_default() -> PadroSolveOptions {
    let b = BisectionConfig::default();
    let s = BsmdConfig::default();
    PadroSolveOptions {
        epsilon: 0.001,
        delta: 0.1,
        sigma_max: 10.0,
        initial_variance: 5.0,
        lambda_lo: b.lambda_lo,
        lambda_hi: b.lambda_hi,
        lambda_tolerance: b.tolerance,
        lambda_max_iters: b.max_iters,
        iters: s.iters,
        lr_g: s.lr_g,
        lr_q: s.lr_q,
        batch_anchors: s.batch_anchors,
        seed: 0,
    }
}

/// Builds a dataset from `n` pairs; `xs` is `n × x_dim` and `ys` is
/// `n × y_dim`, both row-major.
///
/// # Safety
/// `xs` and `ys` must point to `n·x_dim` and `n·y_dim` readable doubles and
/// `out` to writable storage for one handle.
#[no_mangle]
pub unsafe extern "C" fn padro_dataset_new(
    xs: *const f64,
    ys: *const f64,
    n: usize,
    x_dim: usize,
    y_dim: usize,
    out: *mut *mut PadroDataset,
) -> PadroStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        if n == 0 || x_dim == 0 || y_dim == 0 {
            return Err(invalid("n, x_dim and y_dim must be positive"));
        }
        let len_x = n.checked_mul(x_dim).ok_or_else(|| invalid("n·x_dim overflows"))?;
        let len_y = n.checked_mul(y_dim).ok_or_else(|| invalid("n·y_dim overflows"))?;
        // SAFETY: lengths as promised by the caller.
        let (xs, ys) = unsafe { (slice(xs, len_x, "xs")?, slice(ys, len_y, "ys")?) };
        let inner = EmpiricalJoint::new(rows(xs, n, x_dim), rows(ys, n, y_dim)).map_err(lib_err)?;
        // SAFETY: `out` is non-null and writable.
        unsafe { *out = Box::into_raw(Box::new(PadroDataset { inner })) };
        Ok(())
    })
}

/// Number of pairs, or 0 for a null handle.
///
/// # Safety
/// `dataset` must be null or a live handle from [`padro_dataset_new`].
#[no_mangle]
pub unsafe extern "C" fn padro_dataset_len(dataset: *const PadroDataset) -> usize {
    // SAFETY: null or live handle.
    unsafe { dataset.as_ref() }.map_or(0, |d| d.inner.len())
}

/// Releases a dataset; null is ignored.
///
/// # Safety
/// `dataset` must be null or a live handle that is not used afterwards.
#[no_mangle]
pub unsafe extern "C" fn padro_dataset_free(dataset: *mut PadroDataset) {
    if !dataset.is_null() {
        // SAFETY: allocated by `Box::into_raw` in `padro_dataset_new`.
        drop(unsafe { Box::from_raw(dataset) });
    }
}

fn to_configs(o: &PadroSolveOptions) -> (BisectionConfig, BsmdConfig) {
    (
        BisectionConfig {
            lambda_lo: o.lambda_lo,
            lambda_hi: o.lambda_hi,
            tolerance: o.lambda_tolerance,
            max_iters: o.lambda_max_iters,
            log_scale: true,
        },
        BsmdConfig {
            iters: o.iters,
            lr_g: o.lr_g,
            lr_q: o.lr_q,
            batch_anchors: o.batch_anchors,
            ..BsmdConfig::default()
        },
    )
}

fn finish<F: PerturbationFamily>(report: SolveReport<F>, wrap: impl FnOnce(F) -> Family) -> PadroSolution {
    PadroSolution {
        g: report.g_opt,
        family: wrap(report.family_opt),
        lambda: report.lambda_opt,
        value: report.value,
        std_error: report.diagnostics.std_error,
        boundary: match report.diagnostics.boundary {
            None => PadroBoundary::Interior,
            Some(Boundary::Lower) => PadroBoundary::Lower,
            Some(Boundary::Upper) => PadroBoundary::Upper,
        },
    }
}

/// # Safety
/// Same contract as [`padro_solve`].
unsafe fn solve_impl(
    dataset: *const PadroDataset,
    forward: *const f64,
    options: *const PadroSolveOptions,
    anisotropic: bool,
    out: *mut *mut PadroSolution,
) -> Result<(), (PadroStatus, String)> {
    if out.is_null() {
        return Err(null("out"));
    }
    // SAFETY: null or live handle / readable options.
    let data = unsafe { dataset.as_ref() }.ok_or_else(|| null("dataset"))?;
    let opts = unsafe { options.as_ref() }
        .copied()
        .unwrap_or_else(|| padro_solve_options_default());
    let (dy, dx) = (data.inner.y_dim(), data.inner.x_dim());
    // SAFETY: the caller promises `y_dim·x_dim` readable doubles.
    let h = DMatrix::from_row_slice(dy, dx, unsafe { slice(forward, dy * dx, "forward")? });
    let problem = DualProblem::new(opts.epsilon, opts.delta).map_err(lib_err)?;
    let model = MonteCarloDual::new(problem, &data.inner);
    let (bisection, bsmd) = to_configs(&opts);
    let g0 = Reconstructor::scaled_adjoint(&h).into_matrix();
    let rng = RngStream::new(opts.seed, 0);
    let solution = if anisotropic {
        let fam =
            AnisotropicGaussianFamily::isotropic_start(h, opts.initial_variance, opts.sigma_max).map_err(lib_err)?;
        finish(
            bisect_lambda(&model, g0, fam, &bisection, &bsmd, rng).map_err(lib_err)?,
            Family::Anisotropic,
        )
    } else {
        let fam = IsotropicGaussianFamily::new(h, opts.initial_variance, opts.sigma_max).map_err(lib_err)?;
        finish(
            bisect_lambda(&model, g0, fam, &bisection, &bsmd, rng).map_err(lib_err)?,
            Family::Isotropic,
        )
    };
    // SAFETY: `out` is non-null and writable.
    unsafe { *out = Box::into_raw(Box::new(solution)) };
    Ok(())
}

/// Solves for the robust reconstructor with a Gaussian perturbation of the
/// measurement channel: isotropic when `anisotropic` is false, full
/// covariance otherwise.
///
/// `forward` is the `y_dim × x_dim` operator. A null `options` means
/// [`padro_solve_options_default`].
///
/// # Safety
/// `dataset` must be a live handle, `forward` must point to `y_dim·x_dim`
/// readable doubles, `options` must be null or readable, and `out` must be
/// writable storage for one handle.
#[no_mangle]
pub unsafe extern "C" fn padro_solve(
    dataset: *const PadroDataset,
    forward: *const f64,
    options: *const PadroSolveOptions,
    anisotropic: bool,
    out: *mut *mut PadroSolution,
) -> PadroStatus {
    // SAFETY: forwarded contract.
    guard(|| unsafe { solve_impl(dataset, forward, options, anisotropic, out) })
}

/// # Safety
/// `solution` must be null or a live handle.
unsafe fn solution_ref<'a>(solution: *const PadroSolution) -> Result<&'a PadroSolution, (PadroStatus, String)> {
    // SAFETY: null or live handle.
    unsafe { solution.as_ref() }.ok_or_else(|| null("solution"))
}

/// Copies the `x_dim × y_dim` reconstructor (row-major) into `out`.
///
/// # Safety
/// `solution` must be a live handle and `out` must point to `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn padro_solution_reconstructor(
    solution: *const PadroSolution,
    out: *mut f64,
    len: usize,
) -> PadroStatus {
    guard(|| {
        // SAFETY: forwarded contract.
        let s = unsafe { solution_ref(solution)? };
        let values: Vec<f64> = s.g.matrix().transpose().iter().copied().collect();
        unsafe { write_out(&values, out, len) }
    })
}

/// Copies the `y_dim × y_dim` perturbation covariance (row-major) into `out`.
///
/// # Safety
/// `solution` must be a live handle and `out` must point to `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn padro_solution_covariance(
    solution: *const PadroSolution,
    out: *mut f64,
    len: usize,
) -> PadroStatus {
    guard(|| {
        // SAFETY: forwarded contract.
        let s = unsafe { solution_ref(solution)? };
        let cov = match &s.family {
            Family::Isotropic(f) => f.covariance(),
            Family::Anisotropic(f) => f.covariance(),
        };
        let values: Vec<f64> = cov.transpose().iter().copied().collect();
        unsafe { write_out(&values, out, len) }
    })
}

/// Scalar results of a solve.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PadroSolutionSummary {
    pub lambda: f64,
    pub value: f64,
    pub std_error: f64,
    pub boundary: PadroBoundary,
    pub x_dim: usize,
    pub y_dim: usize,
}

/// # Safety
/// `solution` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn padro_solution_summary(
    solution: *const PadroSolution,
    out: *mut PadroSolutionSummary,
) -> PadroStatus {
    guard(|| {
        // SAFETY: forwarded contract.
        let s = unsafe { solution_ref(solution)? };
        if out.is_null() {
            return Err(null("out"));
        }
        let summary = PadroSolutionSummary {
            lambda: s.lambda,
            value: s.value,
            std_error: s.std_error,
            boundary: s.boundary,
            x_dim: s.g.x_dim(),
            y_dim: s.g.y_dim(),
        };
        // SAFETY: non-null and writable.
        unsafe { *out = summary };
        Ok(())
    })
}

/// Releases a solution; null is ignored.
///
/// # Safety
/// `solution` must be null or a live handle that is not used afterwards.
#[no_mangle]
pub unsafe extern "C" fn padro_solution_free(solution: *mut PadroSolution) {
    if !solution.is_null() {
        // SAFETY: allocated by `Box::into_raw` in `padro_solve`.
        drop(unsafe { Box::from_raw(solution) });
    }
}

/// Entropy-regularized transport value between two discrete measures with
/// Euclidean ground cost; atoms are row-major `n × dim` and `m × dim`.
///
/// # Safety
/// Pointers must reference `n·dim`, `n`, `m·dim` and `m` readable doubles,
/// and `out_value` one writable double.
#[no_mangle]
pub unsafe extern "C" fn padro_entropic_w1(
    mu_atoms: *const f64,
    mu_weights: *const f64,
    n: usize,
    nu_atoms: *const f64,
    nu_weights: *const f64,
    m: usize,
    dim: usize,
    delta: f64,
    out_value: *mut f64,
) -> PadroStatus {
    guard(|| {
        if out_value.is_null() {
            return Err(null("out_value"));
        }
        if n == 0 || m == 0 || dim == 0 {
            return Err(invalid("n, m and dim must be positive"));
        }
        // SAFETY: lengths as promised by the caller.
        let (ma, mw, na, nw) = unsafe {
            (
                slice(mu_atoms, n * dim, "mu_atoms")?,
                slice(mu_weights, n, "mu_weights")?,
                slice(nu_atoms, m * dim, "nu_atoms")?,
                slice(nu_weights, m, "nu_weights")?,
            )
        };
        let mu = DiscreteMeasure::new(rows(ma, n, dim), mw.to_vec()).map_err(lib_err)?;
        let nu = DiscreteMeasure::new(rows(na, m, dim), nw.to_vec()).map_err(lib_err)?;
        let (value, _) = entropic_w1(&mu, &nu, delta, &SinkhornOptions::default()).map_err(lib_err)?;
        // SAFETY: non-null and writable.
        unsafe { *out_value = value };
        Ok(())
    })
}
