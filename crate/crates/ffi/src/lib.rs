//! C ABI over `dynct`.
//!
//! Objects are opaque heap handles created by `dynct_*_new`/`_read`/...
//! functions and released with the matching `_free`. Every fallible call
//! returns a [`DynctStatus`]; on failure a message is kept per thread and can
//! be fetched with [`dynct_last_error_message`]. Panics never cross the
//! boundary; they surface as `DYNCT_ERR_PANIC`.
//!
//! Handles are not synchronised: a handle may be moved between threads but
//! must not be used from two threads at once.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use dynct::cli;
use dynct::config::RunConfig;
use dynct::io::{self, ImageFile, Meta, SinogramFile};
use dynct::metrics;
use dynct::solver::{Fidelity, JointResult};
use dynct::{Error, ImageSequence};

/// Result code of every fallible call.
#[repr(C)]
#[allow(non_camel_case_types)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DynctStatus {
    DYNCT_OK = 0,
    DYNCT_ERR_NULL_POINTER = 1,
    DYNCT_ERR_INVALID_ARGUMENT = 2,
    DYNCT_ERR_DIMENSION_MISMATCH = 3,
    DYNCT_ERR_NO_CONVERGENCE = 4,
    DYNCT_ERR_SOLVER_ABORT = 5,
    DYNCT_ERR_CORRUPT_FILE = 6,
    DYNCT_ERR_IO = 7,
    DYNCT_ERR_CONFIG = 8,
    DYNCT_ERR_BUFFER_TOO_SMALL = 9,
    DYNCT_ERR_PANIC = 10,
}

use DynctStatus::*;

/// Data fidelity selector for [`dynct_reconstruct`].
#[repr(C)]
#[allow(non_camel_case_types)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DynctFidelity {
    /// Use the fidelity in the configuration.
    DYNCT_FIDELITY_CONFIG = 0,
    DYNCT_FIDELITY_L1 = 1,
    DYNCT_FIDELITY_L2 = 2,
}

/// Run configuration.
pub struct DynctConfig(RunConfig);

/// Image sequence of `n_t` frames, each `n × n`, row-major.
pub struct DynctImages(ImageSequence);

/// Measured sinogram with its geometry.
pub struct DynctSinogram(SinogramFile);

/// Output of a joint reconstruction.
pub struct DynctResult(JointResult);

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn status_of(e: &Error) -> DynctStatus {
    match e {
        Error::InvalidArgument(_) => DYNCT_ERR_INVALID_ARGUMENT,
        Error::DimensionMismatch(_) => DYNCT_ERR_DIMENSION_MISMATCH,
        Error::NoConvergence { .. } => DYNCT_ERR_NO_CONVERGENCE,
        Error::SolverAbort(_) => DYNCT_ERR_SOLVER_ABORT,
        Error::CorruptFile { .. } => DYNCT_ERR_CORRUPT_FILE,
        Error::Io { .. } => DYNCT_ERR_IO,
        Error::Config(_) => DYNCT_ERR_CONFIG,
    }
}

enum Failure {
    Status(DynctStatus, String),
    Core(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

fn null(what: &str) -> Failure {
    Failure::Status(DYNCT_ERR_NULL_POINTER, format!("{what} is null"))
}

/// Runs `f`, converting errors and panics into a status code.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> DynctStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            DYNCT_OK
        }
        Ok(Err(Failure::Core(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Ok(Err(Failure::Status(s, msg))) => {
            set_error(msg);
            s
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            DYNCT_ERR_PANIC
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure::Status(DYNCT_ERR_INVALID_ARGUMENT, format!("{what} is not valid UTF-8")))
}

unsafe fn ref_arg<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn put<T>(out: *mut *mut T, value: T, what: &str) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null(what));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

unsafe fn free<T>(p: *mut T) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}

/// Copies the calling thread's last error message into `buf` (NUL
/// terminated, truncated to `len`). Returns the full message length in bytes
/// excluding the terminator.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn dynct_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            ptr::copy_nonoverlapping(msg.as_ptr(), buf.cast::<u8>(), n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn dynct_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Pinball configuration on an `n × n × n_t` grid with default settings.
///
/// # Safety
/// `out` must be a valid pointer to writable storage for a handle.
#[no_mangle]
pub unsafe extern "C" fn dynct_config_pinball(n: usize, n_t: usize, out: *mut *mut DynctConfig) -> DynctStatus {
    guard(|| {
        let c = RunConfig::pinball(n, n_t);
        c.validate()?;
        put(out, DynctConfig(c), "out")
    })
}

/// Parses a TOML configuration.
///
/// # Safety
/// `toml` must be a NUL-terminated string; `out` a valid handle slot.
#[no_mangle]
pub unsafe extern "C" fn dynct_config_from_toml(toml: *const c_char, out: *mut *mut DynctConfig) -> DynctStatus {
    guard(|| {
        let text = str_arg(toml, "toml")?;
        put(out, DynctConfig(RunConfig::from_toml(text)?), "out")
    })
}

/// Sets the global seed.
///
/// # Safety
/// `cfg` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn dynct_config_set_seed(cfg: *mut DynctConfig, seed: u64) -> DynctStatus {
    guard(|| {
        let c = cfg.as_mut().ok_or_else(|| null("cfg"))?;
        let mut next = c.0.clone();
        next.seed = seed;
        next.validate()?;
        c.0 = next;
        Ok(())
    })
}

/// # Safety
/// `cfg` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn dynct_config_free(cfg: *mut DynctConfig) {
    free(cfg)
}

/// Creates an image sequence by copying `n_t·n·n` values from `data`.
///
/// # Safety
/// `data` must point to `n_t·n·n` doubles; `out` a valid handle slot.
#[no_mangle]
pub unsafe extern "C" fn dynct_images_new(
    n_t: usize,
    n: usize,
    data: *const f64,
    out: *mut *mut DynctImages,
) -> DynctStatus {
    guard(|| {
        if data.is_null() {
            return Err(null("data"));
        }
        let len = n_t
            .checked_mul(n)
            .and_then(|x| x.checked_mul(n))
            .ok_or_else(|| Failure::Status(DYNCT_ERR_INVALID_ARGUMENT, "size overflow".into()))?;
        let v = std::slice::from_raw_parts(data, len).to_vec();
        put(out, DynctImages(ImageSequence::from_vec(n_t, n, v)?), "out")
    })
}

/// # Safety
/// `img` must be a live handle; `n_t`, `n` valid pointers.
#[no_mangle]
pub unsafe extern "C" fn dynct_images_shape(img: *const DynctImages, n_t: *mut usize, n: *mut usize) -> DynctStatus {
    guard(|| {
        let i = ref_arg(img, "img")?;
        if n_t.is_null() || n.is_null() {
            return Err(null("shape output"));
        }
        let (t, side, _) = i.0.shape();
        *n_t = t;
        *n = side;
        Ok(())
    })
}

/// Copies all values into `buf`, which must hold `n_t·n·n` doubles.
///
/// # Safety
/// `img` must be a live handle; `buf` must point to `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn dynct_images_copy(img: *const DynctImages, buf: *mut f64, len: usize) -> DynctStatus {
    guard(|| {
        let i = ref_arg(img, "img")?;
        if buf.is_null() {
            return Err(null("buf"));
        }
        let src = i.0.as_slice();
        if len < src.len() {
            return Err(Failure::Status(
                DYNCT_ERR_BUFFER_TOO_SMALL,
                format!("buffer holds {len} values, need {}", src.len()),
            ));
        }
        ptr::copy_nonoverlapping(src.as_ptr(), buf, src.len());
        Ok(())
    })
}

/// # Safety
/// `path` must be a NUL-terminated string; `out` a valid handle slot.
#[no_mangle]
pub unsafe extern "C" fn dynct_images_read(path: *const c_char, out: *mut *mut DynctImages) -> DynctStatus {
    guard(|| {
        let p = PathBuf::from(str_arg(path, "path")?);
        put(out, DynctImages(io::read_images(&p)?.images), "out")
    })
}

/// # Safety
/// `img` must be a live handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn dynct_images_write(img: *const DynctImages, path: *const c_char) -> DynctStatus {
    guard(|| {
        let i = ref_arg(img, "img")?;
        let p = PathBuf::from(str_arg(path, "path")?);
        io::write_images(
            &p,
            &ImageFile {
                meta: Meta::new(),
                images: i.0.clone(),
            },
        )?;
        Ok(())
    })
}

/// # Safety
/// `img` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn dynct_images_free(img: *mut DynctImages) {
    free(img)
}

/// Renders the phantom and simulates its sinogram under `protocol` (null
/// for the configured one). Either output slot may be null.
///
/// # Safety
/// `cfg` must be a live handle; `protocol` null or NUL-terminated; output
/// slots null or valid.
#[no_mangle]
pub unsafe extern "C" fn dynct_simulate(
    cfg: *const DynctConfig,
    protocol: *const c_char,
    sinogram: *mut *mut DynctSinogram,
    truth: *mut *mut DynctImages,
) -> DynctStatus {
    guard(|| {
        let c = ref_arg(cfg, "cfg")?;
        let name = if protocol.is_null() {
            c.0.schedule.protocol.clone()
        } else {
            str_arg(protocol, "protocol")?.to_string()
        };
        let sim = cli::simulate(&c.0, &name)?;
        if !sinogram.is_null() {
            put(sinogram, DynctSinogram(sim.sinogram), "sinogram")?;
        }
        if !truth.is_null() {
            put(truth, DynctImages(sim.truth), "truth")?;
        }
        Ok(())
    })
}

/// Number of time steps and total measured rays.
///
/// # Safety
/// `s` must be a live handle; outputs valid pointers.
#[no_mangle]
pub unsafe extern "C" fn dynct_sinogram_size(
    s: *const DynctSinogram,
    n_steps: *mut usize,
    total_rays: *mut usize,
) -> DynctStatus {
    guard(|| {
        let s = ref_arg(s, "sinogram")?;
        if n_steps.is_null() || total_rays.is_null() {
            return Err(null("size output"));
        }
        *n_steps = s.0.stack.n_t();
        *total_rays = s.0.stack.total_rays();
        Ok(())
    })
}

/// # Safety
/// `path` must be a NUL-terminated string; `out` a valid handle slot.
#[no_mangle]
pub unsafe extern "C" fn dynct_sinogram_read(path: *const c_char, out: *mut *mut DynctSinogram) -> DynctStatus {
    guard(|| {
        let p = PathBuf::from(str_arg(path, "path")?);
        put(out, DynctSinogram(io::read_sinogram(&p)?), "out")
    })
}

/// # Safety
/// `s` must be a live handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn dynct_sinogram_write(s: *const DynctSinogram, path: *const c_char) -> DynctStatus {
    guard(|| {
        let s = ref_arg(s, "sinogram")?;
        let p = PathBuf::from(str_arg(path, "path")?);
        io::write_sinogram(&p, &s.0)?;
        Ok(())
    })
}

/// # Safety
/// `s` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn dynct_sinogram_free(s: *mut DynctSinogram) {
    free(s)
}

/// Runs the joint reconstruction with the solver settings of `cfg`.
///
/// # Safety
/// `s`, `cfg` must be live handles; `out` a valid handle slot.
#[no_mangle]
pub unsafe extern "C" fn dynct_reconstruct(
    s: *const DynctSinogram,
    cfg: *const DynctConfig,
    fidelity: DynctFidelity,
    out: *mut *mut DynctResult,
) -> DynctStatus {
    guard(|| {
        let s = ref_arg(s, "sinogram")?;
        let c = ref_arg(cfg, "cfg")?;
        let f = match fidelity {
            DynctFidelity::DYNCT_FIDELITY_CONFIG => c.0.solver.fidelity,
            DynctFidelity::DYNCT_FIDELITY_L1 => Fidelity::L1,
            DynctFidelity::DYNCT_FIDELITY_L2 => Fidelity::L2,
        };
        let params = c.0.solver_params(f)?;
        put(out, DynctResult(cli::reconstruct(&s.0, &params)?), "out")
    })
}

/// Copies the reconstructed image sequence into a new handle.
///
/// # Safety
/// `r` must be a live handle; `out` a valid handle slot.
#[no_mangle]
pub unsafe extern "C" fn dynct_result_images(r: *const DynctResult, out: *mut *mut DynctImages) -> DynctStatus {
    guard(|| {
        let r = ref_arg(r, "result")?;
        put(out, DynctImages(r.0.u.clone()), "out")
    })
}

/// Outer iteration count and whether the outer tolerance was reached.
///
/// # Safety
/// `r` must be a live handle; outputs valid pointers.
#[no_mangle]
pub unsafe extern "C" fn dynct_result_status(
    r: *const DynctResult,
    outer_iterations: *mut usize,
    converged: *mut bool,
) -> DynctStatus {
    guard(|| {
        let r = ref_arg(r, "result")?;
        if outer_iterations.is_null() || converged.is_null() {
            return Err(null("status output"));
        }
        *outer_iterations = r.0.energy_trace.len();
        *converged = r.0.converged;
        Ok(())
    })
}

/// Copies the joint energy after each outer iteration into `buf`.
///
/// # Safety
/// `r` must be a live handle; `buf` must point to `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn dynct_result_energy_trace(r: *const DynctResult, buf: *mut f64, len: usize) -> DynctStatus {
    guard(|| {
        let r = ref_arg(r, "result")?;
        if buf.is_null() {
            return Err(null("buf"));
        }
        let t = &r.0.energy_trace;
        if len < t.len() {
            return Err(Failure::Status(
                DYNCT_ERR_BUFFER_TOO_SMALL,
                format!("buffer holds {len} values, need {}", t.len()),
            ));
        }
        ptr::copy_nonoverlapping(t.as_ptr(), buf, t.len());
        Ok(())
    })
}

/// # Safety
/// `r` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn dynct_result_free(r: *mut DynctResult) {
    free(r)
}

/// Relative ℓ₁ and ℓ₂ errors and mean per-frame SSIM of `recon` against
/// `truth`.
///
/// # Safety
/// Handles must be live; outputs valid pointers.
#[no_mangle]
pub unsafe extern "C" fn dynct_evaluate(
    recon: *const DynctImages,
    truth: *const DynctImages,
    rel_l1: *mut f64,
    rel_l2: *mut f64,
    ssim: *mut f64,
) -> DynctStatus {
    guard(|| {
        let r = ref_arg(recon, "recon")?;
        let t = ref_arg(truth, "truth")?;
        if rel_l1.is_null() || rel_l2.is_null() || ssim.is_null() {
            return Err(null("metric output"));
        }
        let m = metrics::evaluate("ffi", &r.0, &t.0, None)?;
        *rel_l1 = m.rel_l1;
        *rel_l2 = m.rel_l2;
        *ssim = m.ssim;
        Ok(())
    })
}
