//! C ABI over the two-stage estimator.
//!
//! Conventions:
//! * every fallible call returns an [`OcStatus`]; on failure the message is
//!   available from [`oc_last_error_message`] until the next failing call on
//!   the same thread;
//! * handles ([`OcConfig`], [`OcEstimator`]) are opaque, created by a
//!   `*_new`/`*_load` call and released with the matching `*_free`;
//! * complex matrices are interleaved `(re, im)` doubles in column-major
//!   order: element `(r, c)` of an `rows x cols` matrix lives at
//!   `2 * (r + c * rows)`.

use std::cell::RefCell;
use std::ffi::{c_char, c_int, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use num_complex::Complex64;
use onebit_ce::cgan::CganModel;
use onebit_ce::channel::{draw_channel, ArrayGeometry, Domain, PathCount};
use onebit_ce::config::ExperimentConfig;
use onebit_ce::eval::nmse_db;
use onebit_ce::measurement::{generate_pilots, observe, NoiseModel, PilotMatrix, PilotScheme};
use nalgebra::DMatrix;
use onebit_ce::pipeline::{self, Layout};
use onebit_ce::ridnet::RidnetModel;
use onebit_ce::Error;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OcStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    InvalidState = 3,
    Config = 4,
    Io = 5,
    Format = 6,
    MissingPrerequisite = 7,
    Diverged = 8,
    Panic = 9,
}

/// Representation a channel matrix is expressed in.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OcDomain {
    Spatial = 0,
    Angular = 1,
}

impl From<OcDomain> for Domain {
    fn from(d: OcDomain) -> Self {
        match d {
            OcDomain::Spatial => Domain::Spatial,
            OcDomain::Angular => Domain::Angular,
        }
    }
}

/// Experiment configuration.
pub struct OcConfig {
    inner: ExperimentConfig,
}

/// A loaded stage-1 model with an optional stage-2 refiner.
pub struct OcEstimator {
    cgan: CganModel,
    ridnet: Option<RidnetModel>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> OcStatus {
    match e {
        Error::InvalidArgument(_) => OcStatus::InvalidArgument,
        Error::State(_) => OcStatus::InvalidState,
        Error::Config { .. } => OcStatus::Config,
        Error::Io { .. } => OcStatus::Io,
        Error::MissingPrerequisite(_) => OcStatus::MissingPrerequisite,
        Error::Diverged(_) => OcStatus::Diverged,
        _ => OcStatus::Format,
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

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> OcStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => OcStatus::Ok,
        Ok(Err(Fail::Null(what))) => {
            set_error(format!("null pointer: {what}"));
            OcStatus::NullPointer
        }
        Ok(Err(Fail::Core(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("internal panic: {msg}"));
            OcStatus::Panic
        }
    }
}

fn nonnull<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Fail> {
    // SAFETY: caller promises `p` is null or points to a live value.
    unsafe { p.as_ref() }.ok_or(Fail::Null(what))
}

fn nonnull_mut<'a, T>(p: *mut T, what: &'static str) -> Result<&'a mut T, Fail> {
    // SAFETY: as above, plus exclusive access for the duration of the call.
    unsafe { p.as_mut() }.ok_or(Fail::Null(what))
}

fn c_str<'a>(p: *const c_char, what: &'static str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    // SAFETY: non-null, and the caller promises a nul-terminated string.
    unsafe { CStr::from_ptr(p) }
        .to_str()
        .map_err(|_| Fail::Core(Error::InvalidArgument(format!("{what} is not valid UTF-8"))))
}

fn read_matrix(p: *const f64, rows: usize, cols: usize, what: &'static str) -> Result<DMatrix<Complex64>, Fail> {
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    // SAFETY: caller provides 2*rows*cols readable doubles.
    let s = unsafe { std::slice::from_raw_parts(p, 2 * rows * cols) };
    Ok(DMatrix::from_iterator(rows, cols, s.chunks_exact(2).map(|c| Complex64::new(c[0], c[1]))))
}

fn write_matrix(p: *mut f64, m: &DMatrix<Complex64>, what: &'static str) -> Result<(), Fail> {
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    // SAFETY: caller provides 2*rows*cols writable doubles.
    let s = unsafe { std::slice::from_raw_parts_mut(p, 2 * m.len()) };
    for (dst, z) in s.chunks_exact_mut(2).zip(m.iter()) {
        dst[0] = z.re;
        dst[1] = z.im;
    }
    Ok(())
}

fn put<T>(out: *mut *mut T, value: T) -> Result<(), Fail> {
    let slot = nonnull_mut(out, "output handle")?;
    *slot = Box::into_raw(Box::new(value));
    Ok(())
}

/// Message of the last failed call on this thread, or NULL. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn oc_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static nul-terminated string.
#[no_mangle]
pub extern "C" fn oc_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// New configuration holding the desk preset.
#[no_mangle]
pub extern "C" fn oc_config_new_desk(out: *mut *mut OcConfig) -> OcStatus {
    guard(|| {
        put(
            out,
            OcConfig {
                inner: ExperimentConfig::desk(),
            },
        )
    })
}

/// Parse a TOML configuration document.
#[no_mangle]
pub extern "C" fn oc_config_from_toml(text: *const c_char, out: *mut *mut OcConfig) -> OcStatus {
    guard(|| {
        let inner = ExperimentConfig::from_toml_str(c_str(text, "text")?)?;
        put(out, OcConfig { inner })
    })
}

#[no_mangle]
pub extern "C" fn oc_config_set_output_dir(cfg: *mut OcConfig, dir: *const c_char) -> OcStatus {
    guard(|| {
        let cfg = nonnull_mut(cfg, "config")?;
        cfg.inner.output_dir = PathBuf::from(c_str(dir, "dir")?);
        Ok(())
    })
}

/// Array size, users and pilot length of a configuration.
#[no_mangle]
pub extern "C" fn oc_config_dims(
    cfg: *const OcConfig,
    num_antennas: *mut usize,
    num_users: *mut usize,
    num_pilots: *mut usize,
) -> OcStatus {
    guard(|| {
        let c = &nonnull(cfg, "config")?.inner;
        *nonnull_mut(num_antennas, "num_antennas")? = c.num_antennas;
        *nonnull_mut(num_users, "num_users")? = c.num_users;
        *nonnull_mut(num_pilots, "num_pilots")? = c.num_pilots;
        Ok(())
    })
}

/// # Safety
/// `cfg` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn oc_config_free(cfg: *mut OcConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

/// Generate the training and test corpora under the configured output dir.
#[no_mangle]
pub extern "C" fn oc_generate_data(cfg: *const OcConfig) -> OcStatus {
    guard(|| {
        let c = &nonnull(cfg, "config")?.inner;
        pipeline::generate_data(c, &Layout::new(&c.output_dir))?;
        Ok(())
    })
}

/// Train the cGAN on the generated corpus (`resume != 0` extends the
/// existing checkpoint).
#[no_mangle]
pub extern "C" fn oc_train_cgan(cfg: *const OcConfig, resume: c_int) -> OcStatus {
    guard(|| {
        let c = &nonnull(cfg, "config")?.inner;
        let layout = Layout::new(&c.output_dir);
        let (train, _) = pipeline::load_data(c, &layout)?;
        pipeline::train_cgan_stage(c, &layout, &train, resume != 0)?;
        Ok(())
    })
}

/// Train a RIDNet in `domain` on top of the existing cGAN checkpoint.
#[no_mangle]
pub extern "C" fn oc_train_ridnet(cfg: *const OcConfig, domain: OcDomain, resume: c_int) -> OcStatus {
    guard(|| {
        let c = &nonnull(cfg, "config")?.inner;
        let layout = Layout::new(&c.output_dir);
        let (train, _) = pipeline::load_data(c, &layout)?;
        let cgan = pipeline::require_cgan(c, &layout)?;
        pipeline::train_ridnet_stage(c, &layout, &train, &cgan, domain.into(), resume != 0)?;
        Ok(())
    })
}

/// Load the trained checkpoints of `cfg`. With `refine != 0` the RIDNet of
/// `domain` is loaded as well.
#[no_mangle]
pub extern "C" fn oc_estimator_load(
    cfg: *const OcConfig,
    refine: c_int,
    domain: OcDomain,
    out: *mut *mut OcEstimator,
) -> OcStatus {
    guard(|| {
        let c = &nonnull(cfg, "config")?.inner;
        let layout = Layout::new(&c.output_dir);
        let cgan = pipeline::require_cgan(c, &layout)?;
        let ridnet = if refine != 0 {
            Some(pipeline::require_ridnet(c, &layout, &cgan, domain.into())?.best)
        } else {
            None
        };
        put(out, OcEstimator { cgan: cgan.best, ridnet })
    })
}

#[no_mangle]
pub extern "C" fn oc_estimator_dims(
    est: *const OcEstimator,
    num_antennas: *mut usize,
    num_users: *mut usize,
    num_pilots: *mut usize,
) -> OcStatus {
    guard(|| {
        let e = nonnull(est, "estimator")?;
        *nonnull_mut(num_antennas, "num_antennas")? = e.cgan.generator.num_antennas;
        *nonnull_mut(num_users, "num_users")? = e.cgan.generator.num_users;
        *nonnull_mut(num_pilots, "num_pilots")? = e.cgan.num_pilots;
        Ok(())
    })
}

/// Estimate the spatial `N x K` channel from a one-bit observation `y`
/// (`N x Q`) and the pilot block `pilots` (`K x Q`).
#[no_mangle]
pub extern "C" fn oc_estimate(
    est: *const OcEstimator,
    y: *const f64,
    pilots: *const f64,
    h_out: *mut f64,
) -> OcStatus {
    guard(|| {
        let e = nonnull(est, "estimator")?;
        let (n, k, q) = (e.cgan.generator.num_antennas, e.cgan.generator.num_users, e.cgan.num_pilots);
        let y = read_matrix(y, n, q, "y")?;
        let p = read_matrix(pilots, k, q, "pilots")?;
        let mut h = e.cgan.estimate_batch(&[&y], &[&p])?.pop().expect("one estimate per input");
        if let Some(r) = &e.ridnet {
            h = r.refine_batch(&[h], Domain::Spatial)?.pop().expect("one estimate per input");
        }
        write_matrix(h_out, &h, "h_out")
    })
}

/// # Safety
/// `est` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn oc_estimator_free(est: *mut OcEstimator) {
    if !est.is_null() {
        drop(Box::from_raw(est));
    }
}

/// Draw sample `index` of the channel stream `seed` for a half-wavelength
/// ULA: `N x K`, `num_paths` paths per user.
#[no_mangle]
pub extern "C" fn oc_draw_channel(
    num_antennas: usize,
    num_users: usize,
    num_paths: usize,
    seed: u64,
    index: u64,
    h_out: *mut f64,
) -> OcStatus {
    guard(|| {
        let g = ArrayGeometry::half_wavelength(num_antennas)?;
        let h = draw_channel(&g, num_users, PathCount::Fixed(num_paths), seed, index)?;
        write_matrix(h_out, &h.matrix, "h_out")
    })
}

/// Random unit-modulus QPSK pilot block, `K x Q`.
#[no_mangle]
pub extern "C" fn oc_generate_pilots(num_users: usize, num_pilots: usize, seed: u64, p_out: *mut f64) -> OcStatus {
    guard(|| {
        let p = generate_pilots(num_users, num_pilots, PilotScheme::QpskRandom, seed)?;
        write_matrix(p_out, &p.matrix, "p_out")
    })
}

/// One-bit observation `sgn(H P + noise)` at `snr_db`, noise from `seed`.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub extern "C" fn oc_observe(
    h: *const f64,
    num_antennas: usize,
    num_users: usize,
    pilots: *const f64,
    num_pilots: usize,
    snr_db: f64,
    seed: u64,
    y_out: *mut f64,
) -> OcStatus {
    guard(|| {
        let matrix = read_matrix(h, num_antennas, num_users, "h")?;
        let channel = onebit_ce::channel::ChannelRealization {
            matrix,
            domain: Domain::Spatial,
            per_user_paths: Vec::new(),
            seed,
        };
        let p = PilotMatrix {
            matrix: read_matrix(pilots, num_users, num_pilots, "pilots")?,
            scheme: PilotScheme::QpskRandom,
            seed,
        };
        let y = observe(&channel, &p, &NoiseModel::from_snr_db(snr_db)?, seed)?;
        write_matrix(y_out, &y.matrix, "y_out")
    })
}

/// NMSE in dB of `len` interleaved complex entries of `est` against `truth`.
#[no_mangle]
pub extern "C" fn oc_nmse_db(est: *const f64, truth: *const f64, len: usize, out: *mut f64) -> OcStatus {
    guard(|| {
        let e = read_matrix(est, len, 1, "est")?;
        let t = read_matrix(truth, len, 1, "truth")?;
        *nonnull_mut(out, "out")? = nmse_db(&[e], &[t])?;
        Ok(())
    })
}
