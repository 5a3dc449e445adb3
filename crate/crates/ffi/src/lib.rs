//! C interface to emev-core.
//!
//! Every function returns an [`EmevStatus`]. On failure the message is kept
//! per thread and can be copied out with [`emev_last_error`]. Complex arrays
//! are interleaved `(re, im)` pairs, matrices are row-major.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use emev_core::bundle::{Model, ModelBundle};
use emev_core::channel::{generate_channel, los_probability, ChannelProfile, Dims};
use emev_core::emevnet::{codeword_length, emev_ratio, EmevNet};
use emev_core::linalg::CMatrix;
use emev_core::metrics::{cosine_similarity, nmse_ratio};
use emev_core::svd::svd_rb;
use emev_core::Error;
use num_complex::Complex64;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmevStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    DimensionMismatch = 3,
    BadFile = 4,
    Io = 5,
    Numerical = 6,
    /// The reference signal has zero energy.
    Undefined = 7,
    Panic = 8,
}

/// A trained EMEVNet loaded from a checkpoint.
pub struct EmevModel {
    net: EmevNet,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn status_of(e: &Error) -> EmevStatus {
    match e {
        Error::Dimension { .. } => EmevStatus::DimensionMismatch,
        Error::Config(_) | Error::Usage(_) => EmevStatus::InvalidArgument,
        Error::Format { .. } => EmevStatus::BadFile,
        Error::Io { .. } => EmevStatus::Io,
        Error::UndefinedReference(_) => EmevStatus::Undefined,
        Error::Numerical(_) | Error::SvdNonConvergence { .. } | Error::Divergence { .. } => {
            EmevStatus::Numerical
        }
    }
}

enum Fail {
    Null(&'static str),
    Arg(String),
    Core(Error),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Core(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> EmevStatus {
    let (status, msg) = match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => return EmevStatus::Ok,
        Ok(Err(Fail::Null(what))) => (EmevStatus::NullPointer, format!("{what} is null")),
        Ok(Err(Fail::Arg(msg))) => (EmevStatus::InvalidArgument, msg),
        Ok(Err(Fail::Core(e))) => (status_of(&e), e.to_string()),
        Err(_) => (EmevStatus::Panic, "internal panic".to_string()),
    };
    set_error(msg);
    status
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &'static str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut<'a, T>(p: *mut T, len: usize, what: &'static str) -> Result<&'a mut [T], Fail> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn out<'a, T>(p: *mut T, what: &'static str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or(Fail::Null(what))
}

unsafe fn string<'a>(p: *const c_char, what: &'static str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail::Arg(format!("{what} is not UTF-8")))
}

fn check_len(what: &str, got: usize, want: usize) -> Result<(), Fail> {
    if got != want {
        return Err(Fail::Arg(format!(
            "{what} has length {got}, expected {want}"
        )));
    }
    Ok(())
}

/// Copies the last error message of this thread into `buf` (NUL-terminated,
/// truncated to `len`). Returns the full message length without the NUL.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn emev_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            std::ptr::copy_nonoverlapping(msg.as_ptr().cast::<c_char>(), buf, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Payload length for compression ratio `beta_h` of an `n_rb x n_r x n_t`
/// channel.
///
/// # Safety
/// `l_eps` must point to a writable `usize`.
#[no_mangle]
pub unsafe extern "C" fn emev_codeword_length(
    beta_h: f64,
    n_rb: usize,
    n_r: usize,
    n_t: usize,
    l_eps: *mut usize,
) -> EmevStatus {
    guard(|| {
        let dims = Dims::new(n_rb, n_r, n_t);
        dims.validate()?;
        *out(l_eps, "l_eps")? = codeword_length(beta_h, dims)?.l_eps;
        Ok(())
    })
}

/// Compression ratio of the eigen representation for a given `beta_h`.
///
/// # Safety
/// `ratio` must point to a writable `double`.
#[no_mangle]
pub unsafe extern "C" fn emev_compression_ratio(
    beta_h: f64,
    n_rb: usize,
    n_r: usize,
    n_t: usize,
    ratio: *mut f64,
) -> EmevStatus {
    guard(|| {
        let dims = Dims::new(n_rb, n_r, n_t);
        dims.validate()?;
        if beta_h.is_nan() || beta_h <= 0.0 {
            return Err(Fail::Arg(format!(
                "compression ratio must be positive, got {beta_h}"
            )));
        }
        *out(ratio, "ratio")? = emev_ratio(beta_h, dims).exact;
        Ok(())
    })
}

/// # Safety
/// `p` must point to a writable `double`.
#[no_mangle]
pub unsafe extern "C" fn emev_los_probability(d_2d: f64, h_ut: f64, p: *mut f64) -> EmevStatus {
    guard(|| {
        *out(p, "p")? = los_probability(d_2d, h_ut)?;
        Ok(())
    })
}

/// Draws one channel of a named profile into `h`, which must hold
/// `2 n_rb n_r n_t` floats laid out `[rb][rx][tx][re, im]`.
///
/// # Safety
/// `profile` must be a NUL-terminated string; `h` must point to `h_len`
/// writable floats.
#[no_mangle]
pub unsafe extern "C" fn emev_generate_channel(
    profile: *const c_char,
    n_rb: usize,
    n_r: usize,
    n_t: usize,
    seed: u64,
    h: *mut f32,
    h_len: usize,
) -> EmevStatus {
    guard(|| {
        let name = string(profile, "profile")?;
        let dims = Dims::new(n_rb, n_r, n_t);
        dims.validate()?;
        let dst = slice_mut(h, h_len, "h")?;
        check_len("h", h_len, 2 * dims.h_entries())?;
        let t = generate_channel(&ChannelProfile::preset(name, dims)?, seed)?;
        dst.copy_from_slice(t.data());
        Ok(())
    })
}

/// SVD of one `n_r x n_t` block (`n_r <= n_t`). `u` receives `n_r x n_r`,
/// `s` the `n_r` singular values in descending order, `v` the full
/// `n_t x n_t` right factor.
///
/// # Safety
/// `h`, `u` and `v` must hold `2 n_r n_t`, `2 n_r n_r` and `2 n_t n_t`
/// doubles; `s` must hold `n_r`.
#[no_mangle]
pub unsafe extern "C" fn emev_svd(
    h: *const f64,
    n_r: usize,
    n_t: usize,
    u: *mut f64,
    s: *mut f64,
    v: *mut f64,
) -> EmevStatus {
    guard(|| {
        if n_r == 0 || n_r > n_t {
            return Err(Fail::Arg(format!("need 0 < n_r <= n_t, got {n_r}x{n_t}")));
        }
        let src = slice(h, 2 * n_r * n_t, "h")?;
        let (u, s, v) = (
            slice_mut(u, 2 * n_r * n_r, "u")?,
            slice_mut(s, n_r, "s")?,
            slice_mut(v, 2 * n_t * n_t, "v")?,
        );
        let m = CMatrix::from_vec(
            n_r,
            n_t,
            src.chunks(2).map(|c| Complex64::new(c[0], c[1])).collect(),
        )?;
        let d = svd_rb(&m)?;
        for (dst, z) in u.chunks_mut(2).zip(d.u.data()) {
            dst.copy_from_slice(&[z.re, z.im]);
        }
        for (dst, z) in v.chunks_mut(2).zip(d.v.data()) {
            dst.copy_from_slice(&[z.re, z.im]);
        }
        s.copy_from_slice(&d.s);
        Ok(())
    })
}

/// NMSE in dB between a reference and its estimate. A perfect estimate
/// yields negative infinity.
///
/// # Safety
/// `x` and `x_hat` must hold `len` floats; `db` must be writable.
#[no_mangle]
pub unsafe extern "C" fn emev_nmse_db(
    x: *const f32,
    x_hat: *const f32,
    len: usize,
    db: *mut f64,
) -> EmevStatus {
    guard(|| {
        let r = nmse_ratio(slice(x, len, "x")?, slice(x_hat, len, "x_hat")?)?;
        *out(db, "db")? = if r == 0.0 {
            f64::NEG_INFINITY
        } else {
            10.0 * r.log10()
        };
        Ok(())
    })
}

/// Mean column cosine similarity over `blocks` stacked `rows x cols`
/// matrices; complex entries when `complex` is non-zero.
///
/// # Safety
/// `x` and `x_hat` must hold `blocks rows cols` values (twice that when
/// complex); `rho` must be writable.
#[no_mangle]
pub unsafe extern "C" fn emev_cosine_similarity(
    x: *const f32,
    x_hat: *const f32,
    blocks: usize,
    rows: usize,
    cols: usize,
    complex: i32,
    rho: *mut f64,
) -> EmevStatus {
    guard(|| {
        let n = blocks * rows * cols * if complex != 0 { 2 } else { 1 };
        let r = cosine_similarity(
            slice(x, n, "x")?,
            slice(x_hat, n, "x_hat")?,
            blocks,
            rows,
            cols,
            complex != 0,
        )?;
        *out(rho, "rho")? = r;
        Ok(())
    })
}

/// Loads an EMEVNet checkpoint. Free the handle with [`emev_model_free`].
///
/// # Safety
/// `path` must be a NUL-terminated string and `model` writable.
#[no_mangle]
pub unsafe extern "C" fn emev_model_load(
    path: *const c_char,
    model: *mut *mut EmevModel,
) -> EmevStatus {
    guard(|| {
        let dst = out(model, "model")?;
        *dst = std::ptr::null_mut();
        let b = ModelBundle::load(Path::new(string(path, "path")?))?;
        let Model::Emev(net) = b.model else {
            return Err(Fail::Arg(format!(
                "checkpoint holds a {} model",
                b.model.model_type().name()
            )));
        };
        net.s_scale()?;
        *dst = Box::into_raw(Box::new(EmevModel { net }));
        Ok(())
    })
}

/// # Safety
/// `model` must be null or a handle from [`emev_model_load`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn emev_model_free(model: *mut EmevModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Dimensions and payload length of a loaded model.
///
/// # Safety
/// `model` must be a live handle; the output pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn emev_model_info(
    model: *const EmevModel,
    n_rb: *mut usize,
    n_r: *mut usize,
    n_t: *mut usize,
    l_eps: *mut usize,
) -> EmevStatus {
    guard(|| {
        let m = model.as_ref().ok_or(Fail::Null("model"))?;
        let d = m.net.config.dims;
        *out(n_rb, "n_rb")? = d.n_rb;
        *out(n_r, "n_r")? = d.n_r;
        *out(n_t, "n_t")? = d.n_t;
        *out(l_eps, "l_eps")? = m.net.l_eps();
        Ok(())
    })
}

/// Compresses `V` (`2 n_rb n_t n_t` floats) and raw singular values `S`
/// (`n_rb n_r`) into a payload of `l_eps` floats.
///
/// # Safety
/// `model` must be a live handle and every array must hold the stated
/// number of floats.
#[no_mangle]
pub unsafe extern "C" fn emev_model_encode(
    model: *const EmevModel,
    v: *const f32,
    v_len: usize,
    s: *const f32,
    s_len: usize,
    payload: *mut f32,
    payload_len: usize,
) -> EmevStatus {
    guard(|| {
        let m = model.as_ref().ok_or(Fail::Null("model"))?;
        let c = &m.net.config;
        check_len("v", v_len, c.v_len())?;
        check_len("s", s_len, c.s_len())?;
        check_len("payload", payload_len, c.l_eps)?;
        let code = m.net.encode(slice(v, v_len, "v")?, slice(s, s_len, "s")?)?;
        slice_mut(payload, payload_len, "payload")?.copy_from_slice(&code);
        Ok(())
    })
}

/// Reconstructs `V_hat` and `S_hat` (physical units) from a payload.
///
/// # Safety
/// `model` must be a live handle and every array must hold the stated
/// number of floats.
#[no_mangle]
pub unsafe extern "C" fn emev_model_decode(
    model: *const EmevModel,
    payload: *const f32,
    payload_len: usize,
    v: *mut f32,
    v_len: usize,
    s: *mut f32,
    s_len: usize,
) -> EmevStatus {
    guard(|| {
        let m = model.as_ref().ok_or(Fail::Null("model"))?;
        let c = &m.net.config;
        check_len("payload", payload_len, c.l_eps)?;
        check_len("v", v_len, c.v_len())?;
        check_len("s", s_len, c.s_len())?;
        let (vh, sh) = m.net.decode(slice(payload, payload_len, "payload")?)?;
        slice_mut(v, v_len, "v")?.copy_from_slice(&vh);
        slice_mut(s, s_len, "s")?.copy_from_slice(&sh);
        Ok(())
    })
}
