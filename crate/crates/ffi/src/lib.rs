//! C interface: centred FFTs, sampling masks, model inference and metrics.
//!
//! Every function returns an [`RvnStatus`]. On failure a message is kept per
//! thread and can be copied out with [`rvn_last_error_message`]. Objects are
//! opaque handles released with their `*_free` function.
//!
//! Complex arrays are interleaved `(re, im)` pairs in row-major order.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use ndarray::{Array2, Array3};
use num_complex::Complex;
use rvarnet::evaluation::{nmse, psnr, zero_filled_recon};
use rvarnet::operators::{fft2c, ifft2c};
use rvarnet::sampling::{effective_acceleration, generate_mask, random_cartesian_mask};
use rvarnet::training::{ssim, Checkpoint};
use rvarnet::{Error, MaskKind, ModelInput, MultiCoilKSpace, RecurrentVarNet, SamplingMask};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RvnStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Numerical = 5,
    Panic = 6,
}

/// A sampling mask with its auto-calibration region.
pub struct RvnMask {
    inner: SamplingMask,
}

/// A trained model loaded from a checkpoint.
pub struct RvnModel {
    net: RecurrentVarNet<f32>,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn status_of(err: &Error) -> RvnStatus {
    match err {
        Error::Io { .. } | Error::Image(_) => RvnStatus::Io,
        Error::Format { .. } | Error::Truncated { .. } | Error::Json(_) | Error::Config(_) => RvnStatus::Format,
        Error::NonFinite(_) | Error::NonFiniteLoss { .. } => RvnStatus::Numerical,
        _ => RvnStatus::InvalidArgument,
    }
}

enum Fail {
    Null(&'static str),
    Arg(String),
    Lib(Error),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Lib(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> RvnStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            RvnStatus::Ok
        }
        Ok(Err(Fail::Null(what))) => {
            set_error(format!("null pointer: {what}"));
            RvnStatus::NullPointer
        }
        Ok(Err(Fail::Arg(msg))) => {
            set_error(msg);
            RvnStatus::InvalidArgument
        }
        Ok(Err(Fail::Lib(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            RvnStatus::Panic
        }
    }
}

unsafe fn slice_in<'a, T>(p: *const T, len: usize, what: &'static str) -> Result<&'a [T], Fail> {
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_out<'a, T>(p: *mut T, len: usize, what: &'static str) -> Result<&'a mut [T], Fail> {
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

fn nonempty(dims: &[usize]) -> Result<usize, Fail> {
    if dims.contains(&0) {
        return Err(Fail::Arg(format!("empty dimensions {dims:?}")));
    }
    dims.iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .ok_or_else(|| Fail::Arg("dimensions overflow".into()))
}

fn complex_stack<T: Copy>(data: &[T], shape: (usize, usize, usize)) -> Array3<Complex<T>> {
    let v = data.chunks_exact(2).map(|p| Complex::new(p[0], p[1])).collect();
    Array3::from_shape_vec(shape, v).expect("length checked by caller")
}

/// Copies the calling thread's last error message into `buf` (NUL-terminated,
/// truncated to `len`). Returns the full message length in bytes.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn rvn_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            ptr::copy_nonoverlapping(msg.as_ptr(), buf as *mut u8, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn rvn_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Centred orthonormal 2D FFT of `n_batch` complex `ny x nx` planes in double
/// precision. `inverse != 0` selects the inverse transform. `input` and
/// `output` hold `2 * n_batch * ny * nx` values and may not overlap.
///
/// # Safety
/// Both pointers must reference arrays of the stated length.
#[no_mangle]
pub unsafe extern "C" fn rvn_fft2c(
    input: *const f64,
    output: *mut f64,
    n_batch: usize,
    ny: usize,
    nx: usize,
    inverse: i32,
) -> RvnStatus {
    guard(|| {
        let n = nonempty(&[n_batch, ny, nx, 2])?;
        let src = slice_in(input, n, "input")?;
        let dst = slice_out(output, n, "output")?;
        let x = complex_stack(src, (n_batch, ny, nx));
        let y = if inverse != 0 { ifft2c(&x)? } else { fft2c(&x)? };
        for (o, z) in dst.chunks_exact_mut(2).zip(y.iter()) {
            o[0] = z.re;
            o[1] = z.im;
        }
        Ok(())
    })
}

fn store_mask(inner: SamplingMask, out: *mut *mut RvnMask) {
    unsafe { *out = Box::into_raw(Box::new(RvnMask { inner })) };
}

/// Random Cartesian column mask (`kind = 0`) or 2D variable-density mask
/// (`kind = 1`). `param` is the ACS fraction for Cartesian masks and the
/// centre radius for variable-density masks.
///
/// # Safety
/// `out` must be a valid pointer; on success it receives a handle to free with
/// [`rvn_mask_free`].
#[no_mangle]
pub unsafe extern "C" fn rvn_mask_generate(
    kind: i32,
    ny: usize,
    nx: usize,
    acceleration: f64,
    param: f64,
    seed: u64,
    out: *mut *mut RvnMask,
) -> RvnStatus {
    guard(|| {
        if out.is_null() {
            return Err(Fail::Null("out"));
        }
        let mask = match kind {
            0 => random_cartesian_mask((ny, nx), acceleration, param, seed)?,
            1 => generate_mask(MaskKind::VariableDensity, (ny, nx), acceleration, param, seed)?,
            k => return Err(Fail::Arg(format!("unknown mask kind {k}"))),
        };
        store_mask(mask, out);
        Ok(())
    })
}

/// Builds a mask from byte arrays (`0` = not sampled) of `ny * nx` entries.
/// The ACS region must lie inside the mask.
///
/// # Safety
/// `mask` and `acs` must each reference `ny * nx` bytes; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn rvn_mask_from_bits(
    ny: usize,
    nx: usize,
    mask: *const u8,
    acs: *const u8,
    acceleration: f64,
    out: *mut *mut RvnMask,
) -> RvnStatus {
    guard(|| {
        if out.is_null() {
            return Err(Fail::Null("out"));
        }
        let n = nonempty(&[ny, nx])?;
        let m = slice_in(mask, n, "mask")?;
        let a = slice_in(acs, n, "acs")?;
        let to_bool = |s: &[u8]| Array2::from_shape_fn((ny, nx), |(i, j)| s[i * nx + j] != 0);
        store_mask(SamplingMask::new(to_bool(m), to_bool(a), acceleration, 0)?, out);
        Ok(())
    })
}

/// Writes the mask dimensions.
///
/// # Safety
/// `mask` must be a live handle; `ny` and `nx` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn rvn_mask_dims(mask: *const RvnMask, ny: *mut usize, nx: *mut usize) -> RvnStatus {
    guard(|| {
        let m = mask.as_ref().ok_or(Fail::Null("mask"))?;
        if ny.is_null() || nx.is_null() {
            return Err(Fail::Null("dims"));
        }
        let (a, b) = m.inner.shape();
        *ny = a;
        *nx = b;
        Ok(())
    })
}

/// Copies the mask (and, when `acs` is non-null, the ACS region) as bytes.
///
/// # Safety
/// `mask` must be a live handle; `bits` (and `acs` if non-null) must reference
/// `len` writable bytes where `len` equals `ny * nx`.
#[no_mangle]
pub unsafe extern "C" fn rvn_mask_copy_bits(mask: *const RvnMask, bits: *mut u8, acs: *mut u8, len: usize) -> RvnStatus {
    guard(|| {
        let m = mask.as_ref().ok_or(Fail::Null("mask"))?;
        let (ny, nx) = m.inner.shape();
        if len != ny * nx {
            return Err(Fail::Arg(format!("buffer holds {len} entries, mask has {}", ny * nx)));
        }
        for (o, &b) in slice_out(bits, len, "bits")?.iter_mut().zip(m.inner.mask.iter()) {
            *o = b as u8;
        }
        if !acs.is_null() {
            for (o, &b) in slice_out(acs, len, "acs")?.iter_mut().zip(m.inner.acs.iter()) {
                *o = b as u8;
            }
        }
        Ok(())
    })
}

/// Total points divided by sampled points.
///
/// # Safety
/// `mask` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn rvn_mask_effective_acceleration(mask: *const RvnMask, out: *mut f64) -> RvnStatus {
    guard(|| {
        let m = mask.as_ref().ok_or(Fail::Null("mask"))?;
        let out = out.as_mut().ok_or(Fail::Null("out"))?;
        *out = effective_acceleration(&m.inner);
        Ok(())
    })
}

/// Releases a mask. Null is ignored.
///
/// # Safety
/// `mask` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn rvn_mask_free(mask: *mut RvnMask) {
    if !mask.is_null() {
        drop(Box::from_raw(mask));
    }
}

/// Loads a model checkpoint.
///
/// # Safety
/// `path` must be a NUL-terminated UTF-8 string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn rvn_model_load(path: *const c_char, out: *mut *mut RvnModel) -> RvnStatus {
    guard(|| {
        if path.is_null() {
            return Err(Fail::Null("path"));
        }
        if out.is_null() {
            return Err(Fail::Null("out"));
        }
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| Fail::Arg("path is not valid UTF-8".into()))?;
        let ck = Checkpoint::<f32>::load(Path::new(path))?;
        let net = RecurrentVarNet::from_params(ck.config.model, ck.params)?;
        *out = Box::into_raw(Box::new(RvnModel { net }));
        Ok(())
    })
}

/// Number of trainable scalars of a loaded model.
///
/// # Safety
/// `model` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn rvn_model_parameter_count(model: *const RvnModel, out: *mut usize) -> RvnStatus {
    guard(|| {
        let m = model.as_ref().ok_or(Fail::Null("model"))?;
        let out = out.as_mut().ok_or(Fail::Null("out"))?;
        *out = m.net.parameter_count();
        Ok(())
    })
}

/// Reconstructs one slice. `kspace` holds `2 * n_coils * ny * nx` floats of
/// already sub-sampled data; `image` receives `ny * nx` magnitudes.
///
/// # Safety
/// Handles must be live and buffers must have the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn rvn_model_reconstruct(
    model: *const RvnModel,
    kspace: *const f32,
    n_coils: usize,
    ny: usize,
    nx: usize,
    mask: *const RvnMask,
    image: *mut f32,
) -> RvnStatus {
    guard(|| {
        let m = model.as_ref().ok_or(Fail::Null("model"))?;
        let mask = mask.as_ref().ok_or(Fail::Null("mask"))?;
        let n = nonempty(&[n_coils, ny, nx, 2])?;
        let src = slice_in(kspace, n, "kspace")?;
        let dst = slice_out(image, ny * nx, "image")?;
        let input = ModelInput {
            kspace: MultiCoilKSpace::new(complex_stack(src, (n_coils, ny, nx)))?,
            mask: mask.inner.clone(),
        };
        let out = m.net.forward(&input)?;
        for (o, v) in dst.iter_mut().zip(out.image.iter()) {
            *o = *v;
        }
        Ok(())
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `model` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn rvn_model_free(model: *mut RvnModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Root-sum-of-squares of the inverse FFT of (sub-sampled) k-space.
///
/// # Safety
/// `kspace` must reference `2 * n_coils * ny * nx` floats, `image` `ny * nx`.
#[no_mangle]
pub unsafe extern "C" fn rvn_zero_filled(kspace: *const f32, n_coils: usize, ny: usize, nx: usize, image: *mut f32) -> RvnStatus {
    guard(|| {
        let n = nonempty(&[n_coils, ny, nx, 2])?;
        let src = slice_in(kspace, n, "kspace")?;
        let dst = slice_out(image, ny * nx, "image")?;
        let recon = zero_filled_recon(&MultiCoilKSpace::new(complex_stack(src, (n_coils, ny, nx)))?)?;
        for (o, v) in dst.iter_mut().zip(recon.iter()) {
            *o = *v;
        }
        Ok(())
    })
}

/// Which image-quality metric [`rvn_metric`] computes.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RvnMetric {
    Ssim = 0,
    Psnr = 1,
    Nmse = 2,
}

/// Compares `pred` against `reference`, both `ny * nx` floats. SSIM uses the
/// reference maximum as data range.
///
/// # Safety
/// Buffers must have the stated length and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn rvn_metric(
    metric: RvnMetric,
    reference: *const f32,
    pred: *const f32,
    ny: usize,
    nx: usize,
    out: *mut f64,
) -> RvnStatus {
    guard(|| {
        let n = nonempty(&[ny, nx])?;
        let r = Array2::from_shape_vec((ny, nx), slice_in(reference, n, "reference")?.to_vec()).expect("sized");
        let p = Array2::from_shape_vec((ny, nx), slice_in(pred, n, "pred")?.to_vec()).expect("sized");
        let out = out.as_mut().ok_or(Fail::Null("out"))?;
        *out = match metric {
            RvnMetric::Ssim => {
                let range = r.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
                ssim(&r, &p, range)?
            }
            RvnMetric::Psnr => psnr(&r, &p)?,
            RvnMetric::Nmse => nmse(&r, &p)?,
        };
        Ok(())
    })
}
