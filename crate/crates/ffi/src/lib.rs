//! C ABI for loading trained slicesplat checkpoints, synthesizing slices and
//! computing image metrics.
//!
//! Conventions:
//! - every fallible function returns an [`SsStatus`]; on failure a message is
//!   available from [`ss_last_error`] on the same thread
//! - models are opaque [`SsModel`] handles released with [`ss_model_free`]
//! - images are row-major `double` buffers owned by the caller
//! - panics never cross the boundary; they surface as `SS_STATUS_PANIC`

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use slicesplat::checkpoint::Checkpoint;
use slicesplat::deform::DeformNet;
use slicesplat::metrics::{psnr, ssim};
use slicesplat::pipeline::Reconstruction;
use slicesplat::volume::generate_phantom;
use slicesplat::{Error, Image};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SsStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    DimensionMismatch = 3,
    Io = 4,
    Checkpoint = 5,
    Numeric = 6,
    Panic = 7,
}

/// A trained reconstruction loaded from a checkpoint.
pub struct SsModel {
    inner: Reconstruction,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> SsStatus {
    match e {
        Error::InvalidArgument(_) | Error::Manifest { .. } => SsStatus::InvalidArgument,
        Error::DimensionMismatch(_) => SsStatus::DimensionMismatch,
        Error::NonFiniteGradient { .. } | Error::TeacherUninitialized => SsStatus::Numeric,
        Error::Checkpoint(_) => SsStatus::Checkpoint,
        Error::File { .. } | Error::Io(_) => SsStatus::Io,
    }
}

/// Runs `f`, recording errors and containing panics.
fn guard(f: impl FnOnce() -> Result<(), (SsStatus, String)>) -> SsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SsStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("internal panic: {msg}"));
            SsStatus::Panic
        }
    }
}

fn lib_err(e: Error) -> (SsStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (SsStatus, String) {
    (SsStatus::NullPointer, format!("{what} is NULL"))
}

/// Message for the most recent failure on this thread, or NULL.
///
/// The pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn ss_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn ss_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a checkpoint from `path` into a new handle stored in `*out`.
///
/// # Safety
/// `path` must be a valid NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ss_model_load(path: *const c_char, out: *mut *mut SsModel) -> SsStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        if path.is_null() {
            return Err(null("path"));
        }
        // SAFETY: non-null and NUL-terminated per the contract above.
        let path = unsafe { CStr::from_ptr(path) }
            .to_str()
            .map_err(|_| (SsStatus::InvalidArgument, "path is not valid UTF-8".to_string()))?;
        let ck = Checkpoint::load(Path::new(path)).map_err(lib_err)?;
        let net = DeformNet::new(ck.net_config, ck.model.width, ck.model.height).map_err(lib_err)?;
        let inner = Reconstruction::new(ck.model, net, ck.student, Default::default()).map_err(lib_err)?;
        // SAFETY: `out` is non-null and writable per the contract above.
        unsafe { *out = Box::into_raw(Box::new(SsModel { inner })) };
        Ok(())
    })
}

/// Releases a handle from [`ss_model_load`]. NULL is ignored.
///
/// # Safety
/// `model` must be NULL or a live handle; it must not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ss_model_free(model: *mut SsModel) {
    if !model.is_null() {
        // SAFETY: the handle came from Box::into_raw in ss_model_load.
        drop(unsafe { Box::from_raw(model) });
    }
}

/// Writes the frame size of `model`.
///
/// # Safety
/// `model` must be a live handle; `width` and `height` valid pointers.
#[no_mangle]
pub unsafe extern "C" fn ss_model_dims(model: *const SsModel, width: *mut usize, height: *mut usize) -> SsStatus {
    guard(|| {
        // SAFETY: null-checked; liveness per the contract above.
        let m = unsafe { model.as_ref() }.ok_or_else(|| null("model"))?;
        if width.is_null() || height.is_null() {
            return Err(null("width/height"));
        }
        // SAFETY: both pointers checked non-null above.
        unsafe {
            *width = m.inner.model.width;
            *height = m.inner.model.height;
        }
        Ok(())
    })
}

/// Writes the number of Gaussians in `model`.
///
/// # Safety
/// `model` must be a live handle and `count` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ss_model_gaussian_count(model: *const SsModel, count: *mut usize) -> SsStatus {
    guard(|| {
        // SAFETY: null-checked; liveness per the contract above.
        let m = unsafe { model.as_ref() }.ok_or_else(|| null("model"))?;
        // SAFETY: null-checked.
        let c = unsafe { count.as_mut() }.ok_or_else(|| null("count"))?;
        *c = m.inner.model.len();
        Ok(())
    })
}

/// Renders the slice at normalized depth `t` in `[0, 1]` into `out`, which
/// must hold `len == width * height` doubles.
///
/// # Safety
/// `model` must be a live handle and `out` valid for `len` writes.
#[no_mangle]
pub unsafe extern "C" fn ss_model_render(model: *const SsModel, t: f64, out: *mut f64, len: usize) -> SsStatus {
    guard(|| {
        // SAFETY: null-checked; liveness per the contract above.
        let m = unsafe { model.as_ref() }.ok_or_else(|| null("model"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let need = m.inner.model.width * m.inner.model.height;
        if len != need {
            return Err((SsStatus::DimensionMismatch, format!("buffer holds {len} values, need {need}")));
        }
        if !(0.0..=1.0).contains(&t) {
            return Err((SsStatus::InvalidArgument, format!("t = {t} must lie in [0, 1]")));
        }
        let img = m.inner.slice(t).map_err(lib_err)?;
        // SAFETY: `out` is valid for `len` writes per the contract above.
        unsafe { std::slice::from_raw_parts_mut(out, len) }.copy_from_slice(img.data());
        Ok(())
    })
}

/// # Safety
/// `ptr` must be valid for `width * height` reads when non-null.
unsafe fn image_arg(ptr: *const f64, width: usize, height: usize, what: &str) -> Result<Image, (SsStatus, String)> {
    if ptr.is_null() {
        return Err(null(what));
    }
    let n = width
        .checked_mul(height)
        .filter(|&n| n > 0)
        .ok_or_else(|| (SsStatus::InvalidArgument, "image must be non-empty".to_string()))?;
    // SAFETY: caller guarantees `n` readable values.
    let data = unsafe { std::slice::from_raw_parts(ptr, n) }.to_vec();
    Image::from_vec(width, height, data).map_err(lib_err)
}

/// PSNR in dB of two `width x height` images with peak 1; infinite when equal.
///
/// # Safety
/// `a` and `b` must be valid for `width * height` reads; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ss_psnr(a: *const f64, b: *const f64, width: usize, height: usize, out: *mut f64) -> SsStatus {
    guard(|| {
        // SAFETY: forwarded contract.
        let (ia, ib) = unsafe { (image_arg(a, width, height, "a")?, image_arg(b, width, height, "b")?) };
        // SAFETY: null-checked.
        let o = unsafe { out.as_mut() }.ok_or_else(|| null("out"))?;
        *o = psnr(&ia, &ib).map_err(lib_err)?;
        Ok(())
    })
}

/// Mean SSIM (11x11 Gaussian window) of two `width x height` images.
///
/// # Safety
/// `a` and `b` must be valid for `width * height` reads; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ss_ssim(a: *const f64, b: *const f64, width: usize, height: usize, out: *mut f64) -> SsStatus {
    guard(|| {
        // SAFETY: forwarded contract.
        let (ia, ib) = unsafe { (image_arg(a, width, height, "a")?, image_arg(b, width, height, "b")?) };
        // SAFETY: null-checked.
        let o = unsafe { out.as_mut() }.ok_or_else(|| null("out"))?;
        *o = ssim(&ia, &ib).map_err(lib_err)?;
        Ok(())
    })
}

/// Generates a phantom volume into `out`, slice-major, which must hold
/// `len == width * height * depth` doubles.
///
/// # Safety
/// `out` must be valid for `len` writes.
#[no_mangle]
pub unsafe extern "C" fn ss_phantom(
    seed: u64,
    width: usize,
    height: usize,
    depth: usize,
    structures: usize,
    out: *mut f64,
    len: usize,
) -> SsStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let need = width.saturating_mul(height).saturating_mul(depth);
        if len != need {
            return Err((SsStatus::DimensionMismatch, format!("buffer holds {len} values, need {need}")));
        }
        let slices = generate_phantom(seed, [width, height, depth], structures).map_err(lib_err)?;
        // SAFETY: `out` is valid for `len` writes per the contract above.
        let dst = unsafe { std::slice::from_raw_parts_mut(out, len) };
        for (chunk, s) in dst.chunks_mut(width * height).zip(&slices) {
            chunk.copy_from_slice(s.data());
        }
        Ok(())
    })
}
