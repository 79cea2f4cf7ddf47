//! C ABI over the dp3df engine.
//!
//! Every entry point returns a [`Dp3dfStatus`]. On failure the message is
//! available from [`dp3df_last_error`] on the same thread. Tensors cross the
//! boundary as contiguous row-major `float` buffers; clips are `[T, H, W, C]`
//! and frames `[H, W, C]`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use dp3df::dp3df::{apply_dp3df, normalize_filters, FilterGeometry};
use dp3df::metrics::{psnr, ssim_with_peak};
use dp3df::predictor::{load_checkpoint, predict, PredictorConfig, PredictorWeights};
use dp3df::{Error, Tensor};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dp3dfStatus {
    Ok = 0,
    NullPointer = 1,
    Contract = 2,
    Io = 3,
    Format = 4,
    NonFinite = 5,
    Panic = 6,
}

/// Filter geometry: upscale factor, kernel extents and clip length.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Dp3dfGeometry {
    pub r: usize,
    pub kh: usize,
    pub kw: usize,
    pub kt: usize,
    pub frames: usize,
}

impl Dp3dfGeometry {
    fn to_core(self) -> Result<FilterGeometry, Error> {
        FilterGeometry::new(self.r, self.kh, self.kw, self.kt, self.frames)
    }
}

impl From<FilterGeometry> for Dp3dfGeometry {
    fn from(g: FilterGeometry) -> Self {
        Dp3dfGeometry { r: g.r, kh: g.kh, kw: g.kw, kt: g.kt, frames: g.frames }
    }
}

/// Loaded predictor checkpoint.
pub struct Dp3dfModel {
    config: PredictorConfig,
    weights: PredictorWeights<f32>,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

enum Failure {
    Null(&'static str),
    Core(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

fn status_of(e: &Error) -> Dp3dfStatus {
    match e {
        Error::Contract { .. } | Error::Config { .. } | Error::EmptyDataset => Dp3dfStatus::Contract,
        Error::Io { .. } => Dp3dfStatus::Io,
        Error::Format { .. } | Error::Truncated { .. } => Dp3dfStatus::Format,
        Error::NonFinite(_) | Error::Divergence { .. } => Dp3dfStatus::NonFinite,
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> Dp3dfStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            Dp3dfStatus::Ok
        }
        Ok(Err(Failure::Null(arg))) => {
            set_error(&format!("null pointer passed as `{arg}`"));
            Dp3dfStatus::NullPointer
        }
        Ok(Err(Failure::Core(e))) => {
            set_error(&e.to_string());
            status_of(&e)
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(&format!("panic: {msg}"));
            Dp3dfStatus::Panic
        }
    }
}

fn contract(op: &'static str, detail: impl Into<String>) -> Failure {
    Failure::Core(Error::Contract { op, detail: detail.into() })
}

unsafe fn slice<'a>(ptr: *const f32, len: usize, arg: &'static str) -> Result<&'a [f32], Failure> {
    if ptr.is_null() {
        return Err(Failure::Null(arg));
    }
    Ok(std::slice::from_raw_parts(ptr, len))
}

unsafe fn slice_mut<'a>(ptr: *mut f32, len: usize, arg: &'static str) -> Result<&'a mut [f32], Failure> {
    if ptr.is_null() {
        return Err(Failure::Null(arg));
    }
    Ok(std::slice::from_raw_parts_mut(ptr, len))
}

unsafe fn tensor(ptr: *const f32, shape: &[usize], arg: &'static str) -> Result<Tensor<f32>, Failure> {
    let n = shape.iter().product();
    Ok(Tensor::new(shape.to_vec(), slice(ptr, n, arg)?.to_vec())?)
}

fn write_out(op: &'static str, src: &Tensor<f32>, out: &mut [f32]) -> Result<(), Failure> {
    if out.len() != src.len() {
        return Err(contract(op, format!("output buffer holds {} floats, need {}", out.len(), src.len())));
    }
    out.copy_from_slice(src.data());
    Ok(())
}

/// Message for the last failing call on this thread; empty after a success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn dp3df_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Loads a checkpoint and its sibling `.cfg` file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dp3df_model_load(path: *const c_char, out: *mut *mut Dp3dfModel) -> Dp3dfStatus {
    guard(|| {
        if path.is_null() {
            return Err(Failure::Null("path"));
        }
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        *out = std::ptr::null_mut();
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| contract("dp3df_model_load", "path is not valid UTF-8"))?;
        let (config, weights) = load_checkpoint(Path::new(path))?;
        *out = Box::into_raw(Box::new(Dp3dfModel { config, weights }));
        Ok(())
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `model` must come from [`dp3df_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn dp3df_model_free(model: *mut Dp3dfModel) {
    if !model.is_null() {
        let _ = catch_unwind(AssertUnwindSafe(|| drop(Box::from_raw(model))));
    }
}

/// # Safety
/// `model` and `out` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn dp3df_model_geometry(model: *const Dp3dfModel, out: *mut Dp3dfGeometry) -> Dp3dfStatus {
    guard(|| {
        let m = model.as_ref().ok_or(Failure::Null("model"))?;
        let out = out.as_mut().ok_or(Failure::Null("out"))?;
        *out = m.config.geom.into();
        Ok(())
    })
}

/// Restores the center frame of a `[frames, h, w, c]` clip into `out_y`,
/// which must hold `r*h * r*w * c` floats.
///
/// # Safety
/// `clip` must hold `frames*h*w*c` floats and `out_y` `out_len` floats.
#[no_mangle]
pub unsafe extern "C" fn dp3df_model_infer(
    model: *const Dp3dfModel,
    clip: *const f32,
    frames: usize,
    h: usize,
    w: usize,
    c: usize,
    out_y: *mut f32,
    out_len: usize,
) -> Dp3dfStatus {
    guard(|| {
        let m = model.as_ref().ok_or(Failure::Null("model"))?;
        let clip = tensor(clip, &[frames, h, w, c], "clip")?;
        let out = slice_mut(out_y, out_len, "out_y")?;
        let pred = predict(&m.config, &m.weights, &clip)?;
        write_out("dp3df_model_infer", &pred.y, out)
    })
}

/// Applies raw (pre-activation) filter logits `[h, w, r*r*(kh*kw*kt+1)]`
/// to a clip `[geom.frames, h, w, c]`, writing `Z` of `r*h * r*w * c` floats.
///
/// # Safety
/// Buffers must hold the stated number of floats.
#[no_mangle]
pub unsafe extern "C" fn dp3df_apply(
    geom: Dp3dfGeometry,
    clip: *const f32,
    h: usize,
    w: usize,
    c: usize,
    raw: *const f32,
    out: *mut f32,
    out_len: usize,
) -> Dp3dfStatus {
    guard(|| {
        let g = geom.to_core()?;
        let need = g.r * g.r * h * w * c;
        if out_len != need {
            return Err(contract("dp3df_apply", format!("output buffer holds {out_len} floats, need {need}")));
        }
        let clip = tensor(clip, &[g.frames, h, w, c], "clip")?;
        let raw = tensor(raw, &[h, w, g.raw_channels()], "raw")?;
        let out = slice_mut(out, out_len, "out")?;
        let field = normalize_filters(&raw, &g)?;
        write_out("dp3df_apply", &apply_dp3df(&clip, &field)?, out)
    })
}

/// PSNR in dB between two `[h, w, c]` frames.
///
/// # Safety
/// `a` and `b` must hold `h*w*c` floats; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn dp3df_psnr(
    a: *const f32,
    b: *const f32,
    h: usize,
    w: usize,
    c: usize,
    peak: f64,
    out: *mut f64,
) -> Dp3dfStatus {
    guard(|| {
        let out = out.as_mut().ok_or(Failure::Null("out"))?;
        *out = psnr(&tensor(a, &[h, w, c], "a")?, &tensor(b, &[h, w, c], "b")?, peak)?;
        Ok(())
    })
}

/// Mean SSIM between two `[h, w, c]` frames.
///
/// # Safety
/// `a` and `b` must hold `h*w*c` floats; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn dp3df_ssim(
    a: *const f32,
    b: *const f32,
    h: usize,
    w: usize,
    c: usize,
    peak: f64,
    out: *mut f64,
) -> Dp3dfStatus {
    guard(|| {
        let out = out.as_mut().ok_or(Failure::Null("out"))?;
        *out = ssim_with_peak(&tensor(a, &[h, w, c], "a")?, &tensor(b, &[h, w, c], "b")?, peak)?;
        Ok(())
    })
}
