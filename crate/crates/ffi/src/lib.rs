//! C ABI for loading checkpoints, running inference and scoring masks.
//!
//! Every fallible function returns an [`LpmoeStatus`]. On failure a
//! description is stored per thread and can be read with
//! [`lpmoe_last_error`]. Models are opaque handles created by
//! [`lpmoe_model_load`] or [`lpmoe_model_new`] and released with
//! [`lpmoe_model_free`]. Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use lpmoe_core::checkpoint;
use lpmoe_core::metrics::image_metrics;
use lpmoe_core::model::{count_params, Ablation, Model, ModelConfig};
use lpmoe_core::train::infer_image;
use lpmoe_core::{Error, ParamStore, Tensor};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LpmoeStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Checkpoint = 4,
    Shape = 5,
    Internal = 6,
}

/// A model and its parameters.
pub struct LpmoeModel {
    model: Model,
    store: ParamStore,
}

/// Per-image scores; `empty_gt` is 1 when the mask has no foreground, in
/// which case `f_w` is 0.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LpmoeMetrics {
    pub iou: f64,
    pub dice: f64,
    pub f_w: f64,
    pub mae: f64,
    pub empty_gt: i32,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> LpmoeStatus {
    match e {
        Error::Io(_) | Error::Image { .. } => LpmoeStatus::Io,
        Error::Checkpoint(_) | Error::CheckpointVersion { .. } | Error::UnknownParam(_) => LpmoeStatus::Checkpoint,
        Error::Shape(_) => LpmoeStatus::Shape,
        _ => LpmoeStatus::InvalidArgument,
    }
}

/// Runs `f`, translating errors and panics into a status plus a stored message.
fn guard(f: impl FnOnce() -> Result<(), (LpmoeStatus, String)>) -> LpmoeStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => LpmoeStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            LpmoeStatus::Internal
        }
    }
}

fn lift<T>(r: lpmoe_core::Result<T>) -> Result<T, (LpmoeStatus, String)> {
    r.map_err(|e| (status_of(&e), e.to_string()))
}

fn null(what: &str) -> (LpmoeStatus, String) {
    (LpmoeStatus::NullPointer, format!("`{what}` is null"))
}

fn dims(height: u32, width: u32) -> Result<(usize, usize), (LpmoeStatus, String)> {
    if height == 0 || width == 0 {
        return Err((LpmoeStatus::InvalidArgument, "image dimensions must be positive".into()));
    }
    Ok((height as usize, width as usize))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn lpmoe_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or NULL after a success.
/// The pointer stays valid until the next call into the library on this thread.
#[no_mangle]
pub extern "C" fn lpmoe_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Loads a checkpoint file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn lpmoe_model_load(path: *const c_char, out: *mut *mut LpmoeModel) -> LpmoeStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let path = unsafe { CStr::from_ptr(path) }
            .to_str()
            .map_err(|_| (LpmoeStatus::InvalidArgument, "path is not UTF-8".to_string()))?;
        let t = lift(checkpoint::load(Path::new(path)))?;
        let handle = Box::new(LpmoeModel { model: t.model, store: t.store });
        unsafe { *out = Box::into_raw(handle) };
        Ok(())
    })
}

/// Builds an untrained model with the default configuration.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn lpmoe_model_new(seed: u64, out: *mut *mut LpmoeModel) -> LpmoeStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let (model, store) = lift(Model::build(ModelConfig::default(), seed))?;
        unsafe { *out = Box::into_raw(Box::new(LpmoeModel { model, store })) };
        Ok(())
    })
}

/// Releases a model. NULL is ignored.
///
/// # Safety
/// `model` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn lpmoe_model_free(model: *mut LpmoeModel) {
    if !model.is_null() {
        drop(unsafe { Box::from_raw(model) });
    }
}

/// Training resolution of the model.
///
/// # Safety
/// Both pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn lpmoe_model_image_size(model: *const LpmoeModel, out: *mut u32) -> LpmoeStatus {
    guard(|| {
        let m = unsafe { model.as_ref() }.ok_or_else(|| null("model"))?;
        let out = unsafe { out.as_mut() }.ok_or_else(|| null("out"))?;
        *out = m.model.config.image_size as u32;
        Ok(())
    })
}

/// Trainable and frozen scalar counts.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn lpmoe_model_param_counts(
    model: *const LpmoeModel,
    trainable: *mut u64,
    frozen: *mut u64,
) -> LpmoeStatus {
    guard(|| {
        let m = unsafe { model.as_ref() }.ok_or_else(|| null("model"))?;
        let t = unsafe { trainable.as_mut() }.ok_or_else(|| null("trainable"))?;
        let f = unsafe { frozen.as_mut() }.ok_or_else(|| null("frozen"))?;
        let r = count_params(&m.store);
        *t = r.trainable as u64;
        *f = r.frozen as u64;
        Ok(())
    })
}

/// Foreground confidence for a planar RGB image.
///
/// `rgb` holds `3 * height * width` values in `[0, 1]`, channel-major.
/// `out` receives `height * width` confidences quantized to 8-bit levels.
/// Sizes that are not multiples of 32 are reflection-padded internally.
///
/// # Safety
/// `rgb` and `out` must point to buffers of the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn lpmoe_infer(
    model: *const LpmoeModel,
    rgb: *const f64,
    height: u32,
    width: u32,
    out: *mut f64,
) -> LpmoeStatus {
    guard(|| {
        let m = unsafe { model.as_ref() }.ok_or_else(|| null("model"))?;
        if rgb.is_null() {
            return Err(null("rgb"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let (h, w) = dims(height, width)?;
        let input = unsafe { std::slice::from_raw_parts(rgb, 3 * h * w) };
        let image = lift(Tensor::new(vec![3, h, w], input.to_vec()))?;
        let res = lift(infer_image(&m.model, &m.store, &image, Ablation::default()))?;
        let dst = unsafe { std::slice::from_raw_parts_mut(out, h * w) };
        dst.copy_from_slice(res.confidence.data());
        Ok(())
    })
}

/// Scores a confidence map against a binary mask, both `height * width`.
///
/// # Safety
/// `pred` and `gt` must hold `height * width` values; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn lpmoe_metrics(
    pred: *const f64,
    gt: *const f64,
    height: u32,
    width: u32,
    out: *mut LpmoeMetrics,
) -> LpmoeStatus {
    guard(|| {
        if pred.is_null() {
            return Err(null("pred"));
        }
        if gt.is_null() {
            return Err(null("gt"));
        }
        let out = unsafe { out.as_mut() }.ok_or_else(|| null("out"))?;
        let (h, w) = dims(height, width)?;
        let n = h * w;
        let p = lift(Tensor::new(vec![h, w], unsafe { std::slice::from_raw_parts(pred, n) }.to_vec()))?;
        let g = lift(Tensor::new(vec![h, w], unsafe { std::slice::from_raw_parts(gt, n) }.to_vec()))?;
        let r = lift(image_metrics("", &p, &g))?;
        *out = LpmoeMetrics { iou: r.iou, dice: r.dice, f_w: r.f_w, mae: r.mae, empty_gt: i32::from(r.empty_gt) };
        Ok(())
    })
}
