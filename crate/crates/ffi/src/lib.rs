//! C ABI over the segmentation model.
//!
//! Models are opaque `SamusModel` handles owned by the caller and released
//! with `samus_model_free`. Every fallible call returns a `SamusStatus`;
//! on failure `samus_last_error` describes the most recent error on the
//! calling thread. Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};

use candle_core::DType;
use samus::metrics::{dice, hausdorff, hausdorff95, BinaryMask};
use samus::{Ablation, Checkpoint, Error, ModelConfig, Point, Prompt, Samus};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SamusStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Checkpoint = 4,
    Shape = 5,
    UnknownTask = 6,
    UndefinedMetric = 7,
    Internal = 8,
}

/// Opaque model handle.
pub struct SamusModel {
    model: Samus,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).unwrap_or_default());
}

fn status_of(err: &Error) -> SamusStatus {
    match err {
        Error::Io(_) => SamusStatus::Io,
        Error::Checkpoint(_) | Error::Json(_) => SamusStatus::Checkpoint,
        Error::Shape { .. } => SamusStatus::Shape,
        Error::UnknownTask(_) => SamusStatus::UnknownTask,
        Error::UndefinedMetric(_) => SamusStatus::UndefinedMetric,
        Error::Config { .. } | Error::Prompt(_) | Error::RunConfig(_) => SamusStatus::InvalidArgument,
        _ => SamusStatus::Internal,
    }
}

/// Runs `f`, records its error or panic, and maps it to a status.
fn guard(f: impl FnOnce() -> Result<(), (SamusStatus, String)>) -> SamusStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            SamusStatus::Ok
        }
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            SamusStatus::Internal
        }
    }
}

trait IntoFfi<T> {
    fn ffi(self) -> Result<T, (SamusStatus, String)>;
}

impl<T> IntoFfi<T> for samus::Result<T> {
    fn ffi(self) -> Result<T, (SamusStatus, String)> {
        self.map_err(|e| (status_of(&e), e.to_string()))
    }
}

fn null(what: &str) -> (SamusStatus, String) {
    (SamusStatus::NullPointer, format!("`{what}` is null"))
}

unsafe fn slice<'a, T>(ptr: *const T, len: usize, what: &str) -> Result<&'a [T], (SamusStatus, String)> {
    if ptr.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(ptr, len))
}

unsafe fn model_ref<'a>(model: *const SamusModel) -> Result<&'a Samus, (SamusStatus, String)> {
    model.as_ref().map(|m| &m.model).ok_or_else(|| null("model"))
}

fn store(out: *mut *mut SamusModel, model: Samus) -> Result<(), (SamusStatus, String)> {
    if out.is_null() {
        return Err(null("out"));
    }
    unsafe { *out = Box::into_raw(Box::new(SamusModel { model })) };
    Ok(())
}

/// Message of the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn samus_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Freshly initialized desk-scale model with every adaptation component.
#[no_mangle]
pub extern "C" fn samus_model_new_default(seed: u64, out: *mut *mut SamusModel) -> SamusStatus {
    guard(|| {
        let model = Samus::new(ModelConfig::desk(), Ablation::all_on(), DType::F32, seed).ffi()?;
        store(out, model)
    })
}

/// Loads a checkpoint written by the `samus` CLI.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn samus_model_load(path: *const c_char, out: *mut *mut SamusModel) -> SamusStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| (SamusStatus::InvalidArgument, "path is not UTF-8".to_string()))?;
        let model = Checkpoint::load(path).and_then(|ck| ck.build_model(DType::F32)).ffi()?;
        store(out, model)
    })
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `model` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn samus_model_free(model: *mut SamusModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Side length `S` of the square input images.
///
/// # Safety
/// `model` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn samus_model_input_size(model: *const SamusModel, out: *mut usize) -> SamusStatus {
    guard(|| {
        let m = model_ref(model)?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = m.config().input_size;
        Ok(())
    })
}

/// Number of task-token banks available to `samus_predict_auto`.
///
/// # Safety
/// `model` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn samus_model_task_count(model: *const SamusModel, out: *mut usize) -> SamusStatus {
    guard(|| {
        let m = model_ref(model)?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = m.task_names().len();
        Ok(())
    })
}

unsafe fn predict(
    model: *const SamusModel,
    image: *const f32,
    image_len: usize,
    mask_out: *mut u8,
    mask_len: usize,
    prompt: &Prompt,
) -> Result<(), (SamusStatus, String)> {
    let m = model_ref(model)?;
    let image = slice(image, image_len, "image")?;
    if mask_out.is_null() {
        return Err(null("mask_out"));
    }
    let s = m.config().input_size;
    if mask_len != s * s {
        return Err((SamusStatus::Shape, format!("mask buffer holds {mask_len} bytes, need {}", s * s)));
    }
    let mask = m.segment(image, prompt).ffi()?;
    let out = std::slice::from_raw_parts_mut(mask_out, mask_len);
    for (o, v) in out.iter_mut().zip(mask.data()) {
        *o = *v as u8;
    }
    Ok(())
}

/// Segments one row-major `S×S` image (values in `[0, 1]`) from a
/// foreground point in pixel coordinates. Writes `S×S` bytes of 0/1.
///
/// # Safety
/// `image` must hold `image_len` floats and `mask_out` `mask_len` bytes.
#[no_mangle]
pub unsafe extern "C" fn samus_predict_point(
    model: *const SamusModel,
    image: *const f32,
    image_len: usize,
    x: f64,
    y: f64,
    mask_out: *mut u8,
    mask_len: usize,
) -> SamusStatus {
    guard(|| {
        if !(x.is_finite() && y.is_finite()) {
            return Err((SamusStatus::InvalidArgument, "point coordinates must be finite".into()));
        }
        let points = [vec![Point::foreground(x, y)]];
        predict(model, image, image_len, mask_out, mask_len, &Prompt::Points(&points))
    })
}

/// Segments one image with prompts generated for task bank `task`.
///
/// # Safety
/// As for `samus_predict_point`.
#[no_mangle]
pub unsafe extern "C" fn samus_predict_auto(
    model: *const SamusModel,
    image: *const f32,
    image_len: usize,
    task: usize,
    mask_out: *mut u8,
    mask_len: usize,
) -> SamusStatus {
    guard(|| predict(model, image, image_len, mask_out, mask_len, &Prompt::Task(task)))
}

unsafe fn masks(pred: *const u8, gt: *const u8, w: usize, h: usize) -> Result<(BinaryMask, BinaryMask), (SamusStatus, String)> {
    let n = w.checked_mul(h).ok_or((SamusStatus::InvalidArgument, "mask size overflows".to_string()))?;
    let to_mask = |s: &[u8]| BinaryMask::new(w, h, s.iter().map(|v| *v != 0).collect()).ffi();
    Ok((to_mask(slice(pred, n, "pred")?)?, to_mask(slice(gt, n, "gt")?)?))
}

/// Dice coefficient in percent of two `w×h` byte masks (nonzero = foreground).
///
/// # Safety
/// `pred` and `gt` must hold `w*h` bytes; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn samus_dice(pred: *const u8, gt: *const u8, w: usize, h: usize, out: *mut f64) -> SamusStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let (p, g) = masks(pred, gt, w, h)?;
        *out = dice(&p, &g).ffi()?;
        Ok(())
    })
}

/// Symmetric Hausdorff distance in pixels; the 95th-percentile variant when
/// `percentile95` is nonzero. Undefined (status `UNDEFINED_METRIC`) when
/// either mask is empty.
///
/// # Safety
/// As for `samus_dice`.
#[no_mangle]
pub unsafe extern "C" fn samus_hausdorff(
    pred: *const u8,
    gt: *const u8,
    w: usize,
    h: usize,
    percentile95: i32,
    out: *mut f64,
) -> SamusStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let (p, g) = masks(pred, gt, w, h)?;
        *out = if percentile95 != 0 { hausdorff95(&p, &g) } else { hausdorff(&p, &g) }.ffi()?;
        Ok(())
    })
}

/// Library version, static storage.
#[no_mangle]
pub extern "C" fn samus_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}
