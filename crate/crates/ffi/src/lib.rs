//! C interface over a trained segmentation checkpoint.
//!
//! Every fallible function returns a `SegclrStatus`; on failure the message
//! is available from `segclr_last_error` on the same thread. Handles are
//! opaque and owned by the caller once returned. A loaded model is read-only,
//! so one handle may be used for segmentation from several threads at once.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use segclr::error::Error;
use segclr::evaluation::{dice_score, uvd};
use segclr::model::{load_checkpoint, ModelState, ParamMode};
use segclr::synthdata::Mask;
use segclr::tensor::Tensor;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SegclrStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    Io = 4,
    Format = 5,
    Runtime = 6,
    Panic = 7,
}

/// A loaded checkpoint.
pub struct SegclrModel {
    state: ModelState<f32>,
    class_names: Vec<CString>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn status_of(e: &Error) -> SegclrStatus {
    match e {
        Error::Shape(_) => SegclrStatus::Shape,
        Error::Validation { .. } | Error::Missing(_) => SegclrStatus::InvalidArgument,
        Error::Io { .. } => SegclrStatus::Io,
        Error::Format { .. } => SegclrStatus::Format,
        _ => SegclrStatus::Runtime,
    }
}

struct Fail(SegclrStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(SegclrStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: impl Into<String>) -> Fail {
    Fail(SegclrStatus::InvalidArgument, msg.into())
}

/// Runs `f`, turning errors and panics into a status plus last-error text.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> SegclrStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            SegclrStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
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
            SegclrStatus::Panic
        }
    }
}

unsafe fn model_ref<'a>(model: *const SegclrModel) -> Result<&'a SegclrModel, Fail> {
    model.as_ref().ok_or_else(|| null("model"))
}

unsafe fn out_ref<'a, T>(out: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    out.as_mut().ok_or_else(|| null(what))
}

/// Library version, static NUL-terminated string.
#[no_mangle]
pub extern "C" fn segclr_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or NULL after a success.
/// Valid until the next call into the library on this thread.
#[no_mangle]
pub extern "C" fn segclr_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |s| s.as_ptr()))
}

/// Loads a checkpoint for inference. On success `*out` owns the handle;
/// release it with `segclr_model_free`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn segclr_model_load(path: *const c_char, out: *mut *mut SegclrModel) -> SegclrStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        *out = std::ptr::null_mut();
        if path.is_null() {
            return Err(null("path"));
        }
        let path = CStr::from_ptr(path).to_str().map_err(|_| invalid("path is not UTF-8"))?;
        let state = load_checkpoint::<f32>(Path::new(path))?.into_inference();
        let class_names = state
            .arch
            .classes()
            .into_iter()
            .map(|c| CString::new(c).map_err(|_| invalid("class name contains NUL")))
            .collect::<Result<_, _>>()?;
        *out = Box::into_raw(Box::new(SegclrModel { state, class_names }));
        Ok(())
    })
}

/// # Safety
/// `model` must come from `segclr_model_load` and not be used afterwards.
/// NULL is ignored.
#[no_mangle]
pub unsafe extern "C" fn segclr_model_free(model: *mut SegclrModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Slice height and width the model accepts.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn segclr_model_input_shape(
    model: *const SegclrModel,
    height: *mut usize,
    width: *mut usize,
) -> SegclrStatus {
    guard(|| {
        let m = model_ref(model)?;
        let (h, w) = m.state.arch.input_shape;
        *out_ref(height, "height")? = h;
        *out_ref(width, "width")? = w;
        Ok(())
    })
}

/// Number of output channels, one per class.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn segclr_model_n_classes(model: *const SegclrModel, out: *mut usize) -> SegclrStatus {
    guard(|| {
        *out_ref(out, "out")? = model_ref(model)?.class_names.len();
        Ok(())
    })
}

/// Name of output channel `index`, or NULL when out of range. Owned by the
/// model handle.
///
/// # Safety
/// `model` must be a valid handle or NULL.
#[no_mangle]
pub unsafe extern "C" fn segclr_model_class_name(model: *const SegclrModel, index: usize) -> *const c_char {
    match model.as_ref().and_then(|m| m.class_names.get(index)) {
        Some(s) => s.as_ptr(),
        None => std::ptr::null(),
    }
}

/// Parameters used at inference time.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn segclr_model_param_count(model: *const SegclrModel, out: *mut usize) -> SegclrStatus {
    guard(|| {
        *out_ref(out, "out")? = model_ref(model)?.state.count_params(ParamMode::Inference);
        Ok(())
    })
}

unsafe fn probabilities(
    m: &SegclrModel,
    image: *const f32,
    n_slices: usize,
    height: usize,
    width: usize,
    out_len: usize,
) -> Result<Tensor<f32>, Fail> {
    if image.is_null() {
        return Err(null("image"));
    }
    if n_slices == 0 {
        return Err(invalid("n_slices must be positive"));
    }
    let expected = m.state.arch.input_shape;
    if (height, width) != expected {
        return Err(Fail(
            SegclrStatus::Shape,
            format!("slices are {height}x{width}, model expects {}x{}", expected.0, expected.1),
        ));
    }
    let need = n_slices * m.class_names.len() * height * width;
    if out_len != need {
        return Err(Fail(SegclrStatus::Shape, format!("output holds {out_len} values, need {need}")));
    }
    let pixels = std::slice::from_raw_parts(image, n_slices * height * width).to_vec();
    if pixels.iter().any(|v| !v.is_finite()) {
        return Err(invalid("image contains non-finite values"));
    }
    let x = Tensor::from_vec(n_slices, 1, height, width, pixels);
    Ok(m.state.segment_tensor(&x)?)
}

/// Per-class probabilities for `n_slices` grey slices laid out
/// `[slice][row][col]`. `probs` receives `[slice][class][row][col]` and must
/// hold exactly `n_slices * n_classes * height * width` values.
///
/// # Safety
/// `image` must point to `n_slices * height * width` floats and `probs` to
/// `out_len` writable floats.
#[no_mangle]
pub unsafe extern "C" fn segclr_model_predict(
    model: *const SegclrModel,
    image: *const f32,
    n_slices: usize,
    height: usize,
    width: usize,
    probs: *mut f32,
    out_len: usize,
) -> SegclrStatus {
    guard(|| {
        let m = model_ref(model)?;
        if probs.is_null() {
            return Err(null("probs"));
        }
        let p = probabilities(m, image, n_slices, height, width, out_len)?;
        std::slice::from_raw_parts_mut(probs, out_len).copy_from_slice(&p.data);
        Ok(())
    })
}

/// Binary masks, 1 where the class probability is `>= threshold`, in the
/// layout of `segclr_model_predict`.
///
/// # Safety
/// As for `segclr_model_predict`, with `masks` pointing to `out_len` bytes.
#[no_mangle]
pub unsafe extern "C" fn segclr_model_segment(
    model: *const SegclrModel,
    image: *const f32,
    n_slices: usize,
    height: usize,
    width: usize,
    threshold: f64,
    masks: *mut u8,
    out_len: usize,
) -> SegclrStatus {
    guard(|| {
        let m = model_ref(model)?;
        if masks.is_null() {
            return Err(null("masks"));
        }
        if !(0.0..=1.0).contains(&threshold) {
            return Err(invalid("threshold must lie in [0, 1]"));
        }
        let p = probabilities(m, image, n_slices, height, width, out_len)?;
        let out = std::slice::from_raw_parts_mut(masks, out_len);
        for (o, &v) in out.iter_mut().zip(&p.data) {
            *o = u8::from(v as f64 >= threshold);
        }
        Ok(())
    })
}

unsafe fn mask_pair(pred: *const u8, truth: *const u8, len: usize) -> Result<(Mask, Mask), Fail> {
    if pred.is_null() {
        return Err(null("pred"));
    }
    if truth.is_null() {
        return Err(null("truth"));
    }
    let read = |p: *const u8| Mask {
        height: 1,
        width: len,
        data: std::slice::from_raw_parts(p, len).iter().map(|&v| u8::from(v != 0)).collect(),
    };
    Ok((read(pred), read(truth)))
}

/// Dice in percent of two binary masks of `len` pixels; nonzero is
/// foreground. Two empty masks score 100.
///
/// # Safety
/// `pred` and `truth` must point to `len` bytes, `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn segclr_dice_score(
    pred: *const u8,
    truth: *const u8,
    len: usize,
    out: *mut f64,
) -> SegclrStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        let (p, t) = mask_pair(pred, truth, len)?;
        *out = dice_score(&p, &t)?;
        Ok(())
    })
}

/// Volume of the symmetric difference of two masks of one slice, in fL.
///
/// # Safety
/// As for `segclr_dice_score`.
#[no_mangle]
pub unsafe extern "C" fn segclr_uvd(
    pred: *const u8,
    truth: *const u8,
    len: usize,
    pixel_area_um2: f64,
    slice_spacing_um: f64,
    out: *mut f64,
) -> SegclrStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        let (p, t) = mask_pair(pred, truth, len)?;
        *out = uvd(&p, &t, pixel_area_um2, slice_spacing_um)?;
        Ok(())
    })
}
