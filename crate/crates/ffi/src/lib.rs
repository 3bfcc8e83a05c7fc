//! C ABI for loading trained models, predicting, and scoring masks.
//!
//! Every fallible function returns a [`CdslStatus`]. On failure a message is
//! available from [`cdsl_last_error`] on the same thread until the next call.
//! Handles are opaque and must be released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use cdsl::data::Grid;
use cdsl::experiment::{load_trained, Trained};
use cdsl::loss::combined_loss;
use cdsl::metrics::{confusion, ImageMetrics};
use cdsl::nn::NetworkConfig;
use cdsl::{Error, Tensor4};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CdslStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidArgument = 2,
    Config = 3,
    Data = 4,
    Shape = 5,
    Numeric = 6,
    Io = 7,
    Checkpoint = 8,
    Panic = 9,
}

/// A loaded single network or cascade.
pub struct CdslModel {
    inner: Trained,
}

/// Per-image overlap scores of a binary prediction.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct CdslMetrics {
    pub dice: f64,
    pub iou_fg: f64,
    pub iou_bg: f64,
    pub mean_iou: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes replaced");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> CdslStatus {
    match e {
        Error::Config(_) | Error::Build(_) => CdslStatus::Config,
        Error::Data(_) | Error::Png { .. } | Error::Csv(_) => CdslStatus::Data,
        Error::Shape(_) => CdslStatus::Shape,
        Error::Numeric(_) | Error::NoCachedForward => CdslStatus::Numeric,
        Error::Io { .. } => CdslStatus::Io,
        Error::Checkpoint { .. } | Error::Json(_) => CdslStatus::Checkpoint,
        Error::Fold { source, .. } => status_of(source),
    }
}

struct Failure(CdslStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(CdslStatus::NullArgument, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> CdslStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => CdslStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            CdslStatus::Panic
        }
    }
}

unsafe fn path_arg<'a>(p: *const c_char, what: &str) -> Result<&'a Path, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(Path::new)
        .map_err(|_| Failure(CdslStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

/// Message for the last failed call on this thread, or null. Valid until the next call.
#[no_mangle]
pub extern "C" fn cdsl_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn cdsl_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads `model.json` or `cascade.json` into `*out`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cdsl_model_load(path: *const c_char, out: *mut *mut CdslModel) -> CdslStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let path = path_arg(path, "path")?;
        if path.extension().and_then(|e| e.to_str()) != Some("json") {
            return Err(Failure(
                CdslStatus::InvalidArgument,
                format!("{}: expected a model.json or cascade.json manifest", path.display()),
            ));
        }
        let inner = load_trained(path, &NetworkConfig::default())?;
        *out = Box::into_raw(Box::new(CdslModel { inner }));
        Ok(())
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `model` must come from [`cdsl_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn cdsl_model_free(model: *mut CdslModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Input height and width the model expects.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn cdsl_model_input_size(
    model: *const CdslModel,
    height: *mut usize,
    width: *mut usize,
) -> CdslStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if height.is_null() || width.is_null() {
            return Err(null("height/width"));
        }
        let (h, w) = m.inner.segmenter().input_size();
        *height = h;
        *width = w;
        Ok(())
    })
}

/// 1 for a cascade, 0 for a single network.
///
/// # Safety
/// `model` must be a valid handle.
#[no_mangle]
pub unsafe extern "C" fn cdsl_model_is_cascade(model: *const CdslModel) -> i32 {
    model
        .as_ref()
        .map_or(0, |m| i32::from(matches!(m.inner, Trained::Cascade(_))))
}

/// Foreground probabilities for a row-major `height × width` grayscale image in [0,1].
///
/// # Safety
/// `image` and `probs` must each point to `height * width` floats.
#[no_mangle]
pub unsafe extern "C" fn cdsl_model_predict(
    model: *const CdslModel,
    image: *const f32,
    height: usize,
    width: usize,
    probs: *mut f32,
) -> CdslStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let len = height
            .checked_mul(width)
            .ok_or_else(|| Failure(CdslStatus::InvalidArgument, "height * width overflows".into()))?;
        let pixels = slice_arg(image, len, "image")?;
        if probs.is_null() {
            return Err(null("probs"));
        }
        let grid = Grid::new(height, width, pixels.to_vec())?;
        let p = m.inner.segmenter().predict_image(&grid)?;
        std::slice::from_raw_parts_mut(probs, len).copy_from_slice(p.data());
        Ok(())
    })
}

/// Dice and IoU of a binary prediction against a binary ground truth (nonzero = foreground).
///
/// # Safety
/// `pred` and `truth` must each point to `len` bytes; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn cdsl_metrics(
    pred: *const u8,
    truth: *const u8,
    len: usize,
    out: *mut CdslMetrics,
) -> CdslStatus {
    guard(|| {
        let to_grid = |s: &[u8]| Grid::new(1, len, s.iter().map(|&v| u8::from(v != 0)).collect());
        let p = to_grid(slice_arg(pred, len, "pred")?)?;
        let g = to_grid(slice_arg(truth, len, "truth")?)?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let m = ImageMetrics::from_confusion("ffi", &confusion(&p, &g)?);
        *out = CdslMetrics {
            dice: m.dice,
            iou_fg: m.iou_fg,
            iou_bg: m.iou_bg,
            mean_iou: m.mean_iou,
        };
        Ok(())
    })
}

/// BCE, minus soft Dice when `use_dice` is nonzero, of probabilities against 0/1 targets.
///
/// # Safety
/// `probs` and `targets` must each point to `len` doubles; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn cdsl_combined_loss(
    probs: *const f64,
    targets: *const f64,
    len: usize,
    use_dice: i32,
    out: *mut f64,
) -> CdslStatus {
    guard(|| {
        if len == 0 {
            return Err(Failure(CdslStatus::InvalidArgument, "len is 0".into()));
        }
        let p = Tensor4::from_vec([1, 1, 1, len], slice_arg(probs, len, "probs")?.to_vec())?;
        let g = Tensor4::from_vec([1, 1, 1, len], slice_arg(targets, len, "targets")?.to_vec())?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = combined_loss(&p, &g, use_dice != 0)?;
        Ok(())
    })
}
