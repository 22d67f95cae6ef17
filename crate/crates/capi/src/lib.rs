//! C ABI for embedding the inspection toolkit from other languages.
//!
//! The surface follows the usual C conventions: opaque handles with
//! new/free pairs, status codes on every fallible call, a thread-local
//! last-error message, and caller-owned output buffers. The matching header
//! is generated into `include/bladescan.h` at build time.

use std::cell::RefCell;
use std::ffi::{CStr, CString};
use std::ptr;

use libc::{c_char, size_t};

use bladescan::dataset::{
    parse_label_file, parse_prediction_file, Annotation, BBox, ClassTable, Detection,
};
use bladescan::detector::DetectionSet;
use bladescan::error::Error;
use bladescan::kvmap::{render_text, summarize, KvConfig};
use bladescan::metrics::{evaluate_samples, iou, EvalSample};
use bladescan::tiler::{windows_for_dims, TilingConfig};

/// Status code returned by every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BsStatus {
    Ok = 0,
    /// A pointer argument was null or an argument was out of range.
    InvalidArgument = 1,
    /// Well-formed input violating a domain rule.
    DomainError = 2,
    /// Structurally malformed input text.
    ParseError = 3,
    /// The provided buffer cannot hold the result.
    BufferTooSmall = 4,
    /// Any other failure; see `bs_last_error`.
    Internal = 5,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(message: &str) {
    let owned = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|slot| *slot.borrow_mut() = owned);
}

fn status_of(error: &Error) -> BsStatus {
    match error {
        Error::Parse { .. } => BsStatus::ParseError,
        Error::Domain(_) => BsStatus::DomainError,
        _ => BsStatus::Internal,
    }
}

fn fail(error: &Error) -> BsStatus {
    set_error(&error.to_string());
    status_of(error)
}

fn invalid(message: &str) -> BsStatus {
    set_error(message);
    BsStatus::InvalidArgument
}

/// Library version string; static storage, do not free.
#[no_mangle]
pub extern "C" fn bs_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Copies the last error message on this thread into `buffer` (always
/// NUL-terminated when capacity > 0) and returns the full message length
/// in bytes, excluding the terminator. Call with a null buffer to size it.
///
/// # Safety
/// `buffer` must either be null or point to at least `capacity` writable
/// bytes.
#[no_mangle]
pub unsafe extern "C" fn bs_last_error(buffer: *mut c_char, capacity: size_t) -> size_t {
    LAST_ERROR.with(|slot| {
        let message = slot.borrow();
        let bytes = message.as_bytes();
        if !buffer.is_null() && capacity > 0 {
            let n = bytes.len().min(capacity - 1);
            ptr::copy_nonoverlapping(bytes.as_ptr() as *const c_char, buffer, n);
            *buffer.add(n) = 0;
        }
        bytes.len()
    })
}

/// Opaque, growable list of detections (class id, pixel box, confidence).
/// Ground-truth boxes are represented with confidence 1.0.
pub struct BsDetections {
    items: Vec<Detection>,
}

/// Allocates an empty detection list; free with `bs_detections_free`.
#[no_mangle]
pub extern "C" fn bs_detections_new() -> *mut BsDetections {
    Box::into_raw(Box::new(BsDetections { items: Vec::new() }))
}

/// Frees a list returned by `bs_detections_new`. A null handle is a no-op.
///
/// # Safety
/// `handle` must be null or a pointer previously returned by
/// `bs_detections_new` that has not been freed.
#[no_mangle]
pub unsafe extern "C" fn bs_detections_free(handle: *mut BsDetections) {
    if !handle.is_null() {
        drop(Box::from_raw(handle));
    }
}

/// Appends one detection. Coordinates are pixel-space corners with
/// `x1 < x2`, `y1 < y2`; confidence lies in [0, 1].
///
/// # Safety
/// `handle` must be a valid, non-null list handle.
#[no_mangle]
pub unsafe extern "C" fn bs_detections_push(
    handle: *mut BsDetections,
    class_id: u32,
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
    confidence: f64,
) -> BsStatus {
    let Some(list) = handle.as_mut() else {
        return invalid("null detections handle");
    };
    if class_id > u8::MAX as u32 {
        return invalid("class id out of range");
    }
    let bbox = match BBox::new(x1, y1, x2, y2) {
        Ok(b) => b,
        Err(e) => return fail(&e),
    };
    match Detection::new(class_id as u8, bbox, confidence) {
        Ok(det) => {
            list.items.push(det);
            BsStatus::Ok
        }
        Err(e) => fail(&e),
    }
}

/// Number of detections in the list.
///
/// # Safety
/// `handle` must be null or a valid list handle; null yields 0.
#[no_mangle]
pub unsafe extern "C" fn bs_detections_len(handle: *const BsDetections) -> size_t {
    handle.as_ref().map(|l| l.items.len()).unwrap_or(0)
}

unsafe fn utf8_arg<'a>(text: *const c_char) -> Result<&'a str, BsStatus> {
    if text.is_null() {
        return Err(invalid("null text argument"));
    }
    CStr::from_ptr(text)
        .to_str()
        .map_err(|_| invalid("text is not valid UTF-8"))
}

/// Appends annotations parsed from normalized `class cx cy w h` label text,
/// with confidence fixed at 1.0.
///
/// # Safety
/// `handle` must be a valid list handle; `text` must be a NUL-terminated
/// UTF-8 string.
#[no_mangle]
pub unsafe extern "C" fn bs_detections_parse_labels(
    handle: *mut BsDetections,
    text: *const c_char,
    width: u32,
    height: u32,
) -> BsStatus {
    let Some(list) = handle.as_mut() else {
        return invalid("null detections handle");
    };
    let text = match utf8_arg(text) {
        Ok(t) => t,
        Err(status) => return status,
    };
    match parse_label_file(text, width, height) {
        Ok(annotations) => {
            list.items.extend(annotations.into_iter().map(|a| Detection {
                class_id: a.class_id,
                bbox: a.bbox,
                confidence: 1.0,
            }));
            BsStatus::Ok
        }
        Err(e) => fail(&e),
    }
}

/// Appends detections parsed from `class cx cy w h confidence` prediction
/// text.
///
/// # Safety
/// Same contract as `bs_detections_parse_labels`.
#[no_mangle]
pub unsafe extern "C" fn bs_detections_parse_predictions(
    handle: *mut BsDetections,
    text: *const c_char,
    width: u32,
    height: u32,
) -> BsStatus {
    let Some(list) = handle.as_mut() else {
        return invalid("null detections handle");
    };
    let text = match utf8_arg(text) {
        Ok(t) => t,
        Err(status) => return status,
    };
    match parse_prediction_file(text, width, height) {
        Ok(detections) => {
            list.items.extend(detections);
            BsStatus::Ok
        }
        Err(e) => fail(&e),
    }
}

/// Tiling parameters; see `bs_tiling_config_default` for the defaults.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct BsTilingConfig {
    pub base_width: u32,
    pub base_height: u32,
    pub scale_factor: f64,
    pub scale_count: u32,
    pub overlap_ratio: f64,
    pub min_visibility: f64,
    pub edge_clamp: bool,
}

impl From<BsTilingConfig> for TilingConfig {
    fn from(c: BsTilingConfig) -> Self {
        TilingConfig {
            base_width: c.base_width,
            base_height: c.base_height,
            scale_factor: c.scale_factor,
            scale_count: c.scale_count,
            overlap_ratio: c.overlap_ratio,
            min_visibility: c.min_visibility,
            edge_clamp: c.edge_clamp,
        }
    }
}

#[no_mangle]
pub extern "C" fn bs_tiling_config_default() -> BsTilingConfig {
    let d = TilingConfig::default();
    BsTilingConfig {
        base_width: d.base_width,
        base_height: d.base_height,
        scale_factor: d.scale_factor,
        scale_count: d.scale_count,
        overlap_ratio: d.overlap_ratio,
        min_visibility: d.min_visibility,
        edge_clamp: d.edge_clamp,
    }
}

/// One crop rectangle produced by the tiler.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct BsCropWindow {
    pub scale_index: u32,
    pub origin_x: u32,
    pub origin_y: u32,
    pub width: u32,
    pub height: u32,
}

/// Enumerates the crop windows for an image. `out_count` always receives the
/// total window count. Pass a null buffer to size it; a non-null buffer with
/// insufficient capacity yields `BufferTooSmall` with nothing written.
///
/// # Safety
/// `config` and `out_count` must be non-null; `out_windows` must be null or
/// point to at least `capacity` elements.
#[no_mangle]
pub unsafe extern "C" fn bs_tile_windows(
    image_width: u32,
    image_height: u32,
    config: *const BsTilingConfig,
    out_windows: *mut BsCropWindow,
    capacity: size_t,
    out_count: *mut size_t,
) -> BsStatus {
    let Some(config) = config.as_ref() else {
        return invalid("null tiling config");
    };
    let Some(out_count) = out_count.as_mut() else {
        return invalid("null out_count");
    };
    let windows = match windows_for_dims(image_width, image_height, &(*config).into()) {
        Ok(w) => w,
        Err(e) => return fail(&e),
    };
    *out_count = windows.len();
    if out_windows.is_null() {
        return BsStatus::Ok;
    }
    if capacity < windows.len() {
        set_error("window buffer too small");
        return BsStatus::BufferTooSmall;
    }
    for (i, w) in windows.iter().enumerate() {
        *out_windows.add(i) = BsCropWindow {
            scale_index: w.scale_index,
            origin_x: w.origin_x,
            origin_y: w.origin_y,
            width: w.width,
            height: w.height,
        };
    }
    BsStatus::Ok
}

/// Renders the key-value fault summary text for a detection list over an
/// image of the given size. On success `*out_text` receives a heap string
/// owned by the caller; free it with `bs_string_free`.
///
/// # Safety
/// `handle` must be a valid list handle and `out_text` non-null.
#[no_mangle]
pub unsafe extern "C" fn bs_kv_render(
    handle: *const BsDetections,
    image_width: u32,
    image_height: u32,
    area_threshold_fraction: f64,
    out_text: *mut *mut c_char,
) -> BsStatus {
    let Some(list) = handle.as_ref() else {
        return invalid("null detections handle");
    };
    let Some(out_text) = out_text.as_mut() else {
        return invalid("null out_text");
    };
    let config = KvConfig {
        area_threshold_fraction,
        ..KvConfig::default()
    };
    let dset = DetectionSet {
        image_path: "<ffi>".into(),
        image_width,
        image_height,
        detections: list.items.clone(),
        provider_tag: "ffi".into(),
    };
    let summary = match summarize(&dset, image_width as f64 * image_height as f64, &config) {
        Ok(s) => s,
        Err(e) => return fail(&e),
    };
    let text = render_text(&summary, &ClassTable::builtin());
    match CString::new(text) {
        Ok(owned) => {
            *out_text = owned.into_raw();
            BsStatus::Ok
        }
        Err(_) => {
            set_error("rendered text contains an interior NUL");
            BsStatus::Internal
        }
    }
}

/// Frees a string returned by this library. A null pointer is a no-op.
///
/// # Safety
/// `text` must be null or a pointer previously returned by `bs_kv_render`
/// that has not been freed.
#[no_mangle]
pub unsafe extern "C" fn bs_string_free(text: *mut c_char) {
    if !text.is_null() {
        drop(CString::from_raw(text));
    }
}

/// Detection metrics at one IoU threshold.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct BsEvalResult {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub accuracy: f64,
    pub map: f64,
}

/// Scores predictions against ground truths (confidences on the
/// ground-truth list are ignored). Both lists must share one image
/// coordinate frame.
///
/// # Safety
/// All pointer arguments must be valid and non-null.
#[no_mangle]
pub unsafe extern "C" fn bs_evaluate(
    predictions: *const BsDetections,
    ground_truths: *const BsDetections,
    iou_threshold: f64,
    out_result: *mut BsEvalResult,
) -> BsStatus {
    let (Some(preds), Some(gts)) = (predictions.as_ref(), ground_truths.as_ref()) else {
        return invalid("null detections handle");
    };
    let Some(out_result) = out_result.as_mut() else {
        return invalid("null out_result");
    };
    let sample = EvalSample {
        predictions: preds.items.clone(),
        ground_truths: gts
            .items
            .iter()
            .map(|d| Annotation {
                class_id: d.class_id,
                bbox: d.bbox,
            })
            .collect(),
    };
    match evaluate_samples(&[sample], &ClassTable::builtin(), iou_threshold) {
        Ok(result) => {
            *out_result = BsEvalResult {
                precision: result.precision,
                recall: result.recall,
                f1: result.f1,
                accuracy: result.accuracy,
                map: result.map50,
            };
            BsStatus::Ok
        }
        Err(e) => fail(&e),
    }
}

/// Intersection over union of two pixel-space boxes; 0 for degenerate or
/// disjoint boxes.
#[no_mangle]
pub extern "C" fn bs_iou(
    ax1: f64,
    ay1: f64,
    ax2: f64,
    ay2: f64,
    bx1: f64,
    by1: f64,
    bx2: f64,
    by2: f64,
) -> f64 {
    match (BBox::new(ax1, ay1, ax2, ay2), BBox::new(bx1, by1, bx2, by2)) {
        (Ok(a), Ok(b)) => iou(&a, &b),
        _ => 0.0,
    }
}
