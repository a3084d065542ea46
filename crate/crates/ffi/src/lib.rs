//! C ABI over the `hcp` crate.
//!
//! Every fallible function returns an [`HcpStatus`]; on failure the message is
//! kept per thread and can be read with [`hcp_last_error_message`]. Handles are
//! opaque and must be released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use hcp::bbox::BoundingBox;
use hcp::eval::average_precision;
use hcp::harness::PipelineConfig;
use hcp::hcp::{predict_image, predict_whole_image, FusionOrder};
use hcp::hselect::HSConfig;
use hcp::image::RgbImage;
use hcp::nn::{Checkpoint, Stage};
use hcp::objectness::{generate_proposals, ObjectnessConfig, ObjectnessModel};
use hcp::{Error, ErrorCategory};

/// Result codes. Values match the CLI exit statuses.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HcpStatus {
    Ok = 0,
    /// Bad argument, including null pointers and malformed UTF-8 paths.
    Usage = 2,
    Io = 3,
    Format = 4,
    Data = 5,
    StageMismatch = 6,
    Numeric = 7,
    /// A Rust panic was caught at the boundary.
    Internal = 8,
}

impl From<ErrorCategory> for HcpStatus {
    fn from(c: ErrorCategory) -> Self {
        match c {
            ErrorCategory::Usage => HcpStatus::Usage,
            ErrorCategory::Io => HcpStatus::Io,
            ErrorCategory::Format => HcpStatus::Format,
            ErrorCategory::Data => HcpStatus::Data,
            ErrorCategory::StageMismatch => HcpStatus::StageMismatch,
            ErrorCategory::Numeric => HcpStatus::Numeric,
        }
    }
}

/// Training stage recorded in a checkpoint.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HcpStage {
    Pretrain = 0,
    Ift = 1,
    Hft = 2,
}

/// Axis-aligned box in pixels, half-open on the right and bottom.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HcpBox {
    pub x0: usize,
    pub y0: usize,
    pub width: usize,
    pub height: usize,
}

/// A loaded checkpoint plus, optionally, the objectness model used to
/// propose hypotheses.
pub struct HcpClassifier {
    checkpoint: Checkpoint,
    objectness: Option<ObjectnessModel>,
    proposals: usize,
    objectness_cfg: ObjectnessConfig,
    hs: HSConfig,
    order: FusionOrder,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_last_error(msg: String) {
    let msg = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn fail(err: Error) -> HcpStatus {
    let status = err.category().into();
    set_last_error(err.to_string());
    status
}

fn guard(f: impl FnOnce() -> Result<(), Error>) -> HcpStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => HcpStatus::Ok,
        Ok(Err(e)) => fail(e),
        Err(_) => {
            set_last_error("internal panic".into());
            HcpStatus::Internal
        }
    }
}

fn null(what: &str) -> Error {
    Error::InvalidArgument(format!("{what} is null"))
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, Error> {
    if p.is_null() {
        return Err(null(what));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Error::InvalidArgument(format!("{what} is not UTF-8")))?;
    Ok(PathBuf::from(s))
}

/// Message of the last failed call on this thread; empty if none. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn hcp_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn hcp_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a checkpoint and, if `objectness_path` is non-null, an objectness
/// model. Prediction settings take the library defaults.
///
/// # Safety
/// Paths must be NUL-terminated strings or (for `objectness_path`) null;
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn hcp_classifier_load(
    checkpoint_path: *const c_char,
    objectness_path: *const c_char,
    out: *mut *mut HcpClassifier,
) -> HcpStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let checkpoint = Checkpoint::load(path_arg(checkpoint_path, "checkpoint_path")?)?;
        let objectness = if objectness_path.is_null() {
            None
        } else {
            Some(ObjectnessModel::load_json(path_arg(objectness_path, "objectness_path")?)?)
        };
        let cfg = PipelineConfig::default();
        let handle = HcpClassifier {
            checkpoint,
            objectness,
            proposals: cfg.proposals,
            objectness_cfg: cfg.objectness(),
            hs: cfg.hs_test(),
            order: cfg.fusion_order,
        };
        *out = Box::into_raw(Box::new(handle));
        Ok(())
    })
}

/// # Safety
/// `handle` must come from [`hcp_classifier_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn hcp_classifier_free(handle: *mut HcpClassifier) {
    if !handle.is_null() {
        drop(Box::from_raw(handle));
    }
}

/// Number of class scores [`hcp_classifier_predict`] writes; 0 for a null handle.
///
/// # Safety
/// `handle` must be null or a live classifier.
#[no_mangle]
pub unsafe extern "C" fn hcp_classifier_num_classes(handle: *const HcpClassifier) -> usize {
    handle
        .as_ref()
        .map_or(0, |h| h.checkpoint.network.output_shape().iter().product())
}

/// # Safety
/// `handle` must be a live classifier.
#[no_mangle]
pub unsafe extern "C" fn hcp_classifier_stage(handle: *const HcpClassifier, out: *mut HcpStage) -> HcpStatus {
    guard(|| {
        let h = handle.as_ref().ok_or_else(|| null("handle"))?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = match h.checkpoint.stage {
            Stage::Pretrain => HcpStage::Pretrain,
            Stage::Ift => HcpStage::Ift,
            Stage::Hft => HcpStage::Hft,
        };
        Ok(())
    })
}

/// Scores an interleaved RGB8 image of `width * height * 3` bytes.
///
/// An hft checkpoint with an objectness model predicts through hypotheses;
/// any other checkpoint scores the whole image. `scores` must hold
/// `scores_len >= hcp_classifier_num_classes(handle)` values.
///
/// # Safety
/// All pointers must be valid for the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn hcp_classifier_predict(
    handle: *const HcpClassifier,
    rgb: *const u8,
    width: usize,
    height: usize,
    scores: *mut f64,
    scores_len: usize,
) -> HcpStatus {
    guard(|| {
        let h = handle.as_ref().ok_or_else(|| null("handle"))?;
        if rgb.is_null() {
            return Err(null("rgb"));
        }
        if scores.is_null() {
            return Err(null("scores"));
        }
        let len = width
            .checked_mul(height)
            .and_then(|n| n.checked_mul(3))
            .ok_or_else(|| Error::InvalidArgument("image size overflows".into()))?;
        let image = RgbImage::new(width, height, std::slice::from_raw_parts(rgb, len).to_vec())?;
        let result = match (&h.objectness, h.checkpoint.stage) {
            (Some(model), Stage::Hft) => {
                let props = generate_proposals(&image, model, h.proposals, &h.objectness_cfg)?;
                predict_image(&h.checkpoint, &image, &props, &h.hs, h.order)?.scores
            }
            _ => predict_whole_image(&h.checkpoint, &image)?,
        };
        if scores_len < result.len() {
            return Err(Error::InvalidArgument(format!(
                "scores buffer holds {scores_len} values, need {}",
                result.len()
            )));
        }
        std::slice::from_raw_parts_mut(scores, result.len()).copy_from_slice(&result);
        Ok(())
    })
}

/// Intersection over union of two boxes; 0 when both are empty.
#[no_mangle]
pub extern "C" fn hcp_iou(a: HcpBox, b: HcpBox) -> f64 {
    let conv = |b: HcpBox| BoundingBox {
        x0: b.x0,
        y0: b.y0,
        w: b.width,
        h: b.height,
    };
    let (a, b) = (conv(a), conv(b));
    if a.area() == 0 && b.area() == 0 {
        return 0.0;
    }
    a.iou(&b)
}

/// 11-point average precision of `n` scores against 0/1 labels.
///
/// # Safety
/// `scores` and `labels` must hold `n` values; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn hcp_average_precision(
    scores: *const f64,
    labels: *const u8,
    n: usize,
    out: *mut f64,
) -> HcpStatus {
    guard(|| {
        if scores.is_null() || labels.is_null() {
            return Err(null("scores or labels"));
        }
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let scores = std::slice::from_raw_parts(scores, n);
        let labels: Vec<bool> = std::slice::from_raw_parts(labels, n).iter().map(|&l| l != 0).collect();
        *out = average_precision(scores, &labels)?;
        Ok(())
    })
}
