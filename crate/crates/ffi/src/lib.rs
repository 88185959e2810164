//! C interface to the attnpool video classifier.
//!
//! The surface is deliberately small: load a trained checkpoint into an
//! opaque model handle, load a descriptor clip (`.feat` file), and ask for
//! pooled class probabilities or per-frame importance. Every function
//! returns an [`AttnpoolStatus`]; on failure a thread-local message with the
//! details is available from [`attnpool_last_error`].
//!
//! The generated header lives at `include/attnpool.h` and is refreshed on
//! every build.

use std::cell::RefCell;
use std::ffi::{CStr, CString};
use std::os::raw::c_char;
use std::path::Path;

use attnpool::backbone::{load_feature_sequence, FeatureMap};
use attnpool::error::Error;
use attnpool::model::{forward_video, ModelParams, VideoFrames};
use attnpool::temporal::{frame_importance, joint_softmax, pooled_probs, Pooling};
use attnpool::training::load_checkpoint;

/// Result of every fallible call in this interface.
#[repr(C)]
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum AttnpoolStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullArgument = 1,
    /// A string argument was not valid UTF-8.
    InvalidUtf8 = 2,
    /// Inputs violate a documented precondition (shape mismatch, bad label…).
    Contract = 3,
    /// A file exists but its contents are not a valid checkpoint/clip.
    Format = 4,
    /// A numerical guard tripped (non-finite values).
    Numeric = 5,
    /// The operating system reported an I/O failure.
    Io = 6,
    /// An output buffer is smaller than the documented requirement.
    BufferTooSmall = 7,
}

/// Temporal pooling strategy for [`attnpool_predict`].
#[repr(C)]
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum AttnpoolPooling {
    /// Joint softmax over frames and classes, marginalized over frames.
    Tp = 0,
    /// Softmax of the per-class mean score.
    Avg = 1,
    /// Softmax of the per-class max score.
    Max = 2,
    /// Normalized product of per-frame posteriors.
    Indep = 3,
}

impl From<AttnpoolPooling> for Pooling {
    fn from(p: AttnpoolPooling) -> Pooling {
        match p {
            AttnpoolPooling::Tp => Pooling::Tp,
            AttnpoolPooling::Avg => Pooling::Avg,
            AttnpoolPooling::Max => Pooling::Max,
            AttnpoolPooling::Indep => Pooling::Indep,
        }
    }
}

/// A trained model loaded from a checkpoint. Opaque; release with
/// [`attnpool_model_free`].
pub struct AttnpoolModel {
    params: ModelParams,
}

/// One video's precomputed descriptor frames. Opaque; release with
/// [`attnpool_clip_free`].
pub struct AttnpoolClip {
    frames: Vec<FeatureMap>,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn fail(status: AttnpoolStatus, message: impl std::fmt::Display) -> AttnpoolStatus {
    let text = message.to_string().replace('\0', " ");
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(text).expect("NUL bytes were replaced");
    });
    status
}

fn fail_error(e: Error) -> AttnpoolStatus {
    let status = match e {
        Error::Contract(_) => AttnpoolStatus::Contract,
        Error::Format(_) | Error::Json(_) => AttnpoolStatus::Format,
        Error::Numeric(_) => AttnpoolStatus::Numeric,
        Error::Io(_) => AttnpoolStatus::Io,
    };
    fail(status, e)
}

/// `path` must be a non-null NUL-terminated string.
unsafe fn path_arg<'a>(path: *const c_char, what: &str) -> Result<&'a Path, AttnpoolStatus> {
    if path.is_null() {
        return Err(fail(
            AttnpoolStatus::NullArgument,
            format!("{what} path is null"),
        ));
    }
    match CStr::from_ptr(path).to_str() {
        Ok(s) => Ok(Path::new(s)),
        Err(_) => Err(fail(
            AttnpoolStatus::InvalidUtf8,
            format!("{what} path is not valid UTF-8"),
        )),
    }
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn attnpool_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Message describing the most recent failure on the calling thread.
///
/// The pointer stays valid until the next failing call on the same thread.
/// Before any failure it is the empty string, never null.
#[no_mangle]
pub extern "C" fn attnpool_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Load a training checkpoint (`checkpoint.json`) into a model handle.
///
/// On success writes the handle to `*out` and returns `Ok`; the caller owns
/// the handle and must release it with [`attnpool_model_free`].
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn attnpool_model_load(
    path: *const c_char,
    out: *mut *mut AttnpoolModel,
) -> AttnpoolStatus {
    if out.is_null() {
        return fail(AttnpoolStatus::NullArgument, "output handle is null");
    }
    let path = match path_arg(path, "checkpoint") {
        Ok(p) => p,
        Err(status) => return status,
    };
    match load_checkpoint(path) {
        Ok((_, state)) => {
            *out = Box::into_raw(Box::new(AttnpoolModel {
                params: state.params,
            }));
            AttnpoolStatus::Ok
        }
        Err(e) => fail_error(e),
    }
}

/// Release a model handle. Null is a no-op.
///
/// # Safety
/// `model` must be a handle from [`attnpool_model_load`], not yet freed.
#[no_mangle]
pub unsafe extern "C" fn attnpool_model_free(model: *mut AttnpoolModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of classes the model scores; 0 when `model` is null.
///
/// # Safety
/// `model` must be null or a live handle from [`attnpool_model_load`].
#[no_mangle]
pub unsafe extern "C" fn attnpool_model_num_classes(model: *const AttnpoolModel) -> usize {
    if model.is_null() {
        return 0;
    }
    (*model).params.config.num_classes
}

/// Load a descriptor clip (`.feat` file) into a clip handle.
///
/// On success writes the handle to `*out`; release it with
/// [`attnpool_clip_free`].
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn attnpool_clip_load(
    path: *const c_char,
    out: *mut *mut AttnpoolClip,
) -> AttnpoolStatus {
    if out.is_null() {
        return fail(AttnpoolStatus::NullArgument, "output handle is null");
    }
    let path = match path_arg(path, "clip") {
        Ok(p) => p,
        Err(status) => return status,
    };
    match load_feature_sequence(path) {
        Ok(frames) => {
            *out = Box::into_raw(Box::new(AttnpoolClip { frames }));
            AttnpoolStatus::Ok
        }
        Err(e) => fail_error(e),
    }
}

/// Release a clip handle. Null is a no-op.
///
/// # Safety
/// `clip` must be a handle from [`attnpool_clip_load`], not yet freed.
#[no_mangle]
pub unsafe extern "C" fn attnpool_clip_free(clip: *mut AttnpoolClip) {
    if !clip.is_null() {
        drop(Box::from_raw(clip));
    }
}

/// Number of frames in the clip; 0 when `clip` is null.
///
/// # Safety
/// `clip` must be null or a live handle from [`attnpool_clip_load`].
#[no_mangle]
pub unsafe extern "C" fn attnpool_clip_frames(clip: *const AttnpoolClip) -> usize {
    if clip.is_null() {
        return 0;
    }
    (*clip).frames.len()
}

/// Classify a clip: writes one probability per class (they sum to 1) into
/// `probs`, which must hold at least [`attnpool_model_num_classes`] values.
///
/// # Safety
/// `model` and `clip` must be live handles; `probs` must point to at least
/// `probs_capacity` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn attnpool_predict(
    model: *const AttnpoolModel,
    clip: *const AttnpoolClip,
    pooling: AttnpoolPooling,
    probs: *mut f64,
    probs_capacity: usize,
) -> AttnpoolStatus {
    if model.is_null() || clip.is_null() || probs.is_null() {
        return fail(AttnpoolStatus::NullArgument, "model, clip, and probs must be non-null");
    }
    let model = &*model;
    let clip = &*clip;
    let needed = model.params.config.num_classes;
    if probs_capacity < needed {
        return fail(
            AttnpoolStatus::BufferTooSmall,
            format!("probs holds {probs_capacity} values, model has {needed} classes"),
        );
    }
    let eval = match forward_video(&model.params, &VideoFrames::Features(&clip.frames)) {
        Ok(e) => e,
        Err(e) => return fail_error(e),
    };
    match pooled_probs(&eval.scores, pooling.into()) {
        Ok(p) => {
            std::ptr::copy_nonoverlapping(p.data().as_ptr(), probs, needed);
            AttnpoolStatus::Ok
        }
        Err(e) => fail_error(e),
    }
}

/// Per-frame importance under temporal softmax pooling: writes one
/// probability per frame (they sum to 1) into `importance`, which must hold
/// at least [`attnpool_clip_frames`] values.
///
/// # Safety
/// `model` and `clip` must be live handles; `importance` must point to at
/// least `capacity` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn attnpool_frame_importance(
    model: *const AttnpoolModel,
    clip: *const AttnpoolClip,
    importance: *mut f64,
    capacity: usize,
) -> AttnpoolStatus {
    if model.is_null() || clip.is_null() || importance.is_null() {
        return fail(
            AttnpoolStatus::NullArgument,
            "model, clip, and importance must be non-null",
        );
    }
    let model = &*model;
    let clip = &*clip;
    let needed = clip.frames.len();
    if capacity < needed {
        return fail(
            AttnpoolStatus::BufferTooSmall,
            format!("importance holds {capacity} values, clip has {needed} frames"),
        );
    }
    let eval = match forward_video(&model.params, &VideoFrames::Features(&clip.frames)) {
        Ok(e) => e,
        Err(e) => return fail_error(e),
    };
    let result = joint_softmax(&eval.scores).and_then(|joint| frame_importance(&joint));
    match result {
        Ok((imp, _)) => {
            std::ptr::copy_nonoverlapping(imp.data().as_ptr(), importance, needed);
            AttnpoolStatus::Ok
        }
        Err(e) => fail_error(e),
    }
}
