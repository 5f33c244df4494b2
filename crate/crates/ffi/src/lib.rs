//! C ABI over the core pipeline: load or build a model, attach adapters,
//! sample clips, and score buffers — through opaque handles and status
//! codes.
//!
//! Conventions:
//! - Every fallible call returns a [`CineloraStatus`]; `OK` is zero.
//! - On failure, [`cinelora_last_error`] returns a thread-local message
//!   describing what went wrong (valid until the thread's next failure).
//! - Handles are created and released by this library only
//!   ([`cinelora_model_free`], [`cinelora_clip_free`]); passing handles
//!   allocated elsewhere is undefined behavior.
//! - All panics are caught at the boundary and surface as
//!   `INTERNAL_PANIC` — nothing unwinds across the ABI.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use cinelora::config::RunConfig;
use cinelora::lora::AdapterSet;
use cinelora::metrics::perceptual_proxy;
use cinelora::model::VideoDit;
use cinelora::shard::{generate_full, GenRequest};
use cinelora::tensor::Tensor;
use cinelora::Error;

/// Result of every fallible call. Zero is success; anything else is
/// explained by `cinelora_last_error()`.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CineloraStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullPointer = 1,
    /// A string argument was not valid UTF-8.
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    InvalidConfig = 4,
    ShapeMismatch = 5,
    /// A caption word is outside the fixed vocabulary.
    UnknownWord = 6,
    /// A checkpoint or adapter file is malformed.
    Artifact = 7,
    /// Model and artifact were built for different configurations.
    DigestMismatch = 8,
    Io = 9,
    Dataset = 10,
    /// A computation produced a non-finite value.
    NonFinite = 11,
    /// A caller-supplied buffer has the wrong length.
    BufferSize = 12,
    /// An internal invariant failed; this is a bug in the library.
    InternalPanic = 13,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(message: &str) {
    let sanitized = message.replace('\0', " ");
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(sanitized).expect("nul bytes stripped");
    });
}

fn fail(status: CineloraStatus, message: &str) -> CineloraStatus {
    set_error(message);
    status
}

fn fail_with(err: &Error) -> CineloraStatus {
    let status = match err {
        Error::ShapeMismatch { .. } => CineloraStatus::ShapeMismatch,
        Error::InvalidArgument(_) => CineloraStatus::InvalidArgument,
        Error::InvalidConfig(_) | Error::Toml(_) => CineloraStatus::InvalidConfig,
        Error::UnknownWord { .. } => CineloraStatus::UnknownWord,
        Error::Artifact { .. } | Error::Json(_) => CineloraStatus::Artifact,
        Error::DigestMismatch { .. } => CineloraStatus::DigestMismatch,
        Error::Io { .. } | Error::Image { .. } => CineloraStatus::Io,
        Error::Dataset(_) => CineloraStatus::Dataset,
        Error::NonFiniteLoss { .. } => CineloraStatus::NonFinite,
    };
    fail(status, &err.to_string())
}

/// Runs `body` with panics converted to `INTERNAL_PANIC`.
fn guarded(body: impl FnOnce() -> CineloraStatus) -> CineloraStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(status) => status,
        Err(payload) => {
            let message = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".to_string());
            fail(CineloraStatus::InternalPanic, &format!("internal panic: {message}"))
        }
    }
}

/// Reads a required UTF-8 string argument.
///
/// # Safety
/// `ptr` must be null or a valid NUL-terminated string.
unsafe fn read_str<'a>(ptr: *const c_char, what: &str) -> Result<&'a str, CineloraStatus> {
    if ptr.is_null() {
        return Err(fail(CineloraStatus::NullPointer, &format!("{what} is null")));
    }
    unsafe { CStr::from_ptr(ptr) }
        .to_str()
        .map_err(|_| fail(CineloraStatus::InvalidUtf8, &format!("{what} is not valid UTF-8")))
}

/// An opaque loaded model (plus any attached adapters).
pub struct CineloraModel {
    inner: VideoDit<f32>,
}

/// An opaque generated clip: frames plus the generation report.
pub struct CineloraClip {
    data: Vec<f32>,
    frames: usize,
    frame_len: usize,
    report_json: CString,
}

/// The message for the current thread's most recent failure. Never null;
/// empty before the first failure. Valid until this thread's next failing
/// call.
#[no_mangle]
pub extern "C" fn cinelora_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// The library version as a static string.
#[no_mangle]
pub extern "C" fn cinelora_version() -> *const c_char {
    static VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), "\0");
    VERSION.as_ptr().cast()
}

/// Loads a model checkpoint. On success `*out` owns the model; release it
/// with `cinelora_model_free`.
///
/// # Safety
/// `path` must be a valid NUL-terminated string; `out` must be a valid
/// pointer to pointer.
#[no_mangle]
pub unsafe extern "C" fn cinelora_model_load(
    path: *const c_char,
    out: *mut *mut CineloraModel,
) -> CineloraStatus {
    guarded(|| {
        if out.is_null() {
            return fail(CineloraStatus::NullPointer, "out is null");
        }
        let path = match unsafe { read_str(path, "path") } {
            Ok(s) => s,
            Err(status) => return status,
        };
        match VideoDit::<f32>::load(Path::new(path)) {
            Ok(model) => {
                unsafe { *out = Box::into_raw(Box::new(CineloraModel { inner: model })) };
                CineloraStatus::Ok
            }
            Err(e) => fail_with(&e),
        }
    })
}

/// Builds a fresh seeded model from a flat TOML config document (pass an
/// empty string for the defaults). On success `*out` owns the model.
///
/// # Safety
/// `config_toml` must be a valid NUL-terminated string; `out` must be a
/// valid pointer to pointer.
#[no_mangle]
pub unsafe extern "C" fn cinelora_model_new(
    config_toml: *const c_char,
    seed: u64,
    out: *mut *mut CineloraModel,
) -> CineloraStatus {
    guarded(|| {
        if out.is_null() {
            return fail(CineloraStatus::NullPointer, "out is null");
        }
        let toml = match unsafe { read_str(config_toml, "config_toml") } {
            Ok(s) => s,
            Err(status) => return status,
        };
        let config = match RunConfig::from_toml(toml) {
            Ok(c) => c,
            Err(e) => return fail_with(&e),
        };
        if let Err(e) = config.validate() {
            return fail_with(&e);
        }
        match VideoDit::new(config.model_config(), seed) {
            Ok(model) => {
                unsafe { *out = Box::into_raw(Box::new(CineloraModel { inner: model })) };
                CineloraStatus::Ok
            }
            Err(e) => fail_with(&e),
        }
    })
}

/// Releases a model handle. Null is a no-op.
///
/// # Safety
/// `model` must be null or a handle from this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn cinelora_model_free(model: *mut CineloraModel) {
    if !model.is_null() {
        drop(unsafe { Box::from_raw(model) });
    }
}

/// Attaches an adapter file to the model (checked against the model's
/// config digest).
///
/// # Safety
/// `model` must be a live handle; `path` a valid NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn cinelora_model_attach_adapters(
    model: *const CineloraModel,
    path: *const c_char,
) -> CineloraStatus {
    guarded(|| {
        if model.is_null() {
            return fail(CineloraStatus::NullPointer, "model is null");
        }
        let path = match unsafe { read_str(path, "path") } {
            Ok(s) => s,
            Err(status) => return status,
        };
        let model = unsafe { &*model };
        let result =
            AdapterSet::load(Path::new(path)).and_then(|set| set.attach(&model.inner));
        match result {
            Ok(()) => CineloraStatus::Ok,
            Err(e) => fail_with(&e),
        }
    })
}

/// The model's frame geometry: channels, height, width. Any output pointer
/// may be null to skip that value.
///
/// # Safety
/// `model` must be a live handle; non-null outputs must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn cinelora_model_frame_dims(
    model: *const CineloraModel,
    out_channels: *mut usize,
    out_height: *mut usize,
    out_width: *mut usize,
) -> CineloraStatus {
    guarded(|| {
        if model.is_null() {
            return fail(CineloraStatus::NullPointer, "model is null");
        }
        let config = unsafe { &*model }.inner.config();
        unsafe {
            if !out_channels.is_null() {
                *out_channels = config.channels;
            }
            if !out_height.is_null() {
                *out_height = config.frame_height;
            }
            if !out_width.is_null() {
                *out_width = config.frame_width;
            }
        }
        CineloraStatus::Ok
    })
}

/// Samples a clip. `first_frame` holds `channels·height·width` values in
/// `[-1, 1]` (planar C,H,W order); `caption` is tokenized against the
/// built-in vocabulary. On success `*out` owns the clip; release it with
/// `cinelora_clip_free`.
///
/// # Safety
/// `model` must be a live handle; `first_frame` must point to
/// `first_frame_len` readable floats; `caption` must be a valid
/// NUL-terminated string; `out` must be a valid pointer to pointer.
#[no_mangle]
pub unsafe extern "C" fn cinelora_generate(
    model: *const CineloraModel,
    first_frame: *const f32,
    first_frame_len: usize,
    caption: *const c_char,
    num_frames: usize,
    cfg_scale: f64,
    steps: usize,
    seed: u64,
    shards: usize,
    overlap: usize,
    out: *mut *mut CineloraClip,
) -> CineloraStatus {
    guarded(|| {
        if model.is_null() || first_frame.is_null() || out.is_null() {
            return fail(CineloraStatus::NullPointer, "model, first_frame and out must be non-null");
        }
        let caption = match unsafe { read_str(caption, "caption") } {
            Ok(s) => s,
            Err(status) => return status,
        };
        let model = unsafe { &*model };
        let config = model.inner.config();
        let want = config.channels * config.frame_height * config.frame_width;
        if first_frame_len != want {
            return fail(
                CineloraStatus::BufferSize,
                &format!("first_frame holds {first_frame_len} values, the model expects {want}"),
            );
        }
        let pixels = unsafe { std::slice::from_raw_parts(first_frame, first_frame_len) };

        let run = || -> cinelora::Result<CineloraClip> {
            let first_frame = Tensor::from_vec(
                &[config.channels, config.frame_height, config.frame_width],
                pixels.to_vec(),
            )?;
            let caption_ids = cinelora::data::captions::vocab().tokenize(caption)?;
            let request = GenRequest {
                first_frame,
                caption_ids,
                num_frames,
                cfg_scale,
                steps,
                seed,
                shards,
                overlap,
                fps: 24,
            };
            let (clip, report) = generate_full(&model.inner, &request)?;
            let frame_len = clip.shape()[1..].iter().product();
            let report_json =
                CString::new(report.to_json()?).expect("JSON never contains NUL");
            Ok(CineloraClip {
                data: clip.to_vec(),
                frames: clip.shape()[0],
                frame_len,
                report_json,
            })
        };
        match run() {
            Ok(clip) => {
                unsafe { *out = Box::into_raw(Box::new(clip)) };
                CineloraStatus::Ok
            }
            Err(e) => fail_with(&e),
        }
    })
}

/// Number of frames in a generated clip (0 for a null handle).
///
/// # Safety
/// `clip` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn cinelora_clip_frames(clip: *const CineloraClip) -> usize {
    if clip.is_null() {
        0
    } else {
        unsafe { &*clip }.frames
    }
}

/// Values per frame (`channels·height·width`; 0 for a null handle).
///
/// # Safety
/// `clip` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn cinelora_clip_frame_len(clip: *const CineloraClip) -> usize {
    if clip.is_null() {
        0
    } else {
        unsafe { &*clip }.frame_len
    }
}

/// Copies the whole clip (`frames·frame_len` signal-space floats,
/// nominally in `[-1, 1]`, frame major) into the caller's buffer.
///
/// # Safety
/// `clip` must be a live handle; `out` must point to `out_len` writable
/// floats.
#[no_mangle]
pub unsafe extern "C" fn cinelora_clip_read(
    clip: *const CineloraClip,
    out: *mut f32,
    out_len: usize,
) -> CineloraStatus {
    guarded(|| {
        if clip.is_null() || out.is_null() {
            return fail(CineloraStatus::NullPointer, "clip and out must be non-null");
        }
        let clip = unsafe { &*clip };
        if out_len != clip.data.len() {
            return fail(
                CineloraStatus::BufferSize,
                &format!("buffer holds {out_len} values, the clip has {}", clip.data.len()),
            );
        }
        unsafe { std::slice::from_raw_parts_mut(out, out_len) }.copy_from_slice(&clip.data);
        CineloraStatus::Ok
    })
}

/// The clip's generation report as a JSON string, owned by the clip handle
/// (valid until `cinelora_clip_free`). Null for a null handle.
///
/// # Safety
/// `clip` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn cinelora_clip_report_json(clip: *const CineloraClip) -> *const c_char {
    if clip.is_null() {
        std::ptr::null()
    } else {
        unsafe { &*clip }.report_json.as_ptr()
    }
}

/// Releases a clip handle. Null is a no-op.
///
/// # Safety
/// `clip` must be null or a handle from this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn cinelora_clip_free(clip: *mut CineloraClip) {
    if !clip.is_null() {
        drop(unsafe { Box::from_raw(clip) });
    }
}

/// The perceptual distance between two equal-shape clips, each laid out as
/// `frames·channels·height·width` floats in `[-1, 1]`. Both frame sides
/// must be at least 16.
///
/// # Safety
/// `a` and `b` must each point to `frames·channels·height·width` readable
/// floats; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cinelora_perceptual_proxy(
    a: *const f32,
    b: *const f32,
    frames: usize,
    channels: usize,
    height: usize,
    width: usize,
    out: *mut f64,
) -> CineloraStatus {
    guarded(|| {
        if a.is_null() || b.is_null() || out.is_null() {
            return fail(CineloraStatus::NullPointer, "a, b and out must be non-null");
        }
        let len = frames * channels * height * width;
        let shape = [frames, channels, height, width];
        let run = || -> cinelora::Result<f64> {
            let ta = Tensor::from_vec(&shape, unsafe { std::slice::from_raw_parts(a, len) }.to_vec())?;
            let tb = Tensor::from_vec(&shape, unsafe { std::slice::from_raw_parts(b, len) }.to_vec())?;
            perceptual_proxy(&ta, &tb)
        };
        match run() {
            Ok(value) => {
                unsafe { *out = value };
                CineloraStatus::Ok
            }
            Err(e) => fail_with(&e),
        }
    })
}
