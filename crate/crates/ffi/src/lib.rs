//! C ABI over the separator.
//!
//! Models are opaque `SfModel` handles owned by the caller and released
//! with `sf_model_free`. Every fallible call returns an `SfStatus`; the
//! message for the most recent failure on the calling thread is available
//! through `sf_last_error_message`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use sepformer::cli::RunConfig;
use sepformer::config::SepformerConfig;
use sepformer::sepmodel::{parameter_census, Sepformer};
use sepformer::Error;

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SfStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidArgument = 2,
    Io = 3,
    BadCheckpoint = 4,
    Shape = 5,
    Numeric = 6,
    BufferTooSmall = 7,
    Panic = 8,
}

/// A loaded separator.
pub struct SfModel {
    model: Sepformer,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: impl Into<String>) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
}

fn status_of(err: &Error) -> SfStatus {
    match err {
        Error::Io { .. } | Error::Wav(_) | Error::Csv(_) => SfStatus::Io,
        Error::Checkpoint(_) => SfStatus::BadCheckpoint,
        Error::ShapeMismatch { .. }
        | Error::InvalidShape { .. }
        | Error::InputTooShort { .. }
        | Error::SequenceTooLong { .. }
        | Error::LengthMismatch(..)
        | Error::SourceCountMismatch { .. } => SfStatus::Shape,
        Error::UndefinedTarget | Error::NonFiniteLoss { .. } => SfStatus::Numeric,
        _ => SfStatus::InvalidArgument,
    }
}

/// Run `f`, recording any error or panic as the thread's last error.
fn guard(f: impl FnOnce() -> Result<(), (SfStatus, String)>) -> SfStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            SfStatus::Ok
        }
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            SfStatus::Panic
        }
    }
}

fn lift(err: Error) -> (SfStatus, String) {
    (status_of(&err), err.to_string())
}

fn null(name: &str) -> (SfStatus, String) {
    (SfStatus::NullArgument, format!("{name} is null"))
}

unsafe fn utf8<'a>(ptr: *const c_char, name: &str) -> Result<&'a str, (SfStatus, String)> {
    if ptr.is_null() {
        return Err(null(name));
    }
    CStr::from_ptr(ptr)
        .to_str()
        .map_err(|_| (SfStatus::InvalidArgument, format!("{name} is not UTF-8")))
}

unsafe fn slice<'a>(ptr: *const f64, len: usize, name: &str) -> Result<&'a [f64], (SfStatus, String)> {
    if ptr.is_null() {
        return Err(null(name));
    }
    Ok(std::slice::from_raw_parts(ptr, len))
}

fn config_from(text: Option<&str>) -> Result<SepformerConfig, (SfStatus, String)> {
    match text {
        None => Ok(SepformerConfig::standard()),
        Some(t) => RunConfig::from_text(t).map(|rc| rc.model).map_err(lift),
    }
}

/// Load a checkpoint from `path` into a new handle written to `out`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sf_model_load(path: *const c_char, out: *mut *mut SfModel) -> SfStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let p = utf8(path, "path")?;
        let model = Sepformer::load(Path::new(p)).map_err(lift)?;
        *out = Box::into_raw(Box::new(SfModel { model }));
        Ok(())
    })
}

/// Build a freshly initialised model from `key = value` config text, or
/// from the built-in defaults when `config` is null.
///
/// # Safety
/// `config` must be null or NUL-terminated; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn sf_model_new(config: *const c_char, out: *mut *mut SfModel) -> SfStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let text = if config.is_null() { None } else { Some(utf8(config, "config")?) };
        let model = Sepformer::new(config_from(text)?).map_err(lift)?;
        *out = Box::into_raw(Box::new(SfModel { model }));
        Ok(())
    })
}

/// Release a handle. Null is ignored.
///
/// # Safety
/// `model` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn sf_model_free(model: *mut SfModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of sources the model separates, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn sf_num_sources(model: *const SfModel) -> usize {
    model.as_ref().map_or(0, |m| m.model.config.sources)
}

/// Sample rate the model expects, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn sf_sample_rate(model: *const SfModel) -> u32 {
    model.as_ref().map_or(0, |m| m.model.config.sample_rate)
}

/// Separate `len` samples into `out`, laid out source-major: source `k`
/// occupies `out[k*len .. (k+1)*len]`. `out_len` must be at least
/// `sf_num_sources(model) * len`.
///
/// # Safety
/// `input` must hold `len` doubles and `out` must hold `out_len`.
#[no_mangle]
pub unsafe extern "C" fn sf_separate(
    model: *const SfModel,
    input: *const f64,
    len: usize,
    out: *mut f64,
    out_len: usize,
) -> SfStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let x = slice(input, len, "input")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let need = m.model.config.sources * len;
        if out_len < need {
            return Err((SfStatus::BufferTooSmall, format!("out holds {out_len} values, need {need}")));
        }
        let sep = m.model.separate(x).map_err(lift)?;
        let dst = std::slice::from_raw_parts_mut(out, need);
        for (k, est) in sep.estimates.iter().enumerate() {
            dst[k * len..(k + 1) * len].copy_from_slice(est);
        }
        Ok(())
    })
}

/// Scale-invariant SNR of `est` against `target`, in dB.
///
/// # Safety
/// Both arrays must hold `len` doubles; `out_db` must be valid.
#[no_mangle]
pub unsafe extern "C" fn sf_si_snr(est: *const f64, target: *const f64, len: usize, out_db: *mut f64) -> SfStatus {
    guard(|| {
        let e = slice(est, len, "est")?;
        let t = slice(target, len, "target")?;
        if out_db.is_null() {
            return Err(null("out_db"));
        }
        *out_db = sepformer::objectives::si_snr(e, t).map_err(lift)?;
        Ok(())
    })
}

/// Learnable scalar count for a config (null means built-in defaults).
///
/// # Safety
/// `config` must be null or NUL-terminated; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn sf_parameter_census(config: *const c_char, out: *mut usize) -> SfStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let text = if config.is_null() { None } else { Some(utf8(config, "config")?) };
        *out = parameter_census(&config_from(text)?).map_err(lift)?;
        Ok(())
    })
}

/// Copy the calling thread's last error message into `buf` (NUL
/// terminated, truncated to `cap`). Returns the full message length, so a
/// return value of `cap` or more means the copy was truncated.
///
/// # Safety
/// `buf` must be null or hold `cap` bytes.
#[no_mangle]
pub unsafe extern "C" fn sf_last_error_message(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && cap > 0 {
            let n = msg.len().min(cap - 1);
            std::ptr::copy_nonoverlapping(msg.as_ptr(), buf.cast::<u8>(), n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}
