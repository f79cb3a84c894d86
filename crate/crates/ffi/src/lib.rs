//! C ABI over `axialseg` models.
//!
//! Models are opaque `AxsModel` handles owned by the caller and released with
//! [`axs_model_free`]. Every fallible function returns an [`AxsStatus`]; the
//! message of the most recent failure on the calling thread is available from
//! [`axs_last_error`]. Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use axialseg::cli::checkpoint;
use axialseg::model::{Model, ModelConfig};
use axialseg::tensor::Tensor;
use axialseg::Error;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AxsStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Io = 4,
    Checkpoint = 5,
    Shape = 6,
    Panic = 7,
}

/// Opaque model handle.
pub struct AxsModel {
    inner: Model<f32>,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_last_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(err: &Error) -> AxsStatus {
    match err {
        Error::Config(_) => AxsStatus::Config,
        Error::Io { .. } => AxsStatus::Io,
        Error::Checkpoint(_) => AxsStatus::Checkpoint,
        Error::InvalidShape { .. } | Error::ShapeMismatch { .. } => AxsStatus::Shape,
        _ => AxsStatus::InvalidArgument,
    }
}

struct Fail(AxsStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> AxsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_last_error("");
            AxsStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_last_error(&msg);
            status
        }
        Err(_) => {
            set_last_error("internal panic");
            AxsStatus::Panic
        }
    }
}

fn non_null<T>(p: *const T, what: &str) -> Result<(), Fail> {
    if p.is_null() {
        Err(Fail(AxsStatus::NullPointer, format!("{what} is null")))
    } else {
        Ok(())
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    non_null(p, what)?;
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(AxsStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn model_ref<'a>(m: *const AxsModel) -> Result<&'a AxsModel, Fail> {
    non_null(m, "model")?;
    Ok(&*m)
}

unsafe fn emit(out: *mut *mut AxsModel, inner: Model<f32>) {
    *out = Box::into_raw(Box::new(AxsModel { inner }));
}

/// Builds a freshly initialized model from `key=value` lines (model keys
/// only; `#` starts a comment). An empty string gives the default MedT.
///
/// # Safety
/// `config` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn axs_model_new(config: *const c_char, out: *mut *mut AxsModel) -> AxsStatus {
    guard(|| {
        non_null(out, "out")?;
        let text = str_arg(config, "config")?;
        let mut cfg = ModelConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Fail(AxsStatus::Config, format!("line {}: expected key=value", i + 1)))?;
            if !cfg.set(k.trim(), v.trim())? {
                return Err(Fail(AxsStatus::Config, format!("line {}: unknown key `{}`", i + 1, k.trim())));
            }
        }
        cfg.validate()?;
        emit(out, Model::new(&cfg)?);
        Ok(())
    })
}

/// Loads a checkpoint written by `axialseg train` or [`axs_model_save`].
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn axs_model_load(path: *const c_char, out: *mut *mut AxsModel) -> AxsStatus {
    guard(|| {
        non_null(out, "out")?;
        let path = PathBuf::from(str_arg(path, "path")?);
        emit(out, checkpoint::load(&path)?);
        Ok(())
    })
}

/// # Safety
/// `model` must come from this library; `path` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn axs_model_save(model: *const AxsModel, path: *const c_char) -> AxsStatus {
    guard(|| {
        let m = model_ref(model)?;
        let path = PathBuf::from(str_arg(path, "path")?);
        checkpoint::save(&m.inner, &path)?;
        Ok(())
    })
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `model` must be null or a live handle from this library, freed at most once.
#[no_mangle]
pub unsafe extern "C" fn axs_model_free(model: *mut AxsModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Side length of the square images the model accepts, 0 for null.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn axs_model_img_size(model: *const AxsModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.config().img_size)
}

/// Trainable scalar count, 0 for null.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn axs_model_param_count(model: *const AxsModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.count_parameters())
}

/// Foreground probabilities for `batch` grayscale images of
/// `img_size * img_size` floats each, row-major. `input` and `output` hold
/// `len` floats and may not overlap.
///
/// # Safety
/// `input` must be readable and `output` writable for `len` floats.
#[no_mangle]
pub unsafe extern "C" fn axs_model_predict(
    model: *const AxsModel,
    input: *const f32,
    output: *mut f32,
    batch: usize,
    len: usize,
) -> AxsStatus {
    guard(|| {
        let m = model_ref(model)?;
        non_null(input, "input")?;
        non_null(output, "output")?;
        let side = m.inner.config().img_size;
        let expected = batch * side * side;
        if batch == 0 || len != expected {
            return Err(Fail(
                AxsStatus::Shape,
                format!("expected {batch} x {side} x {side} = {expected} floats, got {len}"),
            ));
        }
        let data = std::slice::from_raw_parts(input, len).to_vec();
        let x = Tensor::new(vec![batch, 1, side, side], data)?;
        let y = m.inner.predict(&x)?;
        std::slice::from_raw_parts_mut(output, len).copy_from_slice(y.data());
        Ok(())
    })
}

/// Message of the last failed call on this thread; empty after a success.
/// Valid until the next call into the library on the same thread.
#[no_mangle]
pub extern "C" fn axs_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Static description of a status code.
#[no_mangle]
pub extern "C" fn axs_status_str(status: AxsStatus) -> *const c_char {
    let s: &'static CStr = match status {
        AxsStatus::Ok => c"ok",
        AxsStatus::NullPointer => c"null pointer",
        AxsStatus::InvalidArgument => c"invalid argument",
        AxsStatus::Config => c"invalid configuration",
        AxsStatus::Io => c"i/o error",
        AxsStatus::Checkpoint => c"invalid checkpoint",
        AxsStatus::Shape => c"shape mismatch",
        AxsStatus::Panic => c"internal panic",
    };
    s.as_ptr()
}

/// Library version, NUL-terminated.
#[no_mangle]
pub extern "C" fn axs_version() -> *const c_char {
    static VERSION: &CStr = match CStr::from_bytes_with_nul(concat!(env!("CARGO_PKG_VERSION"), "\0").as_bytes()) {
        Ok(v) => v,
        Err(_) => c"unknown",
    };
    VERSION.as_ptr()
}
