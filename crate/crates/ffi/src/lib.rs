//! C ABI over `cnf-core`.
//!
//! Every fallible entry point returns a [`CnfStatus`]. On failure the
//! message is kept per thread and read back with [`cnf_last_error`].
//! Models are opaque [`CnfModel`] handles owned by the caller and released
//! with [`cnf_model_free`]. No Rust panic crosses the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use cnf_core::gemm::{matmul_naive, matmul_parallel, matmul_tiled, TileConfig};
use cnf_core::metrics::{multiclass_logloss, Prediction};
use cnf_core::model::{predict, TrainedModel};
use cnf_core::modelfile::load_model;
use cnf_core::{Error, Tensor};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CnfStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    DimensionMismatch = 3,
    Io = 4,
    ModelFile = 5,
    Decode = 6,
    Panic = 7,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CnfGemmMethod {
    Naive = 0,
    Tiled = 1,
    Parallel = 2,
}

/// Loaded model. Opaque to C.
pub struct CnfModel {
    inner: TrainedModel,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: String) {
    let text = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(text));
}

fn clear_error() {
    LAST_ERROR.with(|slot| *slot.borrow_mut() = None);
}

fn status_of(err: &Error) -> CnfStatus {
    match err {
        Error::ShapeDataMismatch { .. }
        | Error::ReshapeMismatch { .. }
        | Error::DimensionMismatch(_)
        | Error::Geometry(_) => CnfStatus::DimensionMismatch,
        Error::Io { .. } => CnfStatus::Io,
        Error::ModelFile(_) | Error::Json(_) => CnfStatus::ModelFile,
        Error::Decode { .. } => CnfStatus::Decode,
        _ => CnfStatus::InvalidArgument,
    }
}

struct Failure(CnfStatus, String);

impl From<Error> for Failure {
    fn from(err: Error) -> Self {
        Failure(status_of(&err), err.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(CnfStatus::NullPointer, format!("{what} is null"))
}

fn invalid(message: impl Into<String>) -> Failure {
    Failure(CnfStatus::InvalidArgument, message.into())
}

/// Runs `body`, recording any failure or panic as the thread's last error.
fn guard(body: impl FnOnce() -> Result<(), Failure>) -> CnfStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => {
            clear_error();
            CnfStatus::Ok
        }
        Ok(Err(Failure(status, message))) => {
            set_error(message);
            status
        }
        Err(payload) => {
            let message = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".to_string());
            set_error(format!("internal panic: {message}"));
            CnfStatus::Panic
        }
    }
}

/// # Safety
/// `ptr` must be null or valid for `len` reads.
unsafe fn slice<'a, T>(ptr: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if ptr.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(ptr, len))
}

/// # Safety
/// `ptr` must be null or valid for `len` writes.
unsafe fn slice_mut<'a, T>(ptr: *mut T, len: usize, what: &str) -> Result<&'a mut [T], Failure> {
    if len == 0 {
        return Ok(&mut []);
    }
    if ptr.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(ptr, len))
}

fn checked_len(dims: &[usize]) -> Result<usize, Failure> {
    dims.iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| invalid(format!("dimensions {dims:?} overflow")))
}

/// Message for the most recent failure on this thread, or null after a
/// success. Valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn cnf_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn cnf_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a model file and stores a new handle in `*out`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cnf_model_load(path: *const c_char, out: *mut *mut CnfModel) -> CnfStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        if path.is_null() {
            return Err(null("path"));
        }
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| invalid("path is not valid UTF-8"))?;
        let model = load_model(Path::new(path))?;
        *out = Box::into_raw(Box::new(CnfModel { inner: model }));
        Ok(())
    })
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `model` must be null or a handle from [`cnf_model_load`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn cnf_model_free(model: *mut CnfModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of output classes, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn cnf_model_num_classes(model: *const CnfModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.class_names.len())
}

/// Number of trainable parameters, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn cnf_model_param_count(model: *const CnfModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.network.param_count())
}

/// Writes the expected per-image input shape (channels, height, width).
///
/// # Safety
/// `model` must be a live handle; `channels`, `height`, `width` valid pointers.
#[no_mangle]
pub unsafe extern "C" fn cnf_model_input_shape(
    model: *const CnfModel,
    channels: *mut usize,
    height: *mut usize,
    width: *mut usize,
) -> CnfStatus {
    guard(|| {
        let model = model.as_ref().ok_or_else(|| null("model"))?;
        if channels.is_null() || height.is_null() || width.is_null() {
            return Err(null("shape output"));
        }
        let [c, h, w] = model.inner.network.input_shape();
        *channels = c;
        *height = h;
        *width = w;
        Ok(())
    })
}

/// Class probabilities for `n` images.
///
/// `pixels` holds `n·C·H·W` values in [0, 1], image-major then CHW.
/// `probs` receives `n·classes` values, one row per image.
///
/// # Safety
/// `model` must be a live handle; the buffers must hold the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn cnf_model_predict(
    model: *const CnfModel,
    pixels: *const f64,
    pixels_len: usize,
    n: usize,
    probs: *mut f64,
    probs_len: usize,
) -> CnfStatus {
    guard(|| {
        let model = model.as_ref().ok_or_else(|| null("model"))?;
        let input = model.inner.network.input_shape();
        let per_image = checked_len(&input)?;
        let classes = model.inner.class_names.len();
        let expected_in = checked_len(&[n, per_image])?;
        if pixels_len != expected_in {
            return Err(Failure(
                CnfStatus::DimensionMismatch,
                format!("pixels holds {pixels_len} values, expected {n}×{per_image} = {expected_in}"),
            ));
        }
        if probs_len != n * classes {
            return Err(Failure(
                CnfStatus::DimensionMismatch,
                format!("probs holds {probs_len} values, expected {n}×{classes}"),
            ));
        }
        let src = slice(pixels, pixels_len, "pixels")?;
        let dst = slice_mut(probs, probs_len, "probs")?;
        let images = src
            .chunks_exact(per_image.max(1))
            .map(|chunk| Tensor::new(input.to_vec(), chunk.to_vec()))
            .collect::<cnf_core::Result<Vec<_>>>()?;
        for (row, out) in predict(&model.inner, &images)?.iter().zip(dst.chunks_exact_mut(classes.max(1))) {
            out.copy_from_slice(row);
        }
        Ok(())
    })
}

/// `C = A·B` for row-major `A: m×n`, `B: n×w`, `C: m×w`.
///
/// `tile` and `threads` are ignored by the naive method; a `threads` of 0
/// selects the detected core count.
///
/// # Safety
/// `a`, `b` and `c` must hold `m·n`, `n·w` and `m·w` values.
#[no_mangle]
pub unsafe extern "C" fn cnf_matmul(
    method: CnfGemmMethod,
    a: *const f64,
    b: *const f64,
    c: *mut f64,
    m: usize,
    n: usize,
    w: usize,
    tile: usize,
    threads: usize,
) -> CnfStatus {
    guard(|| {
        let a_len = checked_len(&[m, n])?;
        let b_len = checked_len(&[n, w])?;
        let c_len = checked_len(&[m, w])?;
        let a = Tensor::new(vec![m, n], slice(a, a_len, "a")?.to_vec())?;
        let b = Tensor::new(vec![n, w], slice(b, b_len, "b")?.to_vec())?;
        let out = slice_mut(c, c_len, "c")?;
        let cfg = || {
            let threads = if threads == 0 {
                cnf_core::gemm::detected_cores()
            } else {
                threads
            };
            TileConfig::new(tile, threads)
        };
        let product = match method {
            CnfGemmMethod::Naive => matmul_naive(&a, &b)?,
            CnfGemmMethod::Tiled => matmul_tiled(&a, &b, cfg()?)?,
            CnfGemmMethod::Parallel => matmul_parallel(&a, &b, cfg()?)?,
        };
        out.copy_from_slice(product.data());
        Ok(())
    })
}

/// Multi-class log loss of `n` probability rows of width `classes` against
/// integer labels, with probabilities clipped away from 0 and 1.
///
/// # Safety
/// `probs` must hold `n·classes` values, `labels` `n` values, `out` be valid.
#[no_mangle]
pub unsafe extern "C" fn cnf_logloss(
    probs: *const f64,
    labels: *const u32,
    n: usize,
    classes: usize,
    out: *mut f64,
) -> CnfStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let p_len = checked_len(&[n, classes])?;
        let probs = Tensor::new(vec![n, classes], slice(probs, p_len, "probs")?.to_vec())?;
        let labels = slice(labels, n, "labels")?.iter().map(|&l| l as usize).collect();
        *out = multiclass_logloss(&Prediction::new(probs, labels)?)?;
        Ok(())
    })
}
