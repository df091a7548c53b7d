//! C interface to `mmscore`.
//!
//! Objects cross the boundary as opaque handles ([`MmsModel`],
//! [`MmsTensor`]) that the caller releases with the matching `*_free`
//! function. Every fallible call returns an [`MmsStatus`]; on failure the
//! thread's last error message is available from
//! [`mms_last_error_message`]. Panics never unwind into C.

use std::cell::RefCell;
use std::ffi::{c_char, c_int, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::slice;

use mmscore::config::SampleConfig;
use mmscore::io::{load_checkpoint, read_tensor, write_tensor};
use mmscore::metrics::{mae, psnr, ssim};
use mmscore::sampler::{generate, NetScore};
use mmscore::train::TrainState;
use mmscore::{Error, Tensor};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MmsStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Corruption = 5,
    Shape = 6,
    Contract = 7,
    Numerical = 8,
    Config = 9,
    Domain = 10,
    Panic = 11,
}

/// A loaded checkpoint.
pub struct MmsModel {
    state: TrainState,
    names: Vec<CString>,
}

/// A dense row-major array of doubles.
pub struct MmsTensor {
    inner: Tensor,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn status_of(err: &Error) -> MmsStatus {
    match err {
        Error::InvalidShape { .. } | Error::ShapeMismatch(_) => MmsStatus::Shape,
        Error::Domain { .. } => MmsStatus::Domain,
        Error::Contract(_) => MmsStatus::Contract,
        Error::Config(_) => MmsStatus::Config,
        Error::Format { .. } => MmsStatus::Format,
        Error::Corruption { .. } => MmsStatus::Corruption,
        Error::Numerical(_) | Error::NanLoss { .. } | Error::NanSample { .. } => MmsStatus::Numerical,
        Error::Io { .. } => MmsStatus::Io,
    }
}

/// Runs `f`, translating errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<(), (MmsStatus, String)>) -> MmsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            MmsStatus::Ok
        }
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            MmsStatus::Panic
        }
    }
}

fn lib_err(e: Error) -> (MmsStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (MmsStatus, String) {
    (MmsStatus::NullPointer, format!("{what} is null"))
}

unsafe fn c_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, (MmsStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| (MmsStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn doubles<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], (MmsStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts(p, len))
}

/// Message of the last failed call on this thread, or null if the last call
/// succeeded. Valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn mms_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Loads a checkpoint file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mms_model_load(path: *const c_char, out: *mut *mut MmsModel) -> MmsStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let path = c_str(path, "path")?;
        let state = load_checkpoint(path).map_err(lib_err)?;
        let names = state
            .modalities
            .names()
            .iter()
            .map(|n| CString::new(n.as_str()).expect("modality names have no NUL"))
            .collect();
        *out = Box::into_raw(Box::new(MmsModel { state, names }));
        Ok(())
    })
}

/// Releases a model; null is ignored.
///
/// # Safety
/// `model` must come from [`mms_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn mms_model_free(model: *mut MmsModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of modalities (channels) of the model; 0 for null.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn mms_model_num_modalities(model: *const MmsModel) -> usize {
    model.as_ref().map_or(0, |m| m.names.len())
}

/// Name of modality `index`, owned by the model; null if out of range.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn mms_model_modality_name(model: *const MmsModel, index: usize) -> *const c_char {
    model
        .as_ref()
        .and_then(|m| m.names.get(index))
        .map_or(ptr::null(), |s| s.as_ptr())
}

/// Synthesizes the comma-separated `missing` modalities of every subject in
/// `cond` (`[N, C, H, W]`) with `steps` reverse steps. The result has the
/// same shape; conditional channels are copied unchanged.
///
/// # Safety
/// Pointers must be valid; `missing` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn mms_model_sample(
    model: *const MmsModel,
    cond: *const MmsTensor,
    missing: *const c_char,
    steps: usize,
    seed: u64,
    final_noise: c_int,
    out: *mut *mut MmsTensor,
) -> MmsStatus {
    guard(|| {
        let model = model.as_ref().ok_or_else(|| null("model"))?;
        let cond = cond.as_ref().ok_or_else(|| null("cond"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let missing = c_str(missing, "missing")?;
        let st = &model.state;
        let partition = st
            .modalities
            .partition_from_missing(missing, st.config.allow_unconditional)
            .map_err(lib_err)?;
        let source = NetScore {
            params: &st.ema,
            modalities: &st.modalities,
            schedule: st.config.sde,
        };
        let cfg = SampleConfig {
            steps,
            seed,
            final_noise: final_noise != 0,
            draws: 1,
        };
        let result = generate(&source, &cond.inner, &partition, &cfg, seed).map_err(lib_err)?;
        *out = Box::into_raw(Box::new(MmsTensor { inner: result }));
        Ok(())
    })
}

/// Creates a tensor by copying `product(dims)` values from `data`.
///
/// # Safety
/// `dims` must hold `ndims` entries and `data` their product.
#[no_mangle]
pub unsafe extern "C" fn mms_tensor_new(
    dims: *const usize,
    ndims: usize,
    data: *const f64,
    out: *mut *mut MmsTensor,
) -> MmsStatus {
    guard(|| {
        if dims.is_null() || out.is_null() {
            return Err(null("dims/out"));
        }
        let shape = slice::from_raw_parts(dims, ndims);
        let len = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or((MmsStatus::Shape, "size overflows".to_string()))?;
        let values = doubles(data, len, "data")?;
        let t = Tensor::new(shape, values.to_vec()).map_err(lib_err)?;
        *out = Box::into_raw(Box::new(MmsTensor { inner: t }));
        Ok(())
    })
}

/// Reads a tensor file.
///
/// # Safety
/// `path` must be NUL-terminated and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn mms_tensor_read(path: *const c_char, out: *mut *mut MmsTensor) -> MmsStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let t = read_tensor(c_str(path, "path")?).map_err(lib_err)?;
        *out = Box::into_raw(Box::new(MmsTensor { inner: t }));
        Ok(())
    })
}

/// Writes a tensor file.
///
/// # Safety
/// `tensor` must be live and `path` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn mms_tensor_write(tensor: *const MmsTensor, path: *const c_char) -> MmsStatus {
    guard(|| {
        let t = tensor.as_ref().ok_or_else(|| null("tensor"))?;
        write_tensor(c_str(path, "path")?, &t.inner).map_err(lib_err)
    })
}

/// Number of dimensions; 0 for null.
///
/// # Safety
/// `tensor` must be null or live.
#[no_mangle]
pub unsafe extern "C" fn mms_tensor_ndims(tensor: *const MmsTensor) -> usize {
    tensor.as_ref().map_or(0, |t| t.inner.ndim())
}

/// Copies the extents into `out`, which has room for `capacity` entries.
///
/// # Safety
/// `out` must hold `capacity` entries.
#[no_mangle]
pub unsafe extern "C" fn mms_tensor_dims(tensor: *const MmsTensor, out: *mut usize, capacity: usize) -> MmsStatus {
    guard(|| {
        let t = tensor.as_ref().ok_or_else(|| null("tensor"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let shape = t.inner.shape();
        if capacity < shape.len() {
            return Err((
                MmsStatus::InvalidArgument,
                format!("capacity {capacity} below ndims {}", shape.len()),
            ));
        }
        slice::from_raw_parts_mut(out, shape.len()).copy_from_slice(shape);
        Ok(())
    })
}

/// Number of elements; 0 for null.
///
/// # Safety
/// `tensor` must be null or live.
#[no_mangle]
pub unsafe extern "C" fn mms_tensor_len(tensor: *const MmsTensor) -> usize {
    tensor.as_ref().map_or(0, |t| t.inner.len())
}

/// Borrowed pointer to the row-major values, valid while the tensor lives.
///
/// # Safety
/// `tensor` must be null or live.
#[no_mangle]
pub unsafe extern "C" fn mms_tensor_data(tensor: *const MmsTensor) -> *const f64 {
    tensor.as_ref().map_or(ptr::null(), |t| t.inner.data().as_ptr())
}

/// Releases a tensor; null is ignored.
///
/// # Safety
/// `tensor` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn mms_tensor_free(tensor: *mut MmsTensor) {
    if !tensor.is_null() {
        drop(Box::from_raw(tensor));
    }
}

unsafe fn pair(x: *const f64, y: *const f64, len: usize) -> Result<(Tensor, Tensor), (MmsStatus, String)> {
    let a = Tensor::new(&[len], doubles(x, len, "x")?.to_vec()).map_err(lib_err)?;
    let b = Tensor::new(&[len], doubles(y, len, "y")?.to_vec()).map_err(lib_err)?;
    Ok((a, b))
}

/// PSNR in dB of two arrays of `len` values; `+inf` when identical.
///
/// # Safety
/// `x`, `y` must hold `len` values; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn mms_psnr(x: *const f64, y: *const f64, len: usize, max_i: f64, out: *mut f64) -> MmsStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let (a, b) = pair(x, y, len)?;
        *out = psnr(&a, &b, max_i).map_err(lib_err)?;
        Ok(())
    })
}

/// Mean absolute error of two arrays of `len` values.
///
/// # Safety
/// `x`, `y` must hold `len` values; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn mms_mae(x: *const f64, y: *const f64, len: usize, out: *mut f64) -> MmsStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let (a, b) = pair(x, y, len)?;
        *out = mae(&a, &b).map_err(lib_err)?;
        Ok(())
    })
}

/// SSIM of two `height × width` images with dynamic range `range`.
///
/// # Safety
/// `x`, `y` must hold `height·width` values; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn mms_ssim(
    x: *const f64,
    y: *const f64,
    height: usize,
    width: usize,
    range: f64,
    out: *mut f64,
) -> MmsStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let len = height
            .checked_mul(width)
            .ok_or((MmsStatus::Shape, "size overflows".to_string()))?;
        let a = Tensor::new(&[height, width], doubles(x, len, "x")?.to_vec()).map_err(lib_err)?;
        let b = Tensor::new(&[height, width], doubles(y, len, "y")?.to_vec()).map_err(lib_err)?;
        *out = ssim(&a, &b, range).map_err(lib_err)?;
        Ok(())
    })
}
