//! C ABI over the imputation model.
//!
//! Every function returns an [`MmtStatus`]; on failure the message is
//! available from [`mmt_last_error`] on the same thread. Contrast ids are
//! 0-based. Images are row-major `f64`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;
use std::slice;

use mmt::checkpoint::{load_model, Checkpoint};
use mmt::diffcore::{Graph, Tensor};
use mmt::eval::metrics::{psnr_ref, ssim};
use mmt::model::Mmt;
use mmt::MmtError;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MmtStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    /// Corrupt or unrecognised file.
    Format = 4,
    /// Non-finite values or another failure during computation.
    Runtime = 5,
    /// A Rust panic was caught at the boundary.
    Panic = 6,
}

/// Opaque handle to a loaded model.
pub struct MmtModel {
    inner: Mmt,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &MmtError) -> MmtStatus {
    match e {
        MmtError::Io { .. } => MmtStatus::Io,
        MmtError::BadMagic { .. } | MmtError::Truncated { .. } | MmtError::Checksum { .. } | MmtError::Format { .. } => {
            MmtStatus::Format
        }
        MmtError::Validation(_) | MmtError::Shape(_) => MmtStatus::InvalidArgument,
        _ => MmtStatus::Runtime,
    }
}

enum Failure {
    Null(&'static str),
    Mmt(MmtError),
}

impl From<MmtError> for Failure {
    fn from(e: MmtError) -> Self {
        Failure::Mmt(e)
    }
}

/// Runs `f`, recording any error or panic for `mmt_last_error`.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> MmtStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => MmtStatus::Ok,
        Ok(Err(Failure::Null(what))) => {
            set_error(format!("{what} is null"));
            MmtStatus::NullPointer
        }
        Ok(Err(Failure::Mmt(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            MmtStatus::Panic
        }
    }
}

fn non_null<T>(p: *const T, what: &'static str) -> Result<(), Failure> {
    if p.is_null() {
        Err(Failure::Null(what))
    } else {
        Ok(())
    }
}

fn invalid(msg: String) -> Failure {
    Failure::Mmt(MmtError::Validation(msg))
}

/// Message of the last failed call on this thread, or null. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn mmt_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Loads a model or training checkpoint. On success `*out` owns a handle
/// to be released with `mmt_model_free`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn mmt_model_load(path: *const c_char, out: *mut *mut MmtModel) -> MmtStatus {
    guard(|| {
        non_null(path, "path")?;
        non_null(out, "out")?;
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| invalid("path is not UTF-8".into()))?;
        let model = load_model(&Checkpoint::load(Path::new(path))?)?;
        *out = Box::into_raw(Box::new(MmtModel { inner: model }));
        Ok(())
    })
}

/// Releases a handle; null is ignored.
///
/// # Safety
/// `model` must come from `mmt_model_load` and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn mmt_model_free(model: *mut MmtModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of contrasts the model was trained on.
///
/// # Safety
/// `model` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn mmt_model_n_contrasts(model: *const MmtModel, out: *mut usize) -> MmtStatus {
    guard(|| {
        non_null(model, "model")?;
        non_null(out, "out")?;
        *out = (*model).inner.config.n_contrasts;
        Ok(())
    })
}

/// Synthesises contrast `target` of one `height × width` slice.
///
/// `inputs` holds `n_available` images back to back, one per entry of
/// `available`, already normalised the way the model was trained. `out`
/// receives `height · width` values.
///
/// # Safety
/// All pointers must be valid for the sizes described above.
#[no_mangle]
pub unsafe extern "C" fn mmt_impute(
    model: *const MmtModel,
    inputs: *const f64,
    available: *const usize,
    n_available: usize,
    height: usize,
    width: usize,
    target: usize,
    out: *mut f64,
) -> MmtStatus {
    guard(|| {
        non_null(model, "model")?;
        non_null(inputs, "inputs")?;
        non_null(available, "available")?;
        non_null(out, "out")?;
        if n_available == 0 || height == 0 || width == 0 {
            return Err(invalid("n_available, height and width must be positive".into()));
        }
        let model = &(*model).inner;
        let ids = slice::from_raw_parts(available, n_available).to_vec();
        let n = height * width;
        let data = slice::from_raw_parts(inputs, n_available * n).to_vec();
        let x = Tensor::new(vec![n_available, 1, height, width], data)?;
        let mut g = Graph::no_grad();
        let xv = g.constant(x);
        let pyr = model.encode(&mut g, xv, &ids)?;
        let (img, _) = model.decode(&mut g, &pyr, target, false)?;
        slice::from_raw_parts_mut(out, n).copy_from_slice(g.value(img).data());
        Ok(())
    })
}

/// PSNR of `estimate` against `reference`, with the data range taken from
/// the reference. Identical images give +infinity.
///
/// # Safety
/// Both arrays must hold `len` values and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mmt_psnr(estimate: *const f64, reference: *const f64, len: usize, out: *mut f64) -> MmtStatus {
    guard(|| {
        non_null(estimate, "estimate")?;
        non_null(reference, "reference")?;
        non_null(out, "out")?;
        *out = psnr_ref(slice::from_raw_parts(estimate, len), slice::from_raw_parts(reference, len))?;
        Ok(())
    })
}

/// Mean SSIM with an 11×11 Gaussian window; images must be at least that
/// large.
///
/// # Safety
/// Both arrays must hold `height · width` values and `out` must be
/// writable.
#[no_mangle]
pub unsafe extern "C" fn mmt_ssim(
    estimate: *const f64,
    reference: *const f64,
    height: usize,
    width: usize,
    out: *mut f64,
) -> MmtStatus {
    guard(|| {
        non_null(estimate, "estimate")?;
        non_null(reference, "reference")?;
        non_null(out, "out")?;
        let n = height * width;
        *out = ssim(
            slice::from_raw_parts(estimate, n),
            slice::from_raw_parts(reference, n),
            height,
            width,
        )?;
        Ok(())
    })
}
