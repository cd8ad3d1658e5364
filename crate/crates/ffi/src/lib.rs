//! C ABI over `crowdseg`.
//!
//! Every fallible function returns a [`CsStatus`]; on failure a message is
//! available from [`cs_last_error`] on the same thread. Handles are opaque and
//! must be released with their matching `*_free` function.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::cell::RefCell;
use std::ffi::{c_char, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use crowdseg::collectiveness::{self, CollectivenessResult, DenseMatrix, SparseMatrix};
use crowdseg::losses::{self, FeatureMap, SegOutput};
use crowdseg::{eval, pseudolabel, Error, Mask, Point};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CsStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    ShapeMismatch = 3,
    DecayOutOfRange = 4,
    KappaUndefined = 5,
    Singular = 6,
    Panic = 7,
}

/// Binary mask produced by circular region merging.
pub struct CsMask(Mask);

/// Collectiveness scores and the keep/drop decision for each particle.
pub struct CsCollectiveness(CollectivenessResult);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = CString::new(msg.into().replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(msg));
}

fn status_of(err: &Error) -> CsStatus {
    match err {
        Error::ShapeMismatch(_) | Error::FrameSizeMismatch => CsStatus::ShapeMismatch,
        Error::DecayOutOfRange => CsStatus::DecayOutOfRange,
        Error::KappaUndefined => CsStatus::KappaUndefined,
        Error::Singular => CsStatus::Singular,
        _ => CsStatus::InvalidArgument,
    }
}

/// Runs `f`, translating errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<(), CsStatusError>) -> CsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            CsStatus::Ok
        }
        Ok(Err(e)) => {
            set_error(e.message);
            e.status
        }
        Err(_) => {
            set_error("internal panic");
            CsStatus::Panic
        }
    }
}

struct CsStatusError {
    status: CsStatus,
    message: String,
}

impl From<Error> for CsStatusError {
    fn from(e: Error) -> Self {
        Self {
            status: status_of(&e),
            message: e.to_string(),
        }
    }
}

fn fail(status: CsStatus, message: &str) -> CsStatusError {
    CsStatusError {
        status,
        message: message.to_string(),
    }
}

fn null(what: &str) -> CsStatusError {
    fail(CsStatus::NullPointer, &format!("{what} is null"))
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], CsStatusError> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut<'a, T>(p: *mut T, len: usize, what: &str) -> Result<&'a mut [T], CsStatusError> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn out<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, CsStatusError> {
    p.as_mut().ok_or_else(|| null(what))
}

/// Message of the last failure on this thread, or NULL. Valid until the next call on this thread.
#[no_mangle]
pub extern "C" fn cs_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Upper bound `z / (1 - zK)` on path-similarity entries.
///
/// # Safety
/// `out_kappa` must be a valid pointer to a double.
#[no_mangle]
pub unsafe extern "C" fn cs_kappa(z: f64, k: usize, out_kappa: *mut f64) -> CsStatus {
    guard(|| {
        *out(out_kappa, "out_kappa")? = collectiveness::kappa(z, k)?;
        Ok(())
    })
}

/// `Z = (I - zW)^-1 - I` for a dense row-major `n x n` weight matrix.
///
/// # Safety
/// `w` and `out_z` must each point to `n * n` doubles.
#[no_mangle]
pub unsafe extern "C" fn cs_z_closed_form(w: *const f64, n: usize, z: f64, out_z: *mut f64) -> CsStatus {
    guard(|| {
        let n2 = n
            .checked_mul(n)
            .ok_or_else(|| fail(CsStatus::InvalidArgument, "n too large"))?;
        let w = slice(w, n2, "w")?;
        let dst = slice_mut(out_z, n2, "out_z")?;
        let rows: Vec<Vec<f64>> = w.chunks(n.max(1)).map(<[f64]>::to_vec).collect();
        let dense = DenseMatrix::from_rows(&rows)?;
        let zm = collectiveness::z_closed_form(&SparseMatrix::from_dense(&dense), z)?;
        dst.copy_from_slice(zm.as_slice());
        Ok(())
    })
}

/// Collectiveness and outlier filtering from a dense row-major `n x n` weight matrix.
///
/// # Safety
/// `w` must point to `n * n` doubles and `out_handle` to a writable handle pointer.
#[no_mangle]
pub unsafe extern "C" fn cs_collectiveness(
    w: *const f64,
    n: usize,
    k: usize,
    z: f64,
    factor: f64,
    out_handle: *mut *mut CsCollectiveness,
) -> CsStatus {
    guard(|| {
        let dst = out(out_handle, "out_handle")?;
        *dst = ptr::null_mut();
        let n2 = n
            .checked_mul(n)
            .ok_or_else(|| fail(CsStatus::InvalidArgument, "n too large"))?;
        let w = slice(w, n2, "w")?;
        let rows: Vec<Vec<f64>> = w.chunks(n.max(1)).map(<[f64]>::to_vec).collect();
        let sparse = SparseMatrix::from_dense(&DenseMatrix::from_rows(&rows)?);
        if sparse.max_row_nnz() > k {
            return Err(fail(CsStatus::InvalidArgument, "a row has more than K nonzeros"));
        }
        collectiveness::kappa(z, k).map_err(|_| Error::DecayOutOfRange)?;
        let phi = collectiveness::collectiveness_direct(&sparse, z)?;
        let result = collectiveness::filter_outliers(&phi, z, k, factor)?;
        *dst = Box::into_raw(Box::new(CsCollectiveness(result)));
        Ok(())
    })
}

/// Number of particles; 0 for NULL.
///
/// # Safety
/// `h` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn cs_collectiveness_len(h: *const CsCollectiveness) -> usize {
    h.as_ref().map_or(0, |h| h.0.phi.len())
}

/// Kappa and threshold of the result.
///
/// # Safety
/// `h` must be a live handle; the out pointers may be NULL.
#[no_mangle]
pub unsafe extern "C" fn cs_collectiveness_bounds(
    h: *const CsCollectiveness,
    out_kappa: *mut f64,
    out_threshold: *mut f64,
) -> CsStatus {
    guard(|| {
        let h = h.as_ref().ok_or_else(|| null("handle"))?;
        if let Some(k) = out_kappa.as_mut() {
            *k = h.0.kappa;
        }
        if let Some(t) = out_threshold.as_mut() {
            *t = h.0.threshold;
        }
        Ok(())
    })
}

/// Copies phi (doubles) and kept flags (0/1 bytes); either output may be NULL.
///
/// # Safety
/// `h` must be a live handle and each non-NULL output must hold `len` elements.
#[no_mangle]
pub unsafe extern "C" fn cs_collectiveness_copy(
    h: *const CsCollectiveness,
    out_phi: *mut f64,
    out_kept: *mut u8,
    len: usize,
) -> CsStatus {
    guard(|| {
        let h = h.as_ref().ok_or_else(|| null("handle"))?;
        if len != h.0.phi.len() {
            return Err(fail(
                CsStatus::ShapeMismatch,
                "output length differs from particle count",
            ));
        }
        if !out_phi.is_null() {
            slice_mut(out_phi, len, "out_phi")?.copy_from_slice(&h.0.phi);
        }
        if !out_kept.is_null() {
            for (d, k) in slice_mut(out_kept, len, "out_kept")?.iter_mut().zip(&h.0.kept) {
                *d = u8::from(*k);
            }
        }
        Ok(())
    })
}

/// # Safety
/// `h` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn cs_collectiveness_free(h: *mut CsCollectiveness) {
    if !h.is_null() {
        drop(Box::from_raw(h));
    }
}

/// Union of discs of `radius` around `n` particles given as interleaved `x, y` pairs.
///
/// # Safety
/// `xy` must point to `2 * n` doubles and `out_handle` to a writable handle pointer.
#[no_mangle]
pub unsafe extern "C" fn cs_region_merge(
    xy: *const f64,
    n: usize,
    radius: f64,
    width: usize,
    height: usize,
    out_handle: *mut *mut CsMask,
) -> CsStatus {
    guard(|| {
        let dst = out(out_handle, "out_handle")?;
        *dst = ptr::null_mut();
        if width == 0 || height == 0 {
            return Err(fail(CsStatus::InvalidArgument, "mask must have at least one pixel"));
        }
        if !(radius > 0.0) || !radius.is_finite() {
            return Err(fail(CsStatus::InvalidArgument, "radius must be positive"));
        }
        let xy = slice(xy, n * 2, "xy")?;
        let pts: Vec<Point> = xy.chunks_exact(2).map(|c| Point::new(c[0], c[1])).collect();
        let mask = pseudolabel::circular_region_merge(&pts, radius, width, height);
        *dst = Box::into_raw(Box::new(CsMask(mask)));
        Ok(())
    })
}

/// Wraps row-major 0/non-zero bytes as a mask handle.
///
/// # Safety
/// `bits` must point to `width * height` bytes and `out_handle` to a writable handle pointer.
#[no_mangle]
pub unsafe extern "C" fn cs_mask_from_bytes(
    bits: *const u8,
    width: usize,
    height: usize,
    out_handle: *mut *mut CsMask,
) -> CsStatus {
    guard(|| {
        let dst = out(out_handle, "out_handle")?;
        *dst = ptr::null_mut();
        let bits = slice(bits, width * height, "bits")?;
        let mask = Mask::from_bits(width, height, bits.iter().map(|b| *b != 0).collect())?;
        *dst = Box::into_raw(Box::new(CsMask(mask)));
        Ok(())
    })
}

/// Writes width, height and foreground count; any output may be NULL.
///
/// # Safety
/// `m` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn cs_mask_info(
    m: *const CsMask,
    out_width: *mut usize,
    out_height: *mut usize,
    out_count: *mut usize,
) -> CsStatus {
    guard(|| {
        let m = m.as_ref().ok_or_else(|| null("mask"))?;
        if let Some(w) = out_width.as_mut() {
            *w = m.0.width();
        }
        if let Some(h) = out_height.as_mut() {
            *h = m.0.height();
        }
        if let Some(c) = out_count.as_mut() {
            *c = m.0.count();
        }
        Ok(())
    })
}

/// Copies the mask as row-major 0/1 bytes.
///
/// # Safety
/// `m` must be a live handle and `out_bits` must hold `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn cs_mask_copy(m: *const CsMask, out_bits: *mut u8, len: usize) -> CsStatus {
    guard(|| {
        let m = m.as_ref().ok_or_else(|| null("mask"))?;
        if len != m.0.bits().len() {
            return Err(fail(CsStatus::ShapeMismatch, "output length differs from pixel count"));
        }
        for (d, b) in slice_mut(out_bits, len, "out_bits")?.iter_mut().zip(m.0.bits()) {
            *d = u8::from(*b);
        }
        Ok(())
    })
}

/// # Safety
/// `m` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn cs_mask_free(m: *mut CsMask) {
    if !m.is_null() {
        drop(Box::from_raw(m));
    }
}

/// Intersection over union of two masks; two empty masks score 1.
///
/// # Safety
/// `pred` and `gt` must be live handles and `out_iou` writable.
#[no_mangle]
pub unsafe extern "C" fn cs_iou(pred: *const CsMask, gt: *const CsMask, out_iou: *mut f64) -> CsStatus {
    guard(|| {
        let p = pred.as_ref().ok_or_else(|| null("pred"))?;
        let g = gt.as_ref().ok_or_else(|| null("gt"))?;
        *out(out_iou, "out_iou")? = eval::iou(&p.0, &g.0)?;
        Ok(())
    })
}

/// Mean of `n` per-scene IoUs.
///
/// # Safety
/// `ious` must point to `n` doubles and `out_miou` be writable.
#[no_mangle]
pub unsafe extern "C" fn cs_miou(ious: *const f64, n: usize, out_miou: *mut f64) -> CsStatus {
    guard(|| {
        let scores: Vec<(String, f64)> = slice(ious, n, "ious")?
            .iter()
            .enumerate()
            .map(|(i, v)| (i.to_string(), *v))
            .collect();
        *out(out_miou, "out_miou")? = eval::miou(&scores)?.miou;
        Ok(())
    })
}

unsafe fn seg_output(o: *const f64, y: *const u8, width: usize, height: usize) -> Result<SegOutput, CsStatusError> {
    let n = width * height;
    let o = slice(o, n, "o")?.to_vec();
    let y = slice(y, n, "y")?.iter().map(|v| *v != 0).collect();
    Ok(SegOutput::new(width, height, o, y)?)
}

/// Smoothed Dice loss of predictions `o` against 0/1 labels `y`.
///
/// # Safety
/// `o` and `y` must hold `width * height` elements; `out_loss` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cs_dice_loss(
    o: *const f64,
    y: *const u8,
    width: usize,
    height: usize,
    out_loss: *mut f64,
) -> CsStatus {
    guard(|| {
        let seg = seg_output(o, y, width, height)?;
        *out(out_loss, "out_loss")? = losses::dice_loss(&seg);
        Ok(())
    })
}

/// Gradient of the Dice loss with respect to `o`.
///
/// # Safety
/// `o`, `y` and `out_grad` must hold `width * height` elements.
#[no_mangle]
pub unsafe extern "C" fn cs_dice_grad(
    o: *const f64,
    y: *const u8,
    width: usize,
    height: usize,
    out_grad: *mut f64,
) -> CsStatus {
    guard(|| {
        let seg = seg_output(o, y, width, height)?;
        slice_mut(out_grad, width * height, "out_grad")?.copy_from_slice(&losses::dice_grad(&seg));
        Ok(())
    })
}

unsafe fn feature_pair(
    f: *const f64,
    f_hat: *const f64,
    width: usize,
    height: usize,
    channels: usize,
) -> Result<(FeatureMap, FeatureMap), CsStatusError> {
    let n = width * height * channels;
    let a = FeatureMap::new(width, height, channels, slice(f, n, "f")?.to_vec())?;
    let b = FeatureMap::new(width, height, channels, slice(f_hat, n, "f_hat")?.to_vec())?;
    Ok((a, b))
}

/// Mean squared difference of two channel-interleaved feature maps.
///
/// # Safety
/// `f` and `f_hat` must hold `width * height * channels` doubles; `out_loss` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cs_air_loss(
    f: *const f64,
    f_hat: *const f64,
    width: usize,
    height: usize,
    channels: usize,
    out_loss: *mut f64,
) -> CsStatus {
    guard(|| {
        let (a, b) = feature_pair(f, f_hat, width, height, channels)?;
        *out(out_loss, "out_loss")? = losses::air_loss(&a, &b)?;
        Ok(())
    })
}

/// Gradient of the AIR loss with respect to `f`.
///
/// # Safety
/// `f`, `f_hat` and `out_grad` must hold `width * height * channels` doubles.
#[no_mangle]
pub unsafe extern "C" fn cs_air_grad(
    f: *const f64,
    f_hat: *const f64,
    width: usize,
    height: usize,
    channels: usize,
    out_grad: *mut f64,
) -> CsStatus {
    guard(|| {
        let (a, b) = feature_pair(f, f_hat, width, height, channels)?;
        let g = losses::air_grad(&a, &b)?;
        slice_mut(out_grad, g.values().len(), "out_grad")?.copy_from_slice(g.values());
        Ok(())
    })
}
