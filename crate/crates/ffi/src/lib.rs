//! C ABI over the kpnet detector, matcher and homography estimator.
//!
//! Objects cross the boundary as opaque handles created and destroyed by
//! paired functions. Every fallible call returns a [`KpnetStatus`]; the
//! message of the last failure on the calling thread is available from
//! [`kpnet_last_error`]. Panics are caught and reported as
//! [`KpnetStatus::Internal`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use kpnet::checkpoint::Checkpoint;
use kpnet::evalkit::metrics::match_descriptors;
use kpnet::evalkit::ransac::{estimate_homography, RansacConfig};
use kpnet::keypoints::KeypointSet;
use kpnet::model::{KeyPointNet, KeypointNetConfig};
use kpnet::raster::Image;
use kpnet::Error;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KpnetStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullPointer = 1,
    /// An argument was out of range or inconsistent.
    InvalidArgument = 2,
    /// A file could not be read or written.
    Io = 3,
    /// A file or buffer had an unexpected format.
    Format = 4,
    /// Estimation failed, e.g. too few or degenerate correspondences.
    Estimation = 5,
    /// The output buffer is smaller than the result.
    BufferTooSmall = 6,
    /// An unexpected internal failure, including caught panics.
    Internal = 7,
}

/// Trained detector. Create with [`kpnet_model_load`] or
/// [`kpnet_model_init`], release with [`kpnet_model_free`].
pub struct KpnetModel {
    inner: KeyPointNet<f32>,
}

/// Detected keypoints of one image. Release with [`kpnet_keypoints_free`].
pub struct KpnetKeypoints {
    inner: KeypointSet,
}

/// RANSAC settings passed by value.
#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct KpnetRansacParams {
    pub max_iterations: u32,
    /// Inlier reprojection threshold in pixels.
    pub threshold: f64,
    pub confidence: f64,
    pub seed: u64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let text = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(text).ok());
}

fn fail(status: KpnetStatus, msg: impl Into<String>) -> KpnetStatus {
    set_error(msg);
    status
}

fn status_of(err: &Error) -> KpnetStatus {
    match err {
        Error::Io { .. } => KpnetStatus::Io,
        Error::Image { .. } | Error::Checkpoint(_) | Error::Format(_) | Error::Dataset(_) => KpnetStatus::Format,
        Error::Shape(_) | Error::Config { .. } => KpnetStatus::InvalidArgument,
        Error::Estimation(_) | Error::Degenerate(_) => KpnetStatus::Estimation,
    }
}

fn guard(f: impl FnOnce() -> Result<(), KpnetStatus>) -> KpnetStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => KpnetStatus::Ok,
        Ok(Err(status)) => status,
        Err(panic) => {
            let msg = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            fail(KpnetStatus::Internal, msg)
        }
    }
}

fn check<T>(r: kpnet::Result<T>) -> Result<T, KpnetStatus> {
    r.map_err(|e| fail(status_of(&e), e.to_string()))
}

fn non_null<T>(p: *const T, name: &str) -> Result<(), KpnetStatus> {
    if p.is_null() {
        Err(fail(KpnetStatus::NullPointer, format!("`{name}` is null")))
    } else {
        Ok(())
    }
}

/// Message of the last failure on this thread, or null when none occurred.
/// The pointer stays valid until the next failing call on this thread.
#[no_mangle]
pub extern "C" fn kpnet_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn kpnet_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads the detector weights of a checkpoint file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn kpnet_model_load(path: *const c_char, out: *mut *mut KpnetModel) -> KpnetStatus {
    guard(|| {
        non_null(path, "path")?;
        non_null(out, "out")?;
        let path = unsafe { CStr::from_ptr(path) }
            .to_str()
            .map_err(|_| fail(KpnetStatus::InvalidArgument, "path is not UTF-8"))?;
        let ckpt = check(Checkpoint::load(Path::new(path)))?;
        let inner = check(ckpt.model(None))?;
        unsafe { *out = Box::into_raw(Box::new(KpnetModel { inner })) };
        Ok(())
    })
}

/// Creates an untrained detector with the default architecture and the
/// given initialisation seed.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn kpnet_model_init(seed: u64, out: *mut *mut KpnetModel) -> KpnetStatus {
    guard(|| {
        non_null(out, "out")?;
        let inner = KeyPointNet::new(KeypointNetConfig::default(), seed);
        unsafe { *out = Box::into_raw(Box::new(KpnetModel { inner })) };
        Ok(())
    })
}

/// Descriptor length produced by the model, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn kpnet_model_descriptor_dim(model: *const KpnetModel) -> usize {
    unsafe { model.as_ref() }.map_or(0, |m| m.inner.config.descriptor_dim)
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn kpnet_model_free(model: *mut KpnetModel) {
    if !model.is_null() {
        drop(unsafe { Box::from_raw(model) });
    }
}

/// Detects the `top_k` highest-scoring keypoints in an interleaved 8-bit
/// RGB image of `height × width` pixels with rows `stride` bytes apart.
/// Both sides must be multiples of 8.
///
/// # Safety
/// `rgb` must point to `height · stride` readable bytes; `model` must be a
/// live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn kpnet_detect(
    model: *const KpnetModel,
    rgb: *const u8,
    height: usize,
    width: usize,
    stride: usize,
    top_k: usize,
    out: *mut *mut KpnetKeypoints,
) -> KpnetStatus {
    guard(|| {
        non_null(model, "model")?;
        non_null(rgb, "rgb")?;
        non_null(out, "out")?;
        if height == 0 || width == 0 || height % 8 != 0 || width % 8 != 0 {
            return Err(fail(KpnetStatus::InvalidArgument, format!("image {height}x{width} must be non-empty multiples of 8")));
        }
        if stride < 3 * width {
            return Err(fail(KpnetStatus::InvalidArgument, format!("stride {stride} < 3 * width {width}")));
        }
        let bytes = unsafe { std::slice::from_raw_parts(rgb, height * stride) };
        let image = Image::from_fn(3, height, width, |c, y, x| bytes[y * stride + 3 * x + c] as f32 / 255.0);
        let model = unsafe { &*model };
        let inner = check(model.inner.detect(&image, top_k))?;
        unsafe { *out = Box::into_raw(Box::new(KpnetKeypoints { inner })) };
        Ok(())
    })
}

/// Number of keypoints, or 0 for a null handle.
///
/// # Safety
/// `kps` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn kpnet_keypoints_len(kps: *const KpnetKeypoints) -> usize {
    unsafe { kps.as_ref() }.map_or(0, |k| k.inner.len())
}

/// Descriptor length, or 0 for a null handle.
///
/// # Safety
/// `kps` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn kpnet_keypoints_dim(kps: *const KpnetKeypoints) -> usize {
    unsafe { kps.as_ref() }.map_or(0, |k| k.inner.dim)
}

/// `2·len` coordinates as `(u, v)` pairs in pixels, sorted by descending
/// score. Borrowed from the handle.
///
/// # Safety
/// `kps` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn kpnet_keypoints_points(kps: *const KpnetKeypoints) -> *const f64 {
    unsafe { kps.as_ref() }.map_or(ptr::null(), |k| k.inner.points.as_ptr().cast())
}

/// `len` scores in `[0, 1]`. Borrowed from the handle.
///
/// # Safety
/// `kps` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn kpnet_keypoints_scores(kps: *const KpnetKeypoints) -> *const f64 {
    unsafe { kps.as_ref() }.map_or(ptr::null(), |k| k.inner.scores.as_ptr())
}

/// `len · dim` unit-norm descriptors, row-major. Borrowed from the handle.
///
/// # Safety
/// `kps` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn kpnet_keypoints_descriptors(kps: *const KpnetKeypoints) -> *const f32 {
    unsafe { kps.as_ref() }.map_or(ptr::null(), |k| k.inner.descriptors.as_ptr())
}

/// Releases a keypoint set. Null is ignored.
///
/// # Safety
/// `kps` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn kpnet_keypoints_free(kps: *mut KpnetKeypoints) {
    if !kps.is_null() {
        drop(unsafe { Box::from_raw(kps) });
    }
}

/// Mutual nearest-neighbour matches between two keypoint sets, written as
/// `(index_a, index_b)` pairs into `pairs` (capacity `capacity` pairs).
/// `count` receives the number of matches; when it exceeds `capacity` the
/// call returns [`KpnetStatus::BufferTooSmall`] and writes nothing.
///
/// # Safety
/// `a` and `b` must be live handles, `pairs` must hold `2·capacity` writable
/// entries (or be null when `capacity` is 0) and `count` must be valid.
#[no_mangle]
pub unsafe extern "C" fn kpnet_match(
    a: *const KpnetKeypoints,
    b: *const KpnetKeypoints,
    pairs: *mut u32,
    capacity: usize,
    count: *mut usize,
) -> KpnetStatus {
    guard(|| {
        non_null(a, "a")?;
        non_null(b, "b")?;
        non_null(count, "count")?;
        let (a, b) = unsafe { (&(*a).inner, &(*b).inner) };
        if a.dim != b.dim {
            return Err(fail(KpnetStatus::InvalidArgument, format!("descriptor sizes differ: {} vs {}", a.dim, b.dim)));
        }
        let matches = match_descriptors(&a.descriptors, &b.descriptors, a.dim);
        unsafe { *count = matches.len() };
        if matches.len() > capacity {
            return Err(fail(KpnetStatus::BufferTooSmall, format!("{} matches, capacity {capacity}", matches.len())));
        }
        if !matches.is_empty() {
            non_null(pairs, "pairs")?;
            let out = unsafe { std::slice::from_raw_parts_mut(pairs, 2 * matches.len()) };
            for (k, (i, j)) in matches.into_iter().enumerate() {
                out[2 * k] = i as u32;
                out[2 * k + 1] = j as u32;
            }
        }
        Ok(())
    })
}

/// Default RANSAC settings: 5000 iterations, 3 px, confidence 0.9995,
/// seed 0.
#[no_mangle]
pub extern "C" fn kpnet_ransac_default_params() -> KpnetRansacParams {
    let c = RansacConfig::default();
    KpnetRansacParams { max_iterations: c.max_iterations as u32, threshold: c.threshold, confidence: c.confidence, seed: 0 }
}

/// Robust homography mapping `src[i]` to `dst[i]` for `n` correspondences
/// given as `(u, v)` pairs. Writes the row-major 3×3 matrix to `h` and,
/// when `inliers` is not null, one flag per correspondence.
///
/// # Safety
/// `src` and `dst` must hold `2·n` readable values, `h` 9 writable values,
/// and `inliers` null or `n` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn kpnet_estimate_homography(
    src: *const f64,
    dst: *const f64,
    n: usize,
    params: KpnetRansacParams,
    h: *mut f64,
    inliers: *mut u8,
) -> KpnetStatus {
    guard(|| {
        non_null(src, "src")?;
        non_null(dst, "dst")?;
        non_null(h, "h")?;
        let read = |p: *const f64| -> Vec<[f64; 2]> {
            unsafe { std::slice::from_raw_parts(p, 2 * n) }.chunks(2).map(|c| [c[0], c[1]]).collect()
        };
        let config = RansacConfig {
            max_iterations: params.max_iterations as usize,
            threshold: params.threshold,
            confidence: params.confidence,
        };
        let result = check(estimate_homography(&read(src), &read(dst), &config, params.seed))?;
        unsafe { std::slice::from_raw_parts_mut(h, 9) }.copy_from_slice(&result.homography.to_row_major());
        if !inliers.is_null() {
            let flags = unsafe { std::slice::from_raw_parts_mut(inliers, n) };
            for (f, &ok) in flags.iter_mut().zip(&result.inliers) {
                *f = ok as u8;
            }
        }
        Ok(())
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn error_messages_are_thread_local() {
        set_error("boom");
        let msg = unsafe { CStr::from_ptr(kpnet_last_error()) }.to_str().unwrap().to_owned();
        assert_eq!(msg, "boom");
        std::thread::spawn(|| assert!(kpnet_last_error().is_null())).join().unwrap();
    }

    #[test]
    fn panics_become_internal_status() {
        assert_eq!(guard(|| panic!("bad")), KpnetStatus::Internal);
        let msg = unsafe { CStr::from_ptr(kpnet_last_error()) }.to_str().unwrap();
        assert_eq!(msg, "bad");
    }
}
