#ifndef KPNET_H
#define KPNET_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call.
 */
typedef enum KpnetStatus {
  KPNET_STATUS_OK = 0,
  /**
   * A required pointer argument was null.
   */
  KPNET_STATUS_NULL_POINTER = 1,
  /**
   * An argument was out of range or inconsistent.
   */
  KPNET_STATUS_INVALID_ARGUMENT = 2,
  /**
   * A file could not be read or written.
   */
  KPNET_STATUS_IO = 3,
  /**
   * A file or buffer had an unexpected format.
   */
  KPNET_STATUS_FORMAT = 4,
  /**
   * Estimation failed, e.g. too few or degenerate correspondences.
   */
  KPNET_STATUS_ESTIMATION = 5,
  /**
   * The output buffer is smaller than the result.
   */
  KPNET_STATUS_BUFFER_TOO_SMALL = 6,
  /**
   * An unexpected internal failure, including caught panics.
   */
  KPNET_STATUS_INTERNAL = 7,
} KpnetStatus;

/**
 * Detected keypoints of one image. Release with [`kpnet_keypoints_free`].
 */
typedef struct KpnetKeypoints KpnetKeypoints;

/**
 * Trained detector. Create with [`kpnet_model_load`] or
 * [`kpnet_model_init`], release with [`kpnet_model_free`].
 */
typedef struct KpnetModel KpnetModel;

/**
 * RANSAC settings passed by value.
 */
typedef struct KpnetRansacParams {
  uint32_t max_iterations;
  /**
   * Inlier reprojection threshold in pixels.
   */
  double threshold;
  double confidence;
  uint64_t seed;
} KpnetRansacParams;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failure on this thread, or null when none occurred.
 * The pointer stays valid until the next failing call on this thread.
 */
const char *kpnet_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *kpnet_version(void);

/**
 * Loads the detector weights of a checkpoint file.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum KpnetStatus kpnet_model_load(const char *path, struct KpnetModel **out);

/**
 * Creates an untrained detector with the default architecture and the
 * given initialisation seed.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum KpnetStatus kpnet_model_init(uint64_t seed, struct KpnetModel **out);

/**
 * Descriptor length produced by the model, or 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t kpnet_model_descriptor_dim(const struct KpnetModel *model);

/**
 * Releases a model. Null is ignored.
 *
 * # Safety
 * `model` must be null or a handle not yet freed.
 */
void kpnet_model_free(struct KpnetModel *model);

/**
 * Detects the `top_k` highest-scoring keypoints in an interleaved 8-bit
 * RGB image of `height × width` pixels with rows `stride` bytes apart.
 * Both sides must be multiples of 8.
 *
 * # Safety
 * `rgb` must point to `height · stride` readable bytes; `model` must be a
 * live handle and `out` a valid pointer.
 */
enum KpnetStatus kpnet_detect(const struct KpnetModel *model,
                              const uint8_t *rgb,
                              size_t height,
                              size_t width,
                              size_t stride,
                              size_t top_k,
                              struct KpnetKeypoints **out);

/**
 * Number of keypoints, or 0 for a null handle.
 *
 * # Safety
 * `kps` must be null or a live handle.
 */
size_t kpnet_keypoints_len(const struct KpnetKeypoints *kps);

/**
 * Descriptor length, or 0 for a null handle.
 *
 * # Safety
 * `kps` must be null or a live handle.
 */
size_t kpnet_keypoints_dim(const struct KpnetKeypoints *kps);

/**
 * `2·len` coordinates as `(u, v)` pairs in pixels, sorted by descending
 * score. Borrowed from the handle.
 *
 * # Safety
 * `kps` must be null or a live handle.
 */
const double *kpnet_keypoints_points(const struct KpnetKeypoints *kps);

/**
 * `len` scores in `[0, 1]`. Borrowed from the handle.
 *
 * # Safety
 * `kps` must be null or a live handle.
 */
const double *kpnet_keypoints_scores(const struct KpnetKeypoints *kps);

/**
 * `len · dim` unit-norm descriptors, row-major. Borrowed from the handle.
 *
 * # Safety
 * `kps` must be null or a live handle.
 */
const float *kpnet_keypoints_descriptors(const struct KpnetKeypoints *kps);

/**
 * Releases a keypoint set. Null is ignored.
 *
 * # Safety
 * `kps` must be null or a handle not yet freed.
 */
void kpnet_keypoints_free(struct KpnetKeypoints *kps);

/**
 * Mutual nearest-neighbour matches between two keypoint sets, written as
 * `(index_a, index_b)` pairs into `pairs` (capacity `capacity` pairs).
 * `count` receives the number of matches; when it exceeds `capacity` the
 * call returns [`KpnetStatus::BufferTooSmall`] and writes nothing.
 *
 * # Safety
 * `a` and `b` must be live handles, `pairs` must hold `2·capacity` writable
 * entries (or be null when `capacity` is 0) and `count` must be valid.
 */
enum KpnetStatus kpnet_match(const struct KpnetKeypoints *a,
                             const struct KpnetKeypoints *b,
                             uint32_t *pairs,
                             size_t capacity,
                             size_t *count);

/**
 * Default RANSAC settings: 5000 iterations, 3 px, confidence 0.9995,
 * seed 0.
 */
struct KpnetRansacParams kpnet_ransac_default_params(void);

/**
 * Robust homography mapping `src[i]` to `dst[i]` for `n` correspondences
 * given as `(u, v)` pairs. Writes the row-major 3×3 matrix to `h` and,
 * when `inliers` is not null, one flag per correspondence.
 *
 * # Safety
 * `src` and `dst` must hold `2·n` readable values, `h` 9 writable values,
 * and `inliers` null or `n` writable bytes.
 */
enum KpnetStatus kpnet_estimate_homography(const double *src,
                                           const double *dst,
                                           size_t n,
                                           struct KpnetRansacParams params,
                                           double *h,
                                           uint8_t *inliers);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* KPNET_H */
