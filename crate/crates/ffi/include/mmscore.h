#ifndef MMSCORE_H
#define MMSCORE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call.
 */
typedef enum {
  MMS_STATUS_OK = 0,
  MMS_STATUS_NULL_POINTER = 1,
  MMS_STATUS_INVALID_ARGUMENT = 2,
  MMS_STATUS_IO = 3,
  MMS_STATUS_FORMAT = 4,
  MMS_STATUS_CORRUPTION = 5,
  MMS_STATUS_SHAPE = 6,
  MMS_STATUS_CONTRACT = 7,
  MMS_STATUS_NUMERICAL = 8,
  MMS_STATUS_CONFIG = 9,
  MMS_STATUS_DOMAIN = 10,
  MMS_STATUS_PANIC = 11,
} MmsStatus;

/**
 * A loaded checkpoint.
 */
typedef struct MmsModel MmsModel;

/**
 * A dense row-major array of doubles.
 */
typedef struct MmsTensor MmsTensor;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null if the last call
 * succeeded. Valid until the next call into this library on the same thread.
 */
const char *mms_last_error_message(void);

/**
 * Loads a checkpoint file.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
MmsStatus mms_model_load(const char *path, MmsModel **out);

/**
 * Releases a model; null is ignored.
 *
 * # Safety
 * `model` must come from [`mms_model_load`] and not be used afterwards.
 */
void mms_model_free(MmsModel *model);

/**
 * Number of modalities (channels) of the model; 0 for null.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t mms_model_num_modalities(const MmsModel *model);

/**
 * Name of modality `index`, owned by the model; null if out of range.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
const char *mms_model_modality_name(const MmsModel *model, size_t index);

/**
 * Synthesizes the comma-separated `missing` modalities of every subject in
 * `cond` (`[N, C, H, W]`) with `steps` reverse steps. The result has the
 * same shape; conditional channels are copied unchanged.
 *
 * # Safety
 * Pointers must be valid; `missing` NUL-terminated.
 */
MmsStatus mms_model_sample(const MmsModel *model,
                           const MmsTensor *cond,
                           const char *missing,
                           size_t steps,
                           uint64_t seed,
                           int final_noise,
                           MmsTensor **out);

/**
 * Creates a tensor by copying `product(dims)` values from `data`.
 *
 * # Safety
 * `dims` must hold `ndims` entries and `data` their product.
 */
MmsStatus mms_tensor_new(const size_t *dims, size_t ndims, const double *data, MmsTensor **out);

/**
 * Reads a tensor file.
 *
 * # Safety
 * `path` must be NUL-terminated and `out` valid.
 */
MmsStatus mms_tensor_read(const char *path, MmsTensor **out);

/**
 * Writes a tensor file.
 *
 * # Safety
 * `tensor` must be live and `path` NUL-terminated.
 */
MmsStatus mms_tensor_write(const MmsTensor *tensor, const char *path);

/**
 * Number of dimensions; 0 for null.
 *
 * # Safety
 * `tensor` must be null or live.
 */
size_t mms_tensor_ndims(const MmsTensor *tensor);

/**
 * Copies the extents into `out`, which has room for `capacity` entries.
 *
 * # Safety
 * `out` must hold `capacity` entries.
 */
MmsStatus mms_tensor_dims(const MmsTensor *tensor, size_t *out, size_t capacity);

/**
 * Number of elements; 0 for null.
 *
 * # Safety
 * `tensor` must be null or live.
 */
size_t mms_tensor_len(const MmsTensor *tensor);

/**
 * Borrowed pointer to the row-major values, valid while the tensor lives.
 *
 * # Safety
 * `tensor` must be null or live.
 */
const double *mms_tensor_data(const MmsTensor *tensor);

/**
 * Releases a tensor; null is ignored.
 *
 * # Safety
 * `tensor` must come from this library and not be used afterwards.
 */
void mms_tensor_free(MmsTensor *tensor);

/**
 * PSNR in dB of two arrays of `len` values; `+inf` when identical.
 *
 * # Safety
 * `x`, `y` must hold `len` values; `out` must be valid.
 */
MmsStatus mms_psnr(const double *x, const double *y, size_t len, double max_i, double *out);

/**
 * Mean absolute error of two arrays of `len` values.
 *
 * # Safety
 * `x`, `y` must hold `len` values; `out` must be valid.
 */
MmsStatus mms_mae(const double *x, const double *y, size_t len, double *out);

/**
 * SSIM of two `height × width` images with dynamic range `range`.
 *
 * # Safety
 * `x`, `y` must hold `height·width` values; `out` must be valid.
 */
MmsStatus mms_ssim(const double *x,
                   const double *y,
                   size_t height,
                   size_t width,
                   double range,
                   double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MMSCORE_H */
