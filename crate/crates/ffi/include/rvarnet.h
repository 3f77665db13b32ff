#ifndef RVARNET_H
#define RVARNET_H

/* Generated by cbindgen; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum RvnStatus {
  RVN_STATUS_OK = 0,
  RVN_STATUS_NULL_POINTER = 1,
  RVN_STATUS_INVALID_ARGUMENT = 2,
  RVN_STATUS_IO = 3,
  RVN_STATUS_FORMAT = 4,
  RVN_STATUS_NUMERICAL = 5,
  RVN_STATUS_PANIC = 6,
} RvnStatus;

/**
 * Which image-quality metric [`rvn_metric`] computes.
 */
typedef enum RvnMetric {
  RVN_METRIC_SSIM = 0,
  RVN_METRIC_PSNR = 1,
  RVN_METRIC_NMSE = 2,
} RvnMetric;

/**
 * A sampling mask with its auto-calibration region.
 */
typedef struct RvnMask RvnMask;

/**
 * A trained model loaded from a checkpoint.
 */
typedef struct RvnModel RvnModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the calling thread's last error message into `buf` (NUL-terminated,
 * truncated to `len`). Returns the full message length in bytes.
 *
 * # Safety
 * `buf` must be null or point to `len` writable bytes.
 */
uintptr_t rvn_last_error_message(char *buf, uintptr_t len);

/**
 * Library version as a static NUL-terminated string.
 */
const char *rvn_version(void);

/**
 * Centred orthonormal 2D FFT of `n_batch` complex `ny x nx` planes in double
 * precision. `inverse != 0` selects the inverse transform. `input` and
 * `output` hold `2 * n_batch * ny * nx` values and may not overlap.
 *
 * # Safety
 * Both pointers must reference arrays of the stated length.
 */
enum RvnStatus rvn_fft2c(const double *input,
                         double *output,
                         uintptr_t n_batch,
                         uintptr_t ny,
                         uintptr_t nx,
                         int32_t inverse);

/**
 * Random Cartesian column mask (`kind = 0`) or 2D variable-density mask
 * (`kind = 1`). `param` is the ACS fraction for Cartesian masks and the
 * centre radius for variable-density masks.
 *
 * # Safety
 * `out` must be a valid pointer; on success it receives a handle to free with
 * [`rvn_mask_free`].
 */
enum RvnStatus rvn_mask_generate(int32_t kind,
                                 uintptr_t ny,
                                 uintptr_t nx,
                                 double acceleration,
                                 double param,
                                 uint64_t seed,
                                 struct RvnMask **out);

/**
 * Builds a mask from byte arrays (`0` = not sampled) of `ny * nx` entries.
 * The ACS region must lie inside the mask.
 *
 * # Safety
 * `mask` and `acs` must each reference `ny * nx` bytes; `out` must be valid.
 */
enum RvnStatus rvn_mask_from_bits(uintptr_t ny,
                                  uintptr_t nx,
                                  const uint8_t *mask,
                                  const uint8_t *acs,
                                  double acceleration,
                                  struct RvnMask **out);

/**
 * Writes the mask dimensions.
 *
 * # Safety
 * `mask` must be a live handle; `ny` and `nx` must be valid pointers.
 */
enum RvnStatus rvn_mask_dims(const struct RvnMask *mask, uintptr_t *ny, uintptr_t *nx);

/**
 * Copies the mask (and, when `acs` is non-null, the ACS region) as bytes.
 *
 * # Safety
 * `mask` must be a live handle; `bits` (and `acs` if non-null) must reference
 * `len` writable bytes where `len` equals `ny * nx`.
 */
enum RvnStatus rvn_mask_copy_bits(const struct RvnMask *mask,
                                  uint8_t *bits,
                                  uint8_t *acs,
                                  uintptr_t len);

/**
 * Total points divided by sampled points.
 *
 * # Safety
 * `mask` must be a live handle and `out` a valid pointer.
 */
enum RvnStatus rvn_mask_effective_acceleration(const struct RvnMask *mask, double *out);

/**
 * Releases a mask. Null is ignored.
 *
 * # Safety
 * `mask` must come from this library and not be used afterwards.
 */
void rvn_mask_free(struct RvnMask *mask);

/**
 * Loads a model checkpoint.
 *
 * # Safety
 * `path` must be a NUL-terminated UTF-8 string and `out` a valid pointer.
 */
enum RvnStatus rvn_model_load(const char *path, struct RvnModel **out);

/**
 * Number of trainable scalars of a loaded model.
 *
 * # Safety
 * `model` must be a live handle and `out` a valid pointer.
 */
enum RvnStatus rvn_model_parameter_count(const struct RvnModel *model, uintptr_t *out);

/**
 * Reconstructs one slice. `kspace` holds `2 * n_coils * ny * nx` floats of
 * already sub-sampled data; `image` receives `ny * nx` magnitudes.
 *
 * # Safety
 * Handles must be live and buffers must have the stated lengths.
 */
enum RvnStatus rvn_model_reconstruct(const struct RvnModel *model,
                                     const float *kspace,
                                     uintptr_t n_coils,
                                     uintptr_t ny,
                                     uintptr_t nx,
                                     const struct RvnMask *mask,
                                     float *image);

/**
 * Releases a model. Null is ignored.
 *
 * # Safety
 * `model` must come from this library and not be used afterwards.
 */
void rvn_model_free(struct RvnModel *model);

/**
 * Root-sum-of-squares of the inverse FFT of (sub-sampled) k-space.
 *
 * # Safety
 * `kspace` must reference `2 * n_coils * ny * nx` floats, `image` `ny * nx`.
 */
enum RvnStatus rvn_zero_filled(const float *kspace,
                               uintptr_t n_coils,
                               uintptr_t ny,
                               uintptr_t nx,
                               float *image);

/**
 * Compares `pred` against `reference`, both `ny * nx` floats. SSIM uses the
 * reference maximum as data range.
 *
 * # Safety
 * Buffers must have the stated length and `out` must be valid.
 */
enum RvnStatus rvn_metric(enum RvnMetric metric,
                          const float *reference,
                          const float *pred,
                          uintptr_t ny,
                          uintptr_t nx,
                          double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* RVARNET_H */
