#ifndef MMT_H
#define MMT_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum MmtStatus {
  MMT_STATUS_OK = 0,
  MMT_STATUS_NULL_POINTER = 1,
  MMT_STATUS_INVALID_ARGUMENT = 2,
  MMT_STATUS_IO = 3,
  /**
   * Corrupt or unrecognised file.
   */
  MMT_STATUS_FORMAT = 4,
  /**
   * Non-finite values or another failure during computation.
   */
  MMT_STATUS_RUNTIME = 5,
  /**
   * A Rust panic was caught at the boundary.
   */
  MMT_STATUS_PANIC = 6,
} MmtStatus;

/**
 * Opaque handle to a loaded model.
 */
typedef struct MmtModel MmtModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. The pointer
 * stays valid until the next failing call on the same thread.
 */
const char *mmt_last_error(void);

/**
 * Loads a model or training checkpoint. On success `*out` owns a handle
 * to be released with `mmt_model_free`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a writable pointer.
 */
enum MmtStatus mmt_model_load(const char *path, struct MmtModel **out);

/**
 * Releases a handle; null is ignored.
 *
 * # Safety
 * `model` must come from `mmt_model_load` and not be used afterwards.
 */
void mmt_model_free(struct MmtModel *model);

/**
 * Number of contrasts the model was trained on.
 *
 * # Safety
 * `model` must be a live handle and `out` writable.
 */
enum MmtStatus mmt_model_n_contrasts(const struct MmtModel *model, size_t *out);

/**
 * Synthesises contrast `target` of one `height × width` slice.
 *
 * `inputs` holds `n_available` images back to back, one per entry of
 * `available`, already normalised the way the model was trained. `out`
 * receives `height · width` values.
 *
 * # Safety
 * All pointers must be valid for the sizes described above.
 */
enum MmtStatus mmt_impute(const struct MmtModel *model,
                          const double *inputs,
                          const size_t *available,
                          size_t n_available,
                          size_t height,
                          size_t width,
                          size_t target,
                          double *out);

/**
 * PSNR of `estimate` against `reference`, with the data range taken from
 * the reference. Identical images give +infinity.
 *
 * # Safety
 * Both arrays must hold `len` values and `out` must be writable.
 */
enum MmtStatus mmt_psnr(const double *estimate, const double *reference, size_t len, double *out);

/**
 * Mean SSIM with an 11×11 Gaussian window; images must be at least that
 * large.
 *
 * # Safety
 * Both arrays must hold `height · width` values and `out` must be
 * writable.
 */
enum MmtStatus mmt_ssim(const double *estimate,
                        const double *reference,
                        size_t height,
                        size_t width,
                        double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MMT_H */
