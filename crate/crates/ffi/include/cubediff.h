#ifndef CUBEDIFF_H
#define CUBEDIFF_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

#define CD_OK 0

#define CD_ERR_NULL 1

#define CD_ERR_INVALID 2

#define CD_ERR_SHAPE 3

#define CD_ERR_IO 4

#define CD_ERR_INTEGRITY 5

#define CD_ERR_CONFIG 6

#define CD_ERR_VERIFY 7

#define CD_ERR_PANIC 8

/**
 * Trained predictor handle.
 */
typedef struct CdModel CdModel;

/**
 * Quantizer specification handle.
 */
typedef struct CdQuantizer CdQuantizer;

/**
 * Generation options; `class_id < 0` means unconditional.
 */
typedef struct CdSampleOptions {
  uint32_t steps;
  double temperature;
  double guidance;
  int64_t class_id;
  uint64_t seed;
} CdSampleOptions;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread; empty if none.
 * The pointer stays valid until the next failing call on the same thread.
 */
const char *cd_last_error(void);

/**
 * Loads a JSON quantizer spec.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
int32_t cd_quantizer_load(const char *path, struct CdQuantizer **out);

/**
 * Quantizer with the same `[lo, hi]` range on every dimension.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
int32_t cd_quantizer_new_uniform(uint32_t levels,
                                 uint32_t dims,
                                 double lo,
                                 double hi,
                                 struct CdQuantizer **out);

/**
 * # Safety
 * `q` must come from a `cd_quantizer_*` constructor and not be used afterwards.
 */
void cd_quantizer_free(struct CdQuantizer *q);

/**
 * Levels of `q`, or 0 if `q` is null.
 *
 * # Safety
 * `q` must be null or a live handle.
 */
uint32_t cd_quantizer_levels(const struct CdQuantizer *q);

/**
 * Quantizes `h*w*d` row-major values into `ids`.
 *
 * # Safety
 * `values` and `ids` must point to `h*w*d` elements.
 */
int32_t cd_quantize(const struct CdQuantizer *q,
                    const float *values,
                    size_t h,
                    size_t w,
                    size_t d,
                    uint16_t *ids);

/**
 * Writes bin centers for `h*w*d` ids into `values`.
 *
 * # Safety
 * `ids` and `values` must point to `h*w*d` elements.
 */
int32_t cd_dequantize(const struct CdQuantizer *q,
                      const uint16_t *ids,
                      size_t h,
                      size_t w,
                      size_t d,
                      float *values);

/**
 * Loads a checkpoint; `use_ema != 0` selects the averaged weights.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
int32_t cd_model_load(const char *path, int32_t use_ema, struct CdModel **out);

/**
 * # Safety
 * `m` must come from `cd_model_load` and not be used afterwards.
 */
void cd_model_free(struct CdModel *m);

/**
 * Shape, levels and class count of the model's token tensors.
 *
 * # Safety
 * All out pointers must be valid.
 */
int32_t cd_model_info(const struct CdModel *m,
                      size_t *h,
                      size_t *w,
                      size_t *d,
                      uint32_t *levels,
                      uint32_t *classes);

/**
 * Runs one generation into `ids` (`len` must equal `h*w*d`).
 * `model_calls` may be null.
 *
 * # Safety
 * `ids` must point to `len` writable elements.
 */
int32_t cd_generate(const struct CdModel *m,
                    const struct CdSampleOptions *opts,
                    uint16_t *ids,
                    size_t len,
                    uint32_t *model_calls);

/**
 * Runs a self-check suite by name; `CD_ERR_VERIFY` if any check fails.
 *
 * # Safety
 * `suite` must be a NUL-terminated string.
 */
int32_t cd_verify(const char *suite, uint64_t seed);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CUBEDIFF_H */
