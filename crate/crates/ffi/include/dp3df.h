#ifndef DP3DF_H
#define DP3DF_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum {
  DP3DF_STATUS_OK = 0,
  DP3DF_STATUS_NULL_POINTER = 1,
  DP3DF_STATUS_CONTRACT = 2,
  DP3DF_STATUS_IO = 3,
  DP3DF_STATUS_FORMAT = 4,
  DP3DF_STATUS_NON_FINITE = 5,
  DP3DF_STATUS_PANIC = 6,
} dp3df_status;

/**
 * Loaded predictor checkpoint.
 */
typedef struct dp3df_model dp3df_model;

/**
 * Filter geometry: upscale factor, kernel extents and clip length.
 */
typedef struct {
  size_t r;
  size_t kh;
  size_t kw;
  size_t kt;
  size_t frames;
} dp3df_geometry;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failing call on this thread; empty after a success.
 * The pointer stays valid until the next call on the same thread.
 */
const char *dp3df_last_error(void);

/**
 * Loads a checkpoint and its sibling `.cfg` file.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
dp3df_status dp3df_model_load(const char *path, dp3df_model **out);

/**
 * Releases a model. Null is ignored.
 *
 * # Safety
 * `model` must come from [`dp3df_model_load`] and not be used afterwards.
 */
void dp3df_model_free(dp3df_model *model);

/**
 * # Safety
 * `model` and `out` must be valid pointers.
 */
dp3df_status dp3df_model_geometry(const dp3df_model *model, dp3df_geometry *out);

/**
 * Restores the center frame of a `[frames, h, w, c]` clip into `out_y`,
 * which must hold `r*h * r*w * c` floats.
 *
 * # Safety
 * `clip` must hold `frames*h*w*c` floats and `out_y` `out_len` floats.
 */
dp3df_status dp3df_model_infer(const dp3df_model *model,
                               const float *clip,
                               size_t frames,
                               size_t h,
                               size_t w,
                               size_t c,
                               float *out_y,
                               size_t out_len);

/**
 * Applies raw (pre-activation) filter logits `[h, w, r*r*(kh*kw*kt+1)]`
 * to a clip `[geom.frames, h, w, c]`, writing `Z` of `r*h * r*w * c` floats.
 *
 * # Safety
 * Buffers must hold the stated number of floats.
 */
dp3df_status dp3df_apply(dp3df_geometry geom,
                         const float *clip,
                         size_t h,
                         size_t w,
                         size_t c,
                         const float *raw,
                         float *out,
                         size_t out_len);

/**
 * PSNR in dB between two `[h, w, c]` frames.
 *
 * # Safety
 * `a` and `b` must hold `h*w*c` floats; `out` must be valid.
 */
dp3df_status dp3df_psnr(const float *a,
                        const float *b,
                        size_t h,
                        size_t w,
                        size_t c,
                        double peak,
                        double *out);

/**
 * Mean SSIM between two `[h, w, c]` frames.
 *
 * # Safety
 * `a` and `b` must hold `h*w*c` floats; `out` must be valid.
 */
dp3df_status dp3df_ssim(const float *a,
                        const float *b,
                        size_t h,
                        size_t w,
                        size_t c,
                        double peak,
                        double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DP3DF_H */
