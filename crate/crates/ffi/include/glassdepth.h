#ifndef GLASSDEPTH_H
#define GLASSDEPTH_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum GdScope {
  GD_SCOPE_TRANSPARENT_ONLY = 0,
  GD_SCOPE_ALL_PIXELS = 1,
} GdScope;

/*
 Result of every call.
 */
typedef enum GdStatus {
  GD_STATUS_OK = 0,
  GD_STATUS_NULL_POINTER = 1,
  GD_STATUS_INVALID_ARGUMENT = 2,
  GD_STATUS_SHAPE = 3,
  GD_STATUS_CONFIG = 4,
  GD_STATUS_MISSING_INPUT = 5,
  GD_STATUS_NUMERICAL = 6,
  GD_STATUS_CHECKPOINT = 7,
  GD_STATUS_IO = 8,
  /*
   A Rust panic was caught at the boundary.
   */
  GD_STATUS_INTERNAL = 9,
} GdStatus;

/*
 Loaded codec and denoiser. Opaque to C.
 */
typedef struct GdPipeline GdPipeline;

/*
 Pinhole intrinsics in pixels.
 */
typedef struct GdCamera {
  double fx;
  double fy;
  double cx;
  double cy;
} GdCamera;

typedef struct GdMetrics {
  double rmse;
  double rel;
  double mae;
  double delta_105;
  double delta_110;
  double delta_125;
  uint64_t pixel_count;
} GdMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Library version as a static NUL-terminated string.
 */
const char *gd_version(void);

/*
 Message for the last failed call on this thread, empty after a
 success. Valid until the next call on the same thread.
 */
const char *gd_last_error(void);

/*
 Loads a codec and a denoiser checkpoint. On success `*out` owns a
 handle to release with [`gd_pipeline_free`].

 # Safety
 Paths must be NUL-terminated; `out` must be writable.
 */
enum GdStatus gd_pipeline_load(const char *codec_path,
                               const char *denoiser_path,
                               struct GdPipeline **out);

/*
 Releases a handle from [`gd_pipeline_load`]. Null is ignored.

 # Safety
 `pipeline` must come from [`gd_pipeline_load`] and not be used again.
 */
void gd_pipeline_free(struct GdPipeline *pipeline);

/*
 Global-optimization depth completion without a learned model.
 Transparent pixels are discarded from `raw_depth` and filled.

 # Safety
 Arrays must hold `height * width` elements; `camera` must be valid.
 */
enum GdStatus gd_refine_depth(uint32_t height,
                              uint32_t width,
                              const float *raw_depth,
                              const uint8_t *mask,
                              const struct GdCamera *camera,
                              float *out_depth);

/*
 Full completion: global optimization, then `steps` DDIM steps from
 noise seeded with `seed`, decoded to depth.

 # Safety
 `pipeline` must be live; `rgb` must hold `3 * height * width` floats,
 the other arrays `height * width` elements.
 */
enum GdStatus gd_complete_depth(const struct GdPipeline *pipeline,
                                uint32_t height,
                                uint32_t width,
                                const float *rgb,
                                const float *raw_depth,
                                const uint8_t *mask,
                                const struct GdCamera *camera,
                                uint32_t steps,
                                uint64_t seed,
                                float *out_depth);

/*
 Depth metrics of `pred` against `gt` over the scoped pixels.

 # Safety
 Arrays must hold `height * width` elements; `out` must be writable.
 */
enum GdStatus gd_compute_metrics(uint32_t height,
                                 uint32_t width,
                                 const float *pred,
                                 const float *gt,
                                 const uint8_t *mask,
                                 enum GdScope scope,
                                 struct GdMetrics *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* GLASSDEPTH_H */
