#ifndef VELOSDF_H
#define VELOSDF_H

/* Generated with cbindgen:0.27.0 */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/*
 Result of every API call. Anything other than `Ok` leaves a description
 in `velosdf_last_error()`.
 */
typedef enum VelosdfStatus {
  /*
   The call succeeded.
   */
  Ok = 0,
  /*
   A pointer was null or a scalar argument out of range.
   */
  InvalidArgument = 1,
  /*
   The checkpoint could not be read or parsed.
   */
  Io = 2,
  /*
   The library rejected the inputs (bad config, mismatched shapes, ...).
   */
  Runtime = 3,
  /*
   A panic was caught at the FFI boundary.
   */
  Panic = 4,
} VelosdfStatus;

/*
 A loaded checkpoint: the networks, their parameters, and the training
 configuration echoed into the checkpoint. Opaque to C.
 */
typedef struct VelosdfModel VelosdfModel;

/*
 Pinhole camera description for rendering.
 */
typedef struct VelosdfCamera {
  double fx;
  double fy;
  double cx;
  double cy;
  size_t width;
  size_t height;
} VelosdfCamera;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Library version as a static NUL-terminated string.
 */
const char *velosdf_version(void);

/*
 Description of the most recent failure on the calling thread, as a
 NUL-terminated string. The pointer stays valid until the next failing
 velosdf call on the same thread; the empty string means "no error yet".
 */
const char *velosdf_last_error(void);

/*
 Loads a checkpoint written by `velosdf train` and hands back an opaque
 model. On success `*out` owns the model and must be released with
 [`velosdf_model_free`]; on failure `*out` is left untouched.

 # Safety
 `path` must point to a NUL-terminated string and `out` to a writable
 `VelosdfModel*` slot; both must stay valid for the duration of the call.
 */
enum VelosdfStatus velosdf_model_load(const char *path, struct VelosdfModel **out);

/*
 Releases a model returned by [`velosdf_model_load`]. A null pointer is
 a no-op.

 # Safety
 `model` must be a pointer previously returned by `velosdf_model_load`
 and not yet freed.
 */
void velosdf_model_free(struct VelosdfModel *model);

/*
 Evaluates the signed distance field at `count` points and time `t`.
 `points_xyz` holds `3 * count` doubles, `out_sdf` receives `count`.

 # Safety
 `model` must be a live model handle; `points_xyz` must be readable for
 `3 * count` doubles and `out_sdf` writable for `count`.
 */
enum VelosdfStatus velosdf_model_query_sdf(const struct VelosdfModel *model,
                                           const double *points_xyz,
                                           size_t count,
                                           double t,
                                           double *out_sdf);

/*
 Writes the relative camera transport `B_{t1 -> t2}` predicted by the
 motion network as a row-major `3x4` `[R | t]` block (12 doubles).
 `frame_dt` is the native frame spacing of the training sequence on the
 normalized time axis (for `T` frames, `2 / (T - 1)`); it sets the Euler
 sub-step granularity.

 # Safety
 `model` must be a live model handle and `out_pose` writable for 12
 doubles.
 */
enum VelosdfStatus velosdf_model_pose_between(const struct VelosdfModel *model,
                                              double t1,
                                              double t2,
                                              double frame_dt,
                                              double *out_pose);

/*
 Renders the field at time `t` from a camera pose given as a row-major
 `3x4` `[R | t]` block (camera-to-query-frame). `out_rgb` receives
 `width * height * 3` doubles, `out_depth` (optional, may be null)
 `width * height` expected ray distances.

 # Safety
 `model` must be a live model handle; `pose_3x4` must be readable for 12
 doubles; `out_rgb` (and `out_depth` when non-null) must be writable for
 the documented lengths.
 */
enum VelosdfStatus velosdf_model_render(const struct VelosdfModel *model,
                                        const double *pose_3x4,
                                        struct VelosdfCamera camera,
                                        double t,
                                        double *out_rgb,
                                        double *out_depth);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* VELOSDF_H */
