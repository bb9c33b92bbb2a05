#ifndef SFM360_H
#define SFM360_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes returned by every fallible function.
 */
typedef enum sfm360_status {
  SFM360_OK = 0,
  SFM360_INVALID_ARGUMENT = 1,
  SFM360_IO_ERROR = 2,
  SFM360_PARSE_ERROR = 3,
  SFM360_PIPELINE_ERROR = 4,
  SFM360_BUFFER_TOO_SMALL = 5,
  SFM360_PANIC = 6,
} sfm360_status;

/**
 * Opaque reconstruction handle.
 */
typedef struct sfm360_reconstruction sfm360_reconstruction;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version string; static storage.
 */
const char *sfm360_version(void);

/**
 * Message for the most recent failure on this thread. Valid until the
 * next failing call on the same thread.
 */
const char *sfm360_last_error(void);

/**
 * Runs the full pipeline on a matches or tracks file (detected by its
 * header line) and returns an opaque reconstruction handle in `out`.
 *
 * `config_path` may be null for defaults. The caller owns the handle.
 *
 * # Safety
 * `input_path` (and `config_path` when non-null) must be valid
 * NUL-terminated strings; `out` must be a valid pointer.
 */
enum sfm360_status sfm360_reconstruct_file(const char *input_path,
                                           const char *config_path,
                                           uint64_t seed,
                                           struct sfm360_reconstruction **out);

/**
 * Number of registered images.
 *
 * # Safety
 * `r` must be a live handle from `sfm360_reconstruct_file`.
 */
uintptr_t sfm360_registered_count(const struct sfm360_reconstruction *r);

/**
 * Number of triangulated points.
 *
 * # Safety
 * `r` must be a live handle from `sfm360_reconstruct_file`.
 */
uintptr_t sfm360_point_count(const struct sfm360_reconstruction *r);

/**
 * Name of the `index`-th registered image (registration order), copied
 * into `buf`.
 *
 * # Safety
 * `r` must be a live handle; `buf` must point to `cap` writable bytes.
 */
enum sfm360_status sfm360_image_name(const struct sfm360_reconstruction *r,
                                     uintptr_t index,
                                     char *buf,
                                     uintptr_t cap);

/**
 * World-to-camera pose of a registered image as
 * `[qw, qx, qy, qz, tx, ty, tz]`.
 *
 * # Safety
 * `r` must be a live handle; `image` a valid C string; `pose_qt` an array
 * of at least 7 doubles.
 */
enum sfm360_status sfm360_image_pose(const struct sfm360_reconstruction *r,
                                     const char *image,
                                     double *pose_qt);

/**
 * Writes the registered poses in the `pose <cam> qw qx qy qz tx ty tz`
 * text format.
 *
 * # Safety
 * `r` must be a live handle; `path` a valid C string.
 */
enum sfm360_status sfm360_write_pose_file(const struct sfm360_reconstruction *r, const char *path);

/**
 * Writes the triangulated points as ASCII PLY.
 *
 * # Safety
 * `r` must be a live handle; `path` a valid C string.
 */
enum sfm360_status sfm360_write_ply_file(const struct sfm360_reconstruction *r, const char *path);

/**
 * Releases a reconstruction handle. Null is a no-op.
 *
 * # Safety
 * `r` must be a handle from `sfm360_reconstruct_file`, released once.
 */
void sfm360_reconstruction_free(struct sfm360_reconstruction *r);

/**
 * Evaluates estimated poses against ground truth and copies the
 * `key = value` report into `buf`.
 *
 * # Safety
 * Paths must be valid C strings; `buf` must point to `cap` writable bytes.
 */
enum sfm360_status sfm360_evaluate_files(const char *est_path,
                                         const char *gt_path,
                                         char *buf,
                                         uintptr_t cap);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SFM360_H */
