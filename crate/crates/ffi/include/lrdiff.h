#ifndef LRDIFF_H
#define LRDIFF_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result code of every fallible call.
typedef enum LrdiffStatus {
  LRDIFF_STATUS_OK = 0,
  // A required pointer argument was null.
  LRDIFF_STATUS_NULL_ARGUMENT = 1,
  // A string was not UTF-8 or a numeric argument was out of range.
  LRDIFF_STATUS_INVALID_ARGUMENT = 2,
  LRDIFF_STATUS_CONFIG = 3,
  LRDIFF_STATUS_DIMENSION = 4,
  LRDIFF_STATUS_SCHEDULE = 5,
  LRDIFF_STATUS_CONDITION = 6,
  LRDIFF_STATUS_CAPABILITY = 7,
  LRDIFF_STATUS_GUIDANCE = 8,
  LRDIFF_STATUS_LAYOUT = 9,
  LRDIFF_STATUS_FUSION = 10,
  LRDIFF_STATUS_TRAINING = 11,
  LRDIFF_STATUS_USAGE = 12,
  // Malformed scene, image or checkpoint file.
  LRDIFF_STATUS_PARSE = 13,
  LRDIFF_STATUS_IO = 14,
  LRDIFF_STATUS_PANIC = 15,
} LrdiffStatus;

// Score estimator handle.
typedef struct LrdiffEstimator LrdiffEstimator;

// Image or latent of shape `height × width × channels`, channel innermost.
typedef struct LrdiffGrid LrdiffGrid;

// Parsed scene handle.
typedef struct LrdiffScene LrdiffScene;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *lrdiff_version(void);

// Message of the last failure on this thread, or null. Valid until the next
// failing call on the same thread.
const char *lrdiff_last_error(void);

// Exact score estimator over the built-in 12×12 template domain.
//
// # Safety
// `out` must be valid for writes.
enum LrdiffStatus lrdiff_estimator_new_analytic(struct LrdiffEstimator **out);

// Toy network estimator from a checkpoint file.
//
// # Safety
// `path` must be a NUL-terminated string and `out` valid for writes.
enum LrdiffStatus lrdiff_estimator_load_toy(const char *path, struct LrdiffEstimator **out);

// # Safety
// `est` must be null or a handle from this library, not yet freed.
void lrdiff_estimator_free(struct LrdiffEstimator *est);

// Parses and validates a scene file against the estimator's vocabulary.
//
// # Safety
// `path` must be a NUL-terminated string, `est` a live handle and `out`
// valid for writes.
enum LrdiffStatus lrdiff_scene_load(const char *path,
                                    const struct LrdiffEstimator *est,
                                    struct LrdiffScene **out);

// # Safety
// `scene` must be a live handle.
enum LrdiffStatus lrdiff_scene_set_seed(struct LrdiffScene *scene, uint64_t seed);

// Sets the layered/general boundary; range-checked at render time.
//
// # Safety
// `scene` must be a live handle.
enum LrdiffStatus lrdiff_scene_set_t0(struct LrdiffScene *scene, size_t t0);

// # Safety
// `scene` must be a live handle.
enum LrdiffStatus lrdiff_scene_set_gamma(struct LrdiffScene *scene, double gamma);

// Number of layers including the background layer.
//
// # Safety
// `scene` must be a live handle and `out` valid for writes.
enum LrdiffStatus lrdiff_scene_layer_count(const struct LrdiffScene *scene, size_t *out);

// # Safety
// `scene` must be null or a handle from this library, not yet freed.
void lrdiff_scene_free(struct LrdiffScene *scene);

// Renders the scene from its seed.
//
// # Safety
// `scene` and `est` must be live handles and `out` valid for writes.
enum LrdiffStatus lrdiff_render(const struct LrdiffScene *scene,
                                const struct LrdiffEstimator *est,
                                struct LrdiffGrid **out);

// Inverts `source` under `source_caption` (words separated by commas or
// spaces) and renders the scene from the inverted latent.
//
// # Safety
// Handles must be live, `source_caption` NUL-terminated and `out` valid for
// writes.
enum LrdiffStatus lrdiff_edit(const struct LrdiffScene *scene,
                              const struct LrdiffEstimator *est,
                              const struct LrdiffGrid *source,
                              const char *source_caption,
                              struct LrdiffGrid **out);

// Copies `height * width * channels` values from `data` into a new grid.
//
// # Safety
// `data` must point to that many readable doubles and `out` be valid for
// writes.
enum LrdiffStatus lrdiff_grid_new(size_t height,
                                  size_t width,
                                  size_t channels,
                                  const double *data,
                                  struct LrdiffGrid **out);

// Reads a binary PPM (P6) or PGM (P5) image.
//
// # Safety
// `path` must be NUL-terminated and `out` valid for writes.
enum LrdiffStatus lrdiff_grid_read(const char *path, struct LrdiffGrid **out);

// Writes the grid as an 8-bit PPM (3 channels) or PGM (1 channel), clamping
// values to `[0, 1]`.
//
// # Safety
// `grid` must be a live handle and `path` NUL-terminated.
enum LrdiffStatus lrdiff_grid_write(const struct LrdiffGrid *grid, const char *path);

// # Safety
// `grid` must be a live handle; each output pointer may be null.
enum LrdiffStatus lrdiff_grid_shape(const struct LrdiffGrid *grid,
                                    size_t *height,
                                    size_t *width,
                                    size_t *channels);

// Row-major values, channel innermost; valid while the grid lives.
// Null for a null handle.
//
// # Safety
// `grid` must be null or a live handle.
const double *lrdiff_grid_data(const struct LrdiffGrid *grid);

// # Safety
// `grid` must be null or a handle from this library, not yet freed.
void lrdiff_grid_free(struct LrdiffGrid *grid);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* LRDIFF_H */
