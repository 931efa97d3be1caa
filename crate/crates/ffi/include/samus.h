#ifndef SAMUS_H
#define SAMUS_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result code of every fallible call.
typedef enum SamusStatus {
  SAMUS_STATUS_OK = 0,
  SAMUS_STATUS_NULL_POINTER = 1,
  SAMUS_STATUS_INVALID_ARGUMENT = 2,
  SAMUS_STATUS_IO = 3,
  SAMUS_STATUS_CHECKPOINT = 4,
  SAMUS_STATUS_SHAPE = 5,
  SAMUS_STATUS_UNKNOWN_TASK = 6,
  SAMUS_STATUS_UNDEFINED_METRIC = 7,
  SAMUS_STATUS_INTERNAL = 8,
} SamusStatus;

// Opaque model handle.
typedef struct SamusModel SamusModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread; empty after a success.
// The pointer stays valid until the next call on the same thread.
const char *samus_last_error(void);

// Freshly initialized desk-scale model with every adaptation component.
enum SamusStatus samus_model_new_default(uint64_t seed, struct SamusModel **out);

// Loads a checkpoint written by the `samus` CLI.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a writable pointer.
enum SamusStatus samus_model_load(const char *path, struct SamusModel **out);

// Releases a handle. Null is ignored.
//
// # Safety
// `model` must come from this library and not be used afterwards.
void samus_model_free(struct SamusModel *model);

// Side length `S` of the square input images.
//
// # Safety
// `model` must be a live handle and `out` writable.
enum SamusStatus samus_model_input_size(const struct SamusModel *model, size_t *out);

// Number of task-token banks available to `samus_predict_auto`.
//
// # Safety
// `model` must be a live handle and `out` writable.
enum SamusStatus samus_model_task_count(const struct SamusModel *model, size_t *out);

// Segments one row-major `S×S` image (values in `[0, 1]`) from a
// foreground point in pixel coordinates. Writes `S×S` bytes of 0/1.
//
// # Safety
// `image` must hold `image_len` floats and `mask_out` `mask_len` bytes.
enum SamusStatus samus_predict_point(const struct SamusModel *model,
                                     const float *image,
                                     size_t image_len,
                                     double x,
                                     double y,
                                     uint8_t *mask_out,
                                     size_t mask_len);

// Segments one image with prompts generated for task bank `task`.
//
// # Safety
// As for `samus_predict_point`.
enum SamusStatus samus_predict_auto(const struct SamusModel *model,
                                    const float *image,
                                    size_t image_len,
                                    size_t task,
                                    uint8_t *mask_out,
                                    size_t mask_len);

// Dice coefficient in percent of two `w×h` byte masks (nonzero = foreground).
//
// # Safety
// `pred` and `gt` must hold `w*h` bytes; `out` must be writable.
enum SamusStatus samus_dice(const uint8_t *pred,
                            const uint8_t *gt,
                            size_t w,
                            size_t h,
                            double *out);

// Symmetric Hausdorff distance in pixels; the 95th-percentile variant when
// `percentile95` is nonzero. Undefined (status `UNDEFINED_METRIC`) when
// either mask is empty.
//
// # Safety
// As for `samus_dice`.
enum SamusStatus samus_hausdorff(const uint8_t *pred,
                                 const uint8_t *gt,
                                 size_t w,
                                 size_t h,
                                 int32_t percentile95,
                                 double *out);

// Library version, static storage.
const char *samus_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SAMUS_H */
