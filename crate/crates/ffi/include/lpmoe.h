#ifndef LPMOE_H
#define LPMOE_H

#include <stdint.h>
#include <stddef.h>

// Result code of every fallible call.
typedef enum LpmoeStatus {
  LPMOE_STATUS_OK = 0,
  LPMOE_STATUS_NULL_POINTER = 1,
  LPMOE_STATUS_INVALID_ARGUMENT = 2,
  LPMOE_STATUS_IO = 3,
  LPMOE_STATUS_CHECKPOINT = 4,
  LPMOE_STATUS_SHAPE = 5,
  LPMOE_STATUS_INTERNAL = 6,
} LpmoeStatus;

// A model and its parameters.
typedef struct LpmoeModel LpmoeModel;

// Per-image scores; `empty_gt` is 1 when the mask has no foreground, in
// which case `f_w` is 0.
typedef struct LpmoeMetrics {
  double iou;
  double dice;
  double f_w;
  double mae;
  int32_t empty_gt;
} LpmoeMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *lpmoe_version(void);

// Message of the last failed call on this thread, or NULL after a success.
// The pointer stays valid until the next call into the library on this thread.
const char *lpmoe_last_error(void);

// Loads a checkpoint file.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum LpmoeStatus lpmoe_model_load(const char *path, struct LpmoeModel **out);

// Builds an untrained model with the default configuration.
//
// # Safety
// `out` must be a valid pointer.
enum LpmoeStatus lpmoe_model_new(uint64_t seed, struct LpmoeModel **out);

// Releases a model. NULL is ignored.
//
// # Safety
// `model` must come from this library and not be used afterwards.
void lpmoe_model_free(struct LpmoeModel *model);

// Training resolution of the model.
//
// # Safety
// Both pointers must be valid.
enum LpmoeStatus lpmoe_model_image_size(const struct LpmoeModel *model, uint32_t *out);

// Trainable and frozen scalar counts.
//
// # Safety
// All pointers must be valid.
enum LpmoeStatus lpmoe_model_param_counts(const struct LpmoeModel *model,
                                          uint64_t *trainable,
                                          uint64_t *frozen);

// Foreground confidence for a planar RGB image.
//
// `rgb` holds `3 * height * width` values in `[0, 1]`, channel-major.
// `out` receives `height * width` confidences quantized to 8-bit levels.
// Sizes that are not multiples of 32 are reflection-padded internally.
//
// # Safety
// `rgb` and `out` must point to buffers of the stated lengths.
enum LpmoeStatus lpmoe_infer(const struct LpmoeModel *model,
                             const double *rgb,
                             uint32_t height,
                             uint32_t width,
                             double *out);

// Scores a confidence map against a binary mask, both `height * width`.
//
// # Safety
// `pred` and `gt` must hold `height * width` values; `out` must be valid.
enum LpmoeStatus lpmoe_metrics(const double *pred,
                               const double *gt,
                               uint32_t height,
                               uint32_t width,
                               struct LpmoeMetrics *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* LPMOE_H */
