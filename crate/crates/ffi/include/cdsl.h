#ifndef CDSL_H
#define CDSL_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum CdslStatus {
  CDSL_STATUS_OK = 0,
  CDSL_STATUS_NULL_ARGUMENT = 1,
  CDSL_STATUS_INVALID_ARGUMENT = 2,
  CDSL_STATUS_CONFIG = 3,
  CDSL_STATUS_DATA = 4,
  CDSL_STATUS_SHAPE = 5,
  CDSL_STATUS_NUMERIC = 6,
  CDSL_STATUS_IO = 7,
  CDSL_STATUS_CHECKPOINT = 8,
  CDSL_STATUS_PANIC = 9,
} CdslStatus;

/**
 * A loaded single network or cascade.
 */
typedef struct CdslModel CdslModel;

/**
 * Per-image overlap scores of a binary prediction.
 */
typedef struct CdslMetrics {
  double dice;
  double iou_fg;
  double iou_bg;
  double mean_iou;
} CdslMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or null. Valid until the next call.
 */
const char *cdsl_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *cdsl_version(void);

/**
 * Loads `model.json` or `cascade.json` into `*out`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum CdslStatus cdsl_model_load(const char *path, struct CdslModel **out);

/**
 * Releases a model. Null is ignored.
 *
 * # Safety
 * `model` must come from [`cdsl_model_load`] and not be used afterwards.
 */
void cdsl_model_free(struct CdslModel *model);

/**
 * Input height and width the model expects.
 *
 * # Safety
 * All pointers must be valid.
 */
enum CdslStatus cdsl_model_input_size(const struct CdslModel *model, size_t *height, size_t *width);

/**
 * 1 for a cascade, 0 for a single network.
 *
 * # Safety
 * `model` must be a valid handle.
 */
int32_t cdsl_model_is_cascade(const struct CdslModel *model);

/**
 * Foreground probabilities for a row-major `height × width` grayscale image in [0,1].
 *
 * # Safety
 * `image` and `probs` must each point to `height * width` floats.
 */
enum CdslStatus cdsl_model_predict(const struct CdslModel *model,
                                   const float *image,
                                   size_t height,
                                   size_t width,
                                   float *probs);

/**
 * Dice and IoU of a binary prediction against a binary ground truth (nonzero = foreground).
 *
 * # Safety
 * `pred` and `truth` must each point to `len` bytes; `out` must be valid.
 */
enum CdslStatus cdsl_metrics(const uint8_t *pred,
                             const uint8_t *truth,
                             size_t len,
                             struct CdslMetrics *out);

/**
 * BCE, minus soft Dice when `use_dice` is nonzero, of probabilities against 0/1 targets.
 *
 * # Safety
 * `probs` and `targets` must each point to `len` doubles; `out` must be valid.
 */
enum CdslStatus cdsl_combined_loss(const double *probs,
                                   const double *targets,
                                   size_t len,
                                   int32_t use_dice,
                                   double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CDSL_H */
