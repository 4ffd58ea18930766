#ifndef WDSL_H
#define WDSL_H

/* Generated by cbindgen; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum WdslStatus {
  WDSL_STATUS_OK = 0,
  WDSL_STATUS_NULL_POINTER = 1,
  WDSL_STATUS_INVALID_UTF8 = 2,
  WDSL_STATUS_DIMENSION = 3,
  WDSL_STATUS_USAGE = 4,
  WDSL_STATUS_TRAINING = 5,
  WDSL_STATUS_DATA = 6,
  WDSL_STATUS_FORMAT = 7,
  WDSL_STATUS_CONFIG = 8,
  WDSL_STATUS_IO = 9,
  WDSL_STATUS_SERIALIZATION = 10,
  WDSL_STATUS_BUFFER_TOO_SMALL = 11,
  WDSL_STATUS_PANIC = 12,
} WdslStatus;

/**
 * Opaque dropout model.
 */
typedef struct WdslModel WdslModel;

/**
 * One convolution layer for unit counting.
 */
typedef struct WdslConvLayer {
  uint64_t kernel;
  uint64_t c_in;
  uint64_t c_out;
  uint64_t height;
  uint64_t width;
} WdslConvLayer;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *wdsl_version(void);

/**
 * Message of the last failed call on this thread, or NULL. Valid until the
 * next call into the library from this thread.
 */
const char *wdsl_last_error(void);

/**
 * Builds a freshly initialised model from an architecture JSON object.
 *
 * # Safety
 * `arch_json` must be a NUL-terminated string; `out` must be writable.
 */
enum WdslStatus wdsl_model_new(const char *arch_json,
                               double dropout_rate,
                               uint64_t seed,
                               struct WdslModel **out_model);

/**
 * Loads the generator of a training checkpoint.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum WdslStatus wdsl_model_load(const char *path, struct WdslModel **out_model);

/**
 * Releases a model; NULL is ignored.
 *
 * # Safety
 * `model` must come from this library and not be used afterwards.
 */
void wdsl_model_free(struct WdslModel *model);

/**
 * Number of trainable scalars in the model.
 *
 * # Safety
 * `model` must be a live handle.
 */
enum WdslStatus wdsl_model_num_params(const struct WdslModel *model, size_t *out_count);

/**
 * Evaluates `samples` dropout models on `x` (row-major, shape `shape[0..ndim]`)
 * and writes the raw outputs one after another into `out`. When `out_len` is
 * too small nothing is written, `*written` receives the required length and
 * the call returns `WDSL_STATUS_BUFFER_TOO_SMALL`.
 *
 * # Safety
 * Pointers must reference buffers of the stated lengths.
 */
enum WdslStatus wdsl_model_predict_ensemble(const struct WdslModel *model,
                                            const double *x,
                                            const size_t *shape,
                                            size_t ndim,
                                            size_t samples,
                                            uint64_t seed,
                                            double *out_buf,
                                            size_t out_len,
                                            size_t *written);

/**
 * Totals of patch-level and weight-level dropout units over `n` conv layers.
 *
 * # Safety
 * `layers` must hold `n` entries.
 */
enum WdslStatus wdsl_count_units(const struct WdslConvLayer *layers,
                                 size_t n,
                                 uint64_t *out_patch,
                                 uint64_t *out_weight);

/**
 * Mean IoU of `n` predicted labels against ground truth. A negative
 * `ignore_label` disables ignoring.
 *
 * # Safety
 * `pred` and `gt` must hold `n` entries.
 */
enum WdslStatus wdsl_miou(const uint32_t *pred,
                          const uint32_t *gt,
                          size_t n,
                          size_t num_classes,
                          int64_t ignore_label,
                          double *out_value);

/**
 * Oracle top-k%: `scores` is `inputs×samples` row-major; the best
 * ⌈k·samples⌉ scores of each input are averaged, then averaged over inputs.
 *
 * # Safety
 * `scores` must hold `inputs·samples` entries.
 */
enum WdslStatus wdsl_top_k_percent(const double *scores,
                                   size_t inputs,
                                   size_t samples,
                                   double k,
                                   bool higher_is_better,
                                   double *out_value);

/**
 * Conditional log-likelihood loss of a uniform mixture. `probs` is
 * `samples×classes×positions`; `labels` has `positions` entries.
 *
 * # Safety
 * Buffers must hold the stated number of entries.
 */
enum WdslStatus wdsl_mixture_cll(const double *probs,
                                 size_t samples,
                                 size_t classes,
                                 size_t positions,
                                 const uint32_t *labels,
                                 double *out_value);

/**
 * Synthetic log-likelihood of a discriminator logit.
 */
double wdsl_synthetic_ll(double logit);

/**
 * Expected calibration error over `classes×positions` mean probabilities.
 *
 * # Safety
 * `probs` must hold `classes·positions` entries and `labels` `positions`.
 */
enum WdslStatus wdsl_ece(const double *probs,
                         size_t classes,
                         size_t positions,
                         const uint32_t *labels,
                         size_t n_bins,
                         double *out_value);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* WDSL_H */
