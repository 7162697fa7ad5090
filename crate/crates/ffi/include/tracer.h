#ifndef TRACER_H
#define TRACER_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum TracerStatus {
  TRACER_STATUS_OK = 0,
  TRACER_STATUS_NULL_POINTER = 1,
  TRACER_STATUS_INVALID_ARGUMENT = 2,
  TRACER_STATUS_DIMENSION = 3,
  TRACER_STATUS_SCHEMA = 4,
  TRACER_STATUS_IO = 5,
  TRACER_STATUS_NUMERIC = 6,
  TRACER_STATUS_PANIC = 7,
} TracerStatus;

/**
 * A loaded model artifact.
 */
typedef struct TracerModel TracerModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or NULL. The pointer is
 * valid until the next failing call on the same thread.
 */
const char *tracer_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *tracer_version(void);

/**
 * Loads a model artifact from a JSON file.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum TracerStatus tracer_model_load(const char *path, struct TracerModel **out);

/**
 * Parses a model artifact from a JSON string.
 *
 * # Safety
 * `json` must be a NUL-terminated string; `out` must be writable.
 */
enum TracerStatus tracer_model_from_json(const char *json, struct TracerModel **out);

/**
 * Releases a model. NULL is ignored.
 *
 * # Safety
 * `model` must come from a load function and not have been freed.
 */
void tracer_model_free(struct TracerModel *model);

/**
 * Number of `W` and `A` columns the model expects.
 *
 * # Safety
 * `model` must be a live handle; the out pointers must be writable.
 */
enum TracerStatus tracer_model_dims(const struct TracerModel *model, size_t *dim_w, size_t *dim_a);

/**
 * First time point at which the model allows a transition.
 *
 * # Safety
 * `model` must be a live handle; `out` must be writable.
 */
enum TracerStatus tracer_model_transition_time(const struct TracerModel *model, int64_t *out);

/**
 * Risk predictions for `n` records. `w` is `n x dim_w` and `a` is
 * `n x dim_a`, both row-major, in the column order of the artifact.
 * `transition` may be NULL; otherwise it receives the transition
 * probability of each record.
 *
 * # Safety
 * Arrays must hold the stated number of elements; `out` must hold `n`.
 */
enum TracerStatus tracer_model_predict(const struct TracerModel *model,
                                       const double *w,
                                       const double *a,
                                       const int64_t *time,
                                       size_t n,
                                       double *out,
                                       double *transition);

/**
 * Area under the ROC curve of `scores` against 0/1 `labels`.
 *
 * # Safety
 * Both arrays must hold `n` elements; `out` must be writable.
 */
enum TracerStatus tracer_auc(const double *scores, const double *labels, size_t n, double *out);

/**
 * Brier score of probabilities against 0/1 labels.
 *
 * # Safety
 * Both arrays must hold `n` elements; `out` must be writable.
 */
enum TracerStatus tracer_brier(const double *preds, const double *labels, size_t n, double *out);

/**
 * Mean squared error.
 *
 * # Safety
 * Both arrays must hold `n` elements; `out` must be writable.
 */
enum TracerStatus tracer_mse(const double *preds, const double *targets, size_t n, double *out);

/**
 * `1 - SSE / SST`.
 *
 * # Safety
 * Both arrays must hold `n` elements; `out` must be writable.
 */
enum TracerStatus tracer_r2(const double *preds, const double *targets, size_t n, double *out);

/**
 * Standardized mean difference of two continuous summaries.
 *
 * # Safety
 * `out` must be writable.
 */
enum TracerStatus tracer_smd_continuous(double mean_a,
                                        double sd_a,
                                        size_t n_a,
                                        double mean_b,
                                        double sd_b,
                                        size_t n_b,
                                        double *out);

/**
 * Standardized mean difference of two proportions.
 *
 * # Safety
 * `out` must be writable.
 */
enum TracerStatus tracer_smd_binary(double p_a, size_t n_a, double p_b, size_t n_b, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* TRACER_H */
