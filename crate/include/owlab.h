#ifndef OWLAB_H
#define OWLAB_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every call.
 */
typedef enum {
  OWLAB_STATUS_OK = 0,
  OWLAB_STATUS_INVALID_ARGUMENT = 1,
  OWLAB_STATUS_NUMERIC_DOMAIN = 2,
  OWLAB_STATUS_DIVERGENCE = 3,
  OWLAB_STATUS_UNDEFINED_METRIC = 4,
  OWLAB_STATUS_CONFIG = 5,
  OWLAB_STATUS_PARSE = 6,
  OWLAB_STATUS_IO = 7,
  OWLAB_STATUS_NULL_POINTER = 8,
  /**
   * A run failed; any partial output was still written.
   */
  OWLAB_STATUS_PARTIAL_RUN = 9,
  OWLAB_STATUS_PANIC = 10,
} OwlabStatus;

/**
 * Per-class FIFO of recent predictions used by the inductive loss.
 */
typedef struct OwlabBaseQueue OwlabBaseQueue;

/**
 * Accumulates detections and ground truth for metric computation.
 */
typedef struct OwlabEvaluator OwlabEvaluator;

/**
 * Experiment configuration built from `key=value` text.
 */
typedef struct OwlabExperiment OwlabExperiment;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. Valid until the
 * next failing call on the same thread; do not free.
 */
const char *owlab_last_error(void);

/**
 * Library version as a static string.
 */
const char *owlab_version(void);

/**
 * Cross-entropy `-log probs[target]` of a probability vector of length `k`.
 *
 * # Safety
 * `probs` must point to `k` values and `out` must be writable.
 */
OwlabStatus owlab_ce_multiclass(const double *probs, size_t k, size_t target, double *out);

/**
 * Softmax focal loss with a uniform class weight `alpha`.
 *
 * # Safety
 * `probs` must point to `k` values and `out` must be writable.
 */
OwlabStatus owlab_focal_softmax(const double *probs,
                                size_t k,
                                size_t target,
                                double gamma,
                                double alpha,
                                double *out);

/**
 * Focal loss scaled by the rarity factor of `target`; `counts[c]` is the
 * training instance count of class `c`.
 *
 * # Safety
 * `probs` and `counts` must point to `k` values and `out` must be writable.
 */
OwlabStatus owlab_balanced_loss(const double *probs,
                                const uint64_t *counts,
                                size_t k,
                                size_t target,
                                double gamma,
                                double alpha,
                                double *out);

/**
 * Summed smooth-L1 over `n` coordinates.
 *
 * # Safety
 * `pred` and `target` must point to `n` values and `out` must be writable.
 */
OwlabStatus owlab_smooth_l1(const double *pred, const double *target, size_t n, double *out);

/**
 * Softmax over classes with `seen[c] != 0`; unseen classes get probability
 * below 1e-12.
 *
 * # Safety
 * `logits` and `seen` must point to `k` values and `out` to `k` writable
 * values.
 */
OwlabStatus owlab_masked_softmax(const double *logits, const uint8_t *seen, size_t k, double *out);

/**
 * Energy score `-logsumexp(logits)` over `n` seen-class logits.
 *
 * # Safety
 * `logits` must point to `n` values and `out` must be writable.
 */
OwlabStatus owlab_energy(const double *logits, size_t n, double *out);

/**
 * Intersection over union of two `[x1, y1, x2, y2]` boxes.
 *
 * # Safety
 * `a` and `b` must point to four values and `out` must be writable.
 */
OwlabStatus owlab_iou(const double *a, const double *b, double *out);

/**
 * New empty evaluator; never null.
 */
OwlabEvaluator *owlab_evaluator_new(void);

/**
 * Adds a detection. `class_id < 0` marks an unknown-object detection.
 *
 * # Safety
 * `h` must be a live evaluator and `bbox` must point to four values.
 */
OwlabStatus owlab_evaluator_add_detection(OwlabEvaluator *h,
                                          uint64_t image_id,
                                          const double *bbox_xyxy,
                                          int64_t class_id,
                                          double score);

/**
 * # Safety
 * `h` must be a live evaluator and `bbox` must point to four values.
 */
OwlabStatus owlab_evaluator_add_ground_truth(OwlabEvaluator *h,
                                             uint64_t image_id,
                                             const double *bbox_xyxy,
                                             uint64_t class_id);

/**
 * mAP@0.5 over the `n` given classes. Fails with `UndefinedMetric` when
 * none of them has ground truth.
 *
 * # Safety
 * `h` must be a live evaluator, `classes` must point to `n` values and
 * `out` must be writable.
 */
OwlabStatus owlab_evaluator_map50(OwlabEvaluator *h,
                                  const uint64_t *classes,
                                  size_t n,
                                  double *out);

/**
 * Every open-world metric as a JSON document in `*out_json`; release it
 * with [`owlab_string_free`]. Classes in neither set count as unknown.
 *
 * # Safety
 * `h` must be a live evaluator, the class arrays must hold `n_prev` and
 * `n_cur` values and `out_json` must be writable.
 */
OwlabStatus owlab_evaluator_evaluate_json(OwlabEvaluator *h,
                                          const uint64_t *previously_known,
                                          size_t n_prev,
                                          const uint64_t *current_known,
                                          size_t n_cur,
                                          char **out_json);

/**
 * # Safety
 * `h` must be null or a handle from [`owlab_evaluator_new`] not yet freed.
 */
void owlab_evaluator_free(OwlabEvaluator *h);

/**
 * New queue holding at most `capacity` entries per class; null when
 * `capacity` is 0.
 */
OwlabBaseQueue *owlab_base_queue_new(size_t capacity);

/**
 * Appends a prediction `(probs, boxes)` with its ground truth to the queue
 * of `target_class`, evicting that class's oldest entry when full.
 *
 * # Safety
 * `h` must be a live queue, `probs` must point to `k` values and both box
 * pointers to four values.
 */
OwlabStatus owlab_base_queue_push(OwlabBaseQueue *h,
                                  const double *probs,
                                  size_t k,
                                  const double *boxes,
                                  size_t target_class,
                                  const double *target_box);

/**
 * Number of entries stored for `class`.
 *
 * # Safety
 * `h` must be a live queue and `out` must be writable.
 */
OwlabStatus owlab_base_queue_len(OwlabBaseQueue *h, size_t class_, size_t *out);

/**
 * Inductive loss over the queue with balanced-loss parameters `gamma`,
 * uniform `alpha` and per-class training counts `counts[0..k]`.
 *
 * # Safety
 * `h` must be a live queue, `counts` must point to `k` values and `out`
 * must be writable.
 */
OwlabStatus owlab_base_queue_inductive_loss(OwlabBaseQueue *h,
                                            const uint64_t *counts,
                                            size_t k,
                                            double gamma,
                                            double alpha,
                                            double *out);

/**
 * # Safety
 * `h` must be null or a handle from [`owlab_base_queue_new`] not yet freed.
 */
void owlab_base_queue_free(OwlabBaseQueue *h);

/**
 * Parses a configuration (null or empty text gives the defaults). Returns
 * null on error; see [`owlab_last_error`].
 *
 * # Safety
 * `config_kv` must be null or a NUL-terminated string.
 */
OwlabExperiment *owlab_experiment_new(const char *config_kv);

/**
 * Applies one `key=value` setting.
 *
 * # Safety
 * `h` must be a live experiment handle and both strings NUL-terminated.
 */
OwlabStatus owlab_experiment_set(OwlabExperiment *h, const char *key, const char *value);

/**
 * sha256 of the configuration in `*out` (64 hex characters); release with
 * [`owlab_string_free`].
 *
 * # Safety
 * `h` must be a live experiment handle and `out` writable.
 */
OwlabStatus owlab_experiment_config_hash(OwlabExperiment *h, char **out);

/**
 * Runs the experiment and stores the report as JSON in `*out_json`. When
 * some runs fail the status is `PartialRun` and `*out_json` still receives
 * the partial report. Release the string with [`owlab_string_free`].
 *
 * # Safety
 * `h` must be a live experiment handle and `out_json` writable.
 */
OwlabStatus owlab_experiment_run_json(OwlabExperiment *h, char **out_json);

/**
 * # Safety
 * `h` must be null or a handle from [`owlab_experiment_new`] not yet freed.
 */
void owlab_experiment_free(OwlabExperiment *h);

/**
 * Releases a string returned by this library. Null is ignored.
 *
 * # Safety
 * `s` must be null or a string from this library not yet freed.
 */
void owlab_string_free(char *s);

/**
 * Maximum relative error per check of the finite-difference suite, written
 * to `out_max[0..11]` in the order of `owlab::gradcheck::CHECKS`.
 * `*out_passed` is 1 when every check is within tolerance.
 *
 * # Safety
 * `out_max` must point to 11 writable values and `out_passed` be writable.
 */
OwlabStatus owlab_gradcheck(size_t samples, uint64_t seed, double *out_max, uint8_t *out_passed);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* OWLAB_H */
