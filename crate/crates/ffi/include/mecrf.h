#ifndef MECRF_H
#define MECRF_H

/* Generated by cbindgen; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call.
 */
typedef enum MecrfStatus {
  MECRF_STATUS_OK = 0,
  MECRF_STATUS_NULL_POINTER = 1,
  MECRF_STATUS_INVALID_UTF8 = 2,
  MECRF_STATUS_NOT_FOUND = 3,
  MECRF_STATUS_CONFIG = 4,
  MECRF_STATUS_PARSE = 5,
  MECRF_STATUS_INTEGRITY = 6,
  MECRF_STATUS_INCOMPATIBLE_VERSION = 7,
  MECRF_STATUS_LABEL_MISMATCH = 8,
  MECRF_STATUS_NUMERICAL = 9,
  MECRF_STATUS_INVALID_INPUT = 10,
  MECRF_STATUS_IO = 11,
  MECRF_STATUS_PANIC = 12,
  MECRF_STATUS_OTHER = 13,
} MecrfStatus;

/**
 * Opaque trained model.
 */
typedef struct MecrfModel MecrfModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. The pointer is
 * valid until the next call into this library on the same thread.
 */
const char *mecrf_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *mecrf_version(void);

/**
 * Loads a checkpoint. On success `*out` owns a new handle.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum MecrfStatus mecrf_model_load(const char *path, struct MecrfModel **out);

/**
 * Releases a handle; null is ignored.
 *
 * # Safety
 * `model` must come from [`mecrf_model_load`] and not be used afterwards.
 */
void mecrf_model_free(struct MecrfModel *model);

/**
 * Number of output labels, or 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t mecrf_model_num_labels(const struct MecrfModel *model);

/**
 * Label name by index, or null when out of range. Owned by the handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
const char *mecrf_model_label(const struct MecrfModel *model, size_t index);

/**
 * Whether the model tags token sequences (1) or forum threads (0).
 *
 * # Safety
 * `model` must be null or a live handle.
 */
bool mecrf_model_is_token_tagger(const struct MecrfModel *model);

/**
 * Tags one sentence. Writes `len` label indices to `out_labels`.
 *
 * # Safety
 * `tokens` must point to `len` NUL-terminated strings and `out_labels` to
 * room for `len` values.
 */
enum MecrfStatus mecrf_model_tag(const struct MecrfModel *model,
                                 const char *const *tokens,
                                 size_t len,
                                 size_t *out_labels);

/**
 * Log partition function of a linear-chain CRF. `emissions` is `len x
 * num_labels`, `transitions` is `(num_labels + 2)^2` with start and stop
 * states last, both row-major.
 *
 * # Safety
 * The arrays must have the stated sizes; `out` must be valid.
 */
enum MecrfStatus mecrf_crf_log_partition(const double *emissions,
                                         size_t len,
                                         size_t num_labels,
                                         const double *transitions,
                                         double *out);

/**
 * Highest-scoring label path (ties toward lower indices) and its score.
 *
 * # Safety
 * As for [`mecrf_crf_log_partition`]; `out_path` must have room for `len`
 * values. `out_score` may be null.
 */
enum MecrfStatus mecrf_crf_viterbi(const double *emissions,
                                   size_t len,
                                   size_t num_labels,
                                   const double *transitions,
                                   size_t *out_path,
                                   double *out_score);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MECRF_H */
