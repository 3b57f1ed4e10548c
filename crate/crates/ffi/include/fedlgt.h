#ifndef FEDLGT_H
#define FEDLGT_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result code of every fallible call.
typedef enum FlgtStatus {
  FLGT_STATUS_OK = 0,
  FLGT_STATUS_NULL_POINTER = 1,
  FLGT_STATUS_INVALID_ARGUMENT = 2,
  FLGT_STATUS_IO = 3,
  FLGT_STATUS_FORMAT = 4,
  FLGT_STATUS_COMPUTE = 5,
  FLGT_STATUS_PANIC = 6,
} FlgtStatus;

// A trained model: architecture, parameters and frozen label inputs.
typedef struct FlgtModel FlgtModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or NULL after a
// successful call. Valid until the next fedlgt call on the same thread.
const char *flgt_last_error_message(void);

// Library version as a static NUL-terminated string.
const char *flgt_version(void);

// Loads a checkpoint written by `fedlgt train`. On success `*out` owns a
// new handle; on failure it is set to NULL.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum FlgtStatus flgt_model_load(const char *path, struct FlgtModel **out);

// Releases a handle from [`flgt_model_load`]. NULL is ignored.
//
// # Safety
// `model` must come from `flgt_model_load` and not be freed twice.
void flgt_model_free(struct FlgtModel *model);

// Number of classes C, or 0 for a NULL handle.
//
// # Safety
// `model` must be NULL or a live handle.
size_t flgt_model_num_classes(const struct FlgtModel *model);

// Input feature width, or 0 for a NULL handle.
//
// # Safety
// `model` must be NULL or a live handle.
size_t flgt_model_feature_dim(const struct FlgtModel *model);

// Class probabilities for one sample, all label states unknown.
// `features_len` must equal the feature width and `out_len` the class count.
//
// # Safety
// Pointers must be valid for the given lengths.
enum FlgtStatus flgt_model_predict(const struct FlgtModel *model,
                                   const double *features,
                                   size_t features_len,
                                   double *out_probs,
                                   size_t out_len);

// Client-aware calibration of label-state tokens: classes with
// `tau - epsilon <= p <= tau + epsilon` become unknown (-1), the rest keep
// their base token. `out_tokens` may alias `base_tokens`.
//
// # Safety
// Pointers must be valid for `len` elements.
enum FlgtStatus flgt_calibrate(const double *probs,
                               const int8_t *base_tokens,
                               size_t len,
                               double tau,
                               double epsilon,
                               int8_t *out_tokens);

// The eight evaluation metrics for `n x c` row-major probabilities and
// 0/1 targets, written to `out` in the order C-AP, C-P, C-R, C-F1, O-AP,
// O-P, O-R, O-F1 (each in [0, 1]).
//
// # Safety
// `probs` and `targets` must hold `n * c` values and `out` 8.
enum FlgtStatus flgt_metrics(const double *probs,
                             const double *targets,
                             size_t n,
                             size_t c,
                             double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FEDLGT_H */
