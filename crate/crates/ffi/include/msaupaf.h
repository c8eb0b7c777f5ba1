#ifndef MSAUPAF_H
#define MSAUPAF_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call.
 */
typedef enum MsauStatus {
  MSAU_STATUS_OK = 0,
  MSAU_STATUS_NULL_ARGUMENT = 1,
  MSAU_STATUS_INVALID_UTF8 = 2,
  MSAU_STATUS_PARSE = 3,
  MSAU_STATUS_VALIDATION = 4,
  MSAU_STATUS_CONFIG = 5,
  MSAU_STATUS_IO = 6,
  MSAU_STATUS_RUNTIME = 7,
  MSAU_STATUS_PANIC = 8,
} MsauStatus;

/**
 * Opaque handle to an annotated form.
 */
typedef struct MsauForm MsauForm;

/**
 * Opaque handle to a trained model.
 */
typedef struct MsauModel MsauModel;

/**
 * Scores of one evaluation.
 */
typedef struct MsauScores {
  double labeling_precision;
  double labeling_recall;
  double labeling_f1;
  double linking_precision;
  double linking_recall;
  double linking_f1;
} MsauScores;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *msau_version(void);

/**
 * Message of the last failed call on this thread, or NULL. The pointer
 * stays valid until the next call into the library on the same thread.
 */
const char *msau_last_error(void);

/**
 * # Safety
 * `s` must be NULL or a string returned by this library and not yet freed.
 */
void msau_string_free(char *s);

/**
 * Parse a FUNSD-schema annotation held in `json` (`len` bytes).
 *
 * # Safety
 * `json` must point to `len` readable bytes and `out` to writable storage.
 */
enum MsauStatus msau_form_parse(const uint8_t *json, size_t len, struct MsauForm **out);

/**
 * # Safety
 * `form` must be NULL or a handle from `msau_form_parse` not yet freed.
 */
void msau_form_free(struct MsauForm *form);

/**
 * Number of entities and links of a form. Either output may be NULL.
 *
 * # Safety
 * `form` must be a live handle; non-NULL outputs must be writable.
 */
enum MsauStatus msau_form_counts(const struct MsauForm *form, size_t *n_entities, size_t *n_links);

/**
 * Serialize a form back to FUNSD-schema JSON.
 *
 * # Safety
 * `form` must be a live handle and `out` writable.
 */
enum MsauStatus msau_form_to_json(const struct MsauForm *form, char **out);

/**
 * Replace the links of `form` with the distance-based heuristic.
 * `distance` is `"center"` or `"nearest-edge"`.
 *
 * # Safety
 * `form` must be a live handle and `distance` a NUL-terminated string.
 */
enum MsauStatus msau_form_link_heuristic(struct MsauForm *form, const char *distance);

/**
 * Load a model directory written by `train`.
 *
 * # Safety
 * `dir` must be a NUL-terminated path and `out` writable.
 */
enum MsauStatus msau_model_load(const char *dir, struct MsauModel **out);

/**
 * # Safety
 * `model` must be NULL or a handle from `msau_model_load` not yet freed.
 */
void msau_model_free(struct MsauModel *model);

/**
 * Decode `form` with `model`, producing a new form handle holding the
 * predicted entities and links.
 *
 * # Safety
 * `model` and `form` must be live handles and `out` writable.
 */
enum MsauStatus msau_model_predict(const struct MsauModel *model,
                                   const struct MsauForm *form,
                                   struct MsauForm **out);

/**
 * Decode `form` with `model` and return the prediction as JSON with
 * per-entity scores.
 *
 * # Safety
 * `model` and `form` must be live handles and `out` writable.
 */
enum MsauStatus msau_model_predict_json(const struct MsauModel *model,
                                        const struct MsauForm *form,
                                        char **out);

/**
 * Score `n` prediction/ground-truth pairs at IoU `threshold`. With
 * `separate_classes` nonzero, boxes are matched ignoring class first.
 *
 * # Safety
 * `pred` and `gt` must each point to `n` live handles; `out` writable.
 */
enum MsauStatus msau_evaluate(const struct MsauForm *const *pred,
                              const struct MsauForm *const *gt,
                              size_t n,
                              double threshold,
                              int32_t separate_classes,
                              struct MsauScores *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MSAUPAF_H */
