#ifndef STANCE_INJECT_H
#define STANCE_INJECT_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum SiStatus {
  SI_STATUS_OK = 0,
  SI_STATUS_NULL_POINTER = 1,
  SI_STATUS_INVALID_ARGUMENT = 2,
  SI_STATUS_IO = 3,
  SI_STATUS_MODEL = 4,
  SI_STATUS_RETRIEVAL = 5,
  SI_STATUS_BUFFER_TOO_SMALL = 6,
  SI_STATUS_PANIC = 7,
} SiStatus;

typedef struct SiConceptGraph SiConceptGraph;

// Ranked context candidates.
typedef struct SiContextList SiContextList;

// A trained classifier with its vocabulary.
typedef struct SiModel SiModel;

typedef struct SiBhapkarResult {
  double statistic;
  size_t df;
  double p_value;
  size_t n;
} SiBhapkarResult;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or null. The pointer
// stays valid until the next call into this library on the same thread.
const char *si_last_error(void);

// Library version as a static NUL-terminated string.
const char *si_version(void);

// Load a checkpoint directory written by training.
//
// # Safety
// `dir` must be a NUL-terminated string and `out` a writable pointer.
enum SiStatus si_model_load(const char *dir, struct SiModel **out);

// # Safety
// `model` must come from [`si_model_load`] and not be used afterwards.
void si_model_free(struct SiModel *model);

// Number of labels the model predicts; 0 for a null handle.
//
// # Safety
// `model` must be null or a live handle.
size_t si_model_num_labels(const struct SiModel *model);

// Classify one instance. `contexts` may be null when `n_contexts` is 0;
// models that read contexts use at most their configured number.
// `probs` receives one probability per label and must hold
// [`si_model_num_labels`] values.
//
// # Safety
// All pointers must be valid for the stated lengths; strings must be
// NUL-terminated.
enum SiStatus si_model_predict(const struct SiModel *model,
                               const char *text,
                               const char *target,
                               const char *const *contexts,
                               size_t n_contexts,
                               size_t *label,
                               double *probs,
                               size_t probs_len);

// Macro-averaged F1 over the classes present in gold or predictions.
//
// # Safety
// `pred` and `gold` must each point to `n` values; `out` must be writable.
enum SiStatus si_f1_macro(const size_t *pred,
                          const size_t *gold,
                          size_t n,
                          size_t num_classes,
                          double *out);

// Marginal-homogeneity test between two paired prediction vectors.
//
// # Safety
// `a` and `b` must each point to `n` values; `out` must be writable.
enum SiStatus si_bhapkar(const size_t *a,
                         const size_t *b,
                         size_t n,
                         size_t num_classes,
                         struct SiBhapkarResult *out);

// Load a tab-separated edge file. `stopwords` may be null for the
// built-in English list.
//
// # Safety
// Strings must be NUL-terminated; `out` must be writable.
enum SiStatus si_concept_graph_load(const char *path,
                                    const char *stopwords,
                                    struct SiConceptGraph **out);

// # Safety
// `graph` must come from [`si_concept_graph_load`] and not be used afterwards.
void si_concept_graph_free(struct SiConceptGraph *graph);

// Best `k` edges touching a concept of the text or the target.
//
// # Safety
// `graph` must be live, strings NUL-terminated and `out` writable.
enum SiStatus si_concept_graph_retrieve(const struct SiConceptGraph *graph,
                                        const char *text,
                                        const char *target,
                                        size_t k,
                                        struct SiContextList **out);

// # Safety
// `list` must be null or a live handle.
size_t si_context_list_len(const struct SiContextList *list);

// Text of entry `i`, or null when out of range. Owned by the list.
//
// # Safety
// `list` must be null or a live handle.
const char *si_context_list_text(const struct SiContextList *list, size_t i);

// Score of entry `i`, or NaN when out of range.
//
// # Safety
// `list` must be null or a live handle.
double si_context_list_score(const struct SiContextList *list, size_t i);

// # Safety
// `list` must come from a retrieval call and not be used afterwards.
void si_context_list_free(struct SiContextList *list);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* STANCE_INJECT_H */
