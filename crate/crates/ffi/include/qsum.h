#ifndef QSUM_H
#define QSUM_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call.
 */
typedef enum QsumStatus {
  QSUM_STATUS_OK = 0,
  QSUM_STATUS_NULL_POINTER = 1,
  QSUM_STATUS_INVALID_UTF8 = 2,
  QSUM_STATUS_INVALID_ARGUMENT = 3,
  QSUM_STATUS_CONFIG = 4,
  QSUM_STATUS_DATA = 5,
  QSUM_STATUS_IO = 6,
  QSUM_STATUS_PANIC = 7,
} QsumStatus;

/**
 * A TF-IDF question index.
 */
typedef struct QsumIndex QsumIndex;

/**
 * A trained checkpoint ready for decoding.
 */
typedef struct QsumModel QsumModel;

typedef struct QsumRougeScore {
  double precision;
  double recall;
  double f1;
} QsumRougeScore;

typedef struct QsumRouge {
  struct QsumRougeScore rouge1;
  struct QsumRougeScore rouge2;
  struct QsumRougeScore rouge_l;
} QsumRouge;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the most recent failed call on this thread; empty after a success.
 * The pointer stays valid until the next library call on the same thread.
 */
const char *qsum_last_error(void);

/**
 * Releases a string returned by the library. Null is ignored.
 *
 * # Safety
 * `s` must come from this library and not have been freed already.
 */
void qsum_string_free(char *s);

/**
 * Loads a checkpoint directory written by `qsum train`.
 *
 * # Safety
 * `dir` must be a NUL-terminated string; `out` must be writable.
 */
enum QsumStatus qsum_model_load(const char *dir, struct QsumModel **out);

/**
 * # Safety
 * `model` must come from `qsum_model_load` and not have been freed. Null is ignored.
 */
void qsum_model_free(struct QsumModel *model);

/**
 * Summarizes one question. `beam` or `max_len` of 0 selects the default.
 * On success `*summary` holds a string to release with `qsum_string_free`;
 * `score` may be null.
 *
 * # Safety
 * `model` must be a live handle, `question` NUL-terminated, `summary` writable.
 */
enum QsumStatus qsum_summarize(const struct QsumModel *model,
                               const char *question,
                               size_t beam,
                               size_t max_len,
                               char **summary,
                               double *score);

/**
 * Builds an index from a JSON-lines file of `{"question", "answer"}` records.
 *
 * # Safety
 * `collection` must be NUL-terminated; `out` must be writable.
 */
enum QsumStatus qsum_index_build(const char *collection, bool stopwords, struct QsumIndex **out);

/**
 * Loads an index written by `qsum index` or `qsum_index_save`.
 *
 * # Safety
 * `path` must be NUL-terminated; `out` must be writable.
 */
enum QsumStatus qsum_index_load(const char *path, struct QsumIndex **out);

/**
 * # Safety
 * `index` must be a live handle and `path` NUL-terminated.
 */
enum QsumStatus qsum_index_save(const struct QsumIndex *index, const char *path);

/**
 * # Safety
 * `index` must come from this library and not have been freed. Null is ignored.
 */
void qsum_index_free(struct QsumIndex *index);

/**
 * Number of records the index was built from; 0 for a null handle.
 *
 * # Safety
 * `index` must be null or a live handle.
 */
size_t qsum_index_len(const struct QsumIndex *index);

/**
 * Top-`k` records for `query`. `ids` and `scores` must each hold `k` slots;
 * `*count` receives how many were filled (0 when nothing overlaps).
 *
 * # Safety
 * Pointers must be valid for the stated sizes; `scores` may be null.
 */
enum QsumStatus qsum_retrieve(const struct QsumIndex *index,
                              const char *query,
                              size_t k,
                              size_t *ids,
                              double *scores,
                              size_t *count);

/**
 * Stored answer for record `id`, released with `qsum_string_free`.
 *
 * # Safety
 * `index` must be a live handle and `answer` writable.
 */
enum QsumStatus qsum_index_answer(const struct QsumIndex *index, size_t id, char **answer);

/**
 * Macro-averaged ROUGE-1/2/L over `n` hypothesis/reference pairs.
 *
 * # Safety
 * `hyps` and `refs` must each point to `n` NUL-terminated strings; `out` must be writable.
 */
enum QsumStatus qsum_rouge(const char *const *hyps,
                           const char *const *refs,
                           size_t n,
                           struct QsumRouge *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* QSUM_H */
