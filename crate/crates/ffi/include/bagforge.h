#ifndef BAGFORGE_H
#define BAGFORGE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum BfAggregation {
  BF_AGGREGATION_AVG = 0,
  BF_AGGREGATION_ATTN = 1,
} BfAggregation;

typedef enum BfStatus {
  BF_STATUS_OK = 0,
  BF_STATUS_NULL_ARGUMENT = 1,
  BF_STATUS_INVALID_UTF8 = 2,
  /**
   * Bad configuration or input files.
   */
  BF_STATUS_VALIDATION = 3,
  BF_STATUS_IO = 4,
  /**
   * Dimension or span mismatch.
   */
  BF_STATUS_SHAPE = 5,
  BF_STATUS_CHECKPOINT = 6,
  BF_STATUS_BUFFER_TOO_SMALL = 7,
  /**
   * Any other runtime failure.
   */
  BF_STATUS_RUNTIME = 8,
  BF_STATUS_PANIC = 9,
} BfStatus;

/**
 * A trained classifier loaded from a checkpoint.
 */
typedef struct BfModel BfModel;

/**
 * A configured pipeline bound to its work directory.
 */
typedef struct BfPipeline BfPipeline;

typedef struct BfDims {
  size_t dim;
  size_t relations;
  /**
   * Token vocabulary size; 0 for a precomputed-state model.
   */
  size_t vocab;
  size_t max_len;
  bool lite;
} BfDims;

typedef struct BfMetrics {
  double auc;
  double max_f1;
  size_t gold_retrieved;
} BfMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version, static storage.
 */
const char *bf_version(void);

/**
 * Message of the last failure on this thread, or NULL. Valid until the next
 * failing call on the same thread; do not free.
 */
const char *bf_last_error(void);

/**
 * Releases a string returned by this library. NULL is a no-op.
 *
 * # Safety
 * `s` must come from this library and not have been freed.
 */
void bf_string_free(char *s);

/**
 * Builds a pipeline from a JSON config (same schema as the CLI config
 * file; `seed` is required).
 *
 * # Safety
 * `config_json` must be a NUL-terminated string; `out` must be writable.
 */
enum BfStatus bf_pipeline_new(const char *config_json, struct BfPipeline **out);

/**
 * Runs one stage by name (`kb`, `corpus`, ..., `eval`, `synth`) or `all`.
 * On success `*stats_json` receives the stage statistics as JSON; free it
 * with `bf_string_free`. `stats_json` may be NULL.
 *
 * # Safety
 * `pipeline` must be live; `stage` NUL-terminated.
 */
enum BfStatus bf_pipeline_run(const struct BfPipeline *pipeline,
                              const char *stage,
                              char **stats_json);

/**
 * # Safety
 * `pipeline` must come from `bf_pipeline_new` and not have been freed.
 */
void bf_pipeline_free(struct BfPipeline *pipeline);

/**
 * Loads a checkpoint written by the `train` stage.
 *
 * # Safety
 * `path` must be NUL-terminated; `out` writable.
 */
enum BfStatus bf_model_load(const char *path, struct BfModel **out);

/**
 * # Safety
 * `model` must come from `bf_model_load` and not have been freed.
 */
void bf_model_free(struct BfModel *model);

/**
 * # Safety
 * `model` must be live; `out` writable.
 */
enum BfStatus bf_model_dims(const struct BfModel *model, struct BfDims *out);

/**
 * Relation probabilities for one bag of token-id sentences (lite model).
 *
 * Sentence `i` has `lens[i]` ids, concatenated in `ids`, starting with the
 * start sentinel. `spans` holds four inclusive row indices per sentence:
 * `$` start, `$` end, `^` start, `^` end. `out` receives one probability
 * per relation.
 *
 * # Safety
 * Arrays must hold the lengths described above.
 */
enum BfStatus bf_model_bag_probs_tokens(const struct BfModel *model,
                                        const uint32_t *ids,
                                        const size_t *lens,
                                        size_t n_sentences,
                                        const size_t *spans,
                                        enum BfAggregation aggregation,
                                        float *out,
                                        size_t out_len);

/**
 * Relation probabilities for one bag of frozen state matrices.
 *
 * Sentence `i` is a `rows[i] × dim` row-major block of `states`. `spans`
 * is laid out as in `bf_model_bag_probs_tokens`.
 *
 * # Safety
 * Arrays must hold the lengths described above.
 */
enum BfStatus bf_model_bag_probs_states(const struct BfModel *model,
                                        const float *states,
                                        const size_t *rows,
                                        size_t n_sentences,
                                        const size_t *spans,
                                        enum BfAggregation aggregation,
                                        float *out,
                                        size_t out_len);

/**
 * Ranks `n` scored candidates (ties by index) and reports average
 * precision, max F1 and gold hits, where `is_gold[i] != 0` marks gold.
 * `n_gold` may exceed the flagged count to account for gold triples
 * absent from the candidates.
 *
 * # Safety
 * `scores` and `is_gold` must hold `n` values; `out` writable.
 */
enum BfStatus bf_rank_metrics(const double *scores,
                              const uint8_t *is_gold,
                              size_t n,
                              size_t n_gold,
                              struct BfMetrics *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* BAGFORGE_H */
