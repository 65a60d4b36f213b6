#ifndef MAQA_H
#define MAQA_H

/* Generated by cbindgen from maqa-ffi; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of a C API call. Zero is success; everything else is an error and
 * leaves a message readable via `maqa_last_error_message`.
 */
typedef enum {
  MAQA_STATUS_OK = 0,
  /**
   * A required pointer argument was null.
   */
  MAQA_STATUS_NULL_ARGUMENT = 1,
  /**
   * A string argument was not valid UTF-8.
   */
  MAQA_STATUS_INVALID_UTF8 = 2,
  MAQA_STATUS_INVALID_ARGUMENT = 3,
  /**
   * Referenced question or passage does not exist.
   */
  MAQA_STATUS_NOT_FOUND = 4,
  MAQA_STATUS_IO = 5,
  /**
   * Malformed JSON, JSONL or binary input.
   */
  MAQA_STATUS_PARSE = 6,
  MAQA_STATUS_CONFIG = 7,
  /**
   * A pipeline backend reported a failure.
   */
  MAQA_STATUS_BACKEND = 8,
  /**
   * An HTTP model service could not be reached or answered badly.
   */
  MAQA_STATUS_SERVICE = 9,
  /**
   * Unexpected internal failure.
   */
  MAQA_STATUS_INTERNAL = 10,
} MaqaStatus;

/**
 * Opaque handle around a loaded workload and its pipeline backends.
 */
typedef struct MaqaEngine MaqaEngine;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static string; do not free.
 */
const char *maqa_version(void);

/**
 * Message of the last error on this thread, or null when the last call
 * succeeded. The string is owned by the caller; free with
 * `maqa_string_free`.
 */
char *maqa_last_error_message(void);

/**
 * Release a string returned by this library.
 *
 * # Safety
 * `s` must be null or a pointer previously returned by a `maqa_*` function
 * and not yet freed.
 */
void maqa_string_free(char *s);

/**
 * Canonical answer normalization: lowercase, punctuation stripped,
 * articles removed, whitespace collapsed. Returns null on error.
 *
 * # Safety
 * `text` must be a valid NUL-terminated string.
 */
char *maqa_normalize(const char *text);

/**
 * Softmax probability of the "right" decision over two verifier logits.
 *
 * # Safety
 * `out_score` must be a valid pointer.
 */
MaqaStatus maqa_validity_score(double logit_right, double logit_wrong, double *out_score);

/**
 * Multi-answer F1 of predictions against gold clusters.
 *
 * `predictions_json` is a JSON array of strings; `gold_json` is a JSON
 * array of clusters, each a non-empty array of equivalent forms. The
 * result is `{"precision", "recall", "f1", "matches"}`.
 *
 * # Safety
 * String arguments must be valid NUL-terminated strings; `out_json` must
 * be a valid pointer.
 */
MaqaStatus maqa_answer_f1_json(const char *predictions_json,
                               const char *gold_json,
                               char **out_json);

/**
 * Per-stage inference cost report for an operating point.
 *
 * `profile_json` configures token lengths and batch shape (all fields
 * optional); pass null for the reference operating point. The result is
 * the full report with per-stage unit totals.
 *
 * # Safety
 * `profile_json` must be null or a valid NUL-terminated string; `out_json`
 * must be a valid pointer.
 */
MaqaStatus maqa_cost_report_json(const char *profile_json, char **out_json);

/**
 * Build an engine over a generated synthetic workload with planted
 * answers, using gold-oracle backends. `spec_json` configures the
 * generator (all fields optional); pass null for defaults.
 *
 * # Safety
 * `spec_json` and `config_json` must each be null or valid NUL-terminated
 * strings; `out_engine` must be a valid pointer.
 */
MaqaStatus maqa_engine_new_synthetic(const char *spec_json,
                                     const char *config_json,
                                     MaqaEngine **out_engine);

/**
 * Build an engine from files: questions JSONL, passage corpus JSONL and a
 * binary embedding store. Uses the deterministic local backends (hash
 * embedder, keyword recaller, support-contrast verifier); no model service
 * is contacted.
 *
 * # Safety
 * Path arguments must be valid NUL-terminated strings; `config_json` must
 * be null or a valid string; `out_engine` must be a valid pointer.
 */
MaqaStatus maqa_engine_new_from_files(const char *dataset_path,
                                      const char *corpus_path,
                                      const char *store_path,
                                      const char *config_json,
                                      MaqaEngine **out_engine);

/**
 * Number of questions in the engine's workload; -1 when `engine` is null.
 *
 * # Safety
 * `engine` must be null or a valid engine handle.
 */
int64_t maqa_engine_question_count(const MaqaEngine *engine);

/**
 * Id of the question at `index`, via `out_id` (caller-owned).
 *
 * # Safety
 * `engine` must be a valid engine handle; `out_id` must be a valid pointer.
 */
MaqaStatus maqa_engine_question_id(const MaqaEngine *engine, size_t index, char **out_id);

/**
 * Run recall-then-verify for one question id; the full run report is
 * returned as JSON via `out_report_json` (caller-owned).
 *
 * # Safety
 * `engine` must be a valid engine handle; `question_id` must be a valid
 * NUL-terminated string; `out_report_json` must be a valid pointer.
 */
MaqaStatus maqa_engine_run_question(const MaqaEngine *engine,
                                    const char *question_id,
                                    char **out_report_json);

/**
 * Run the whole workload and score it against gold answers. The result is
 * the macro-averaged evaluation as JSON via `out_eval_json`
 * (caller-owned).
 *
 * # Safety
 * `engine` must be a valid engine handle; `out_eval_json` must be a valid
 * pointer.
 */
MaqaStatus maqa_engine_evaluate(const MaqaEngine *engine, char **out_eval_json);

/**
 * Release an engine handle.
 *
 * # Safety
 * `engine` must be null or a handle returned by a `maqa_engine_new_*`
 * constructor and not yet freed.
 */
void maqa_engine_free(MaqaEngine *engine);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MAQA_H */
