#ifndef LBMCTS_H
#define LBMCTS_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum LbmctsStatus {
  LBMCTS_STATUS_OK = 0,
  LBMCTS_STATUS_NULL_POINTER = 1,
  LBMCTS_STATUS_INVALID_UTF8 = 2,
  LBMCTS_STATUS_PARSE = 3,
  LBMCTS_STATUS_INVARIANT = 4,
  LBMCTS_STATUS_EVALUATION = 5,
  LBMCTS_STATUS_LLM = 6,
  LBMCTS_STATUS_INTERNAL = 7,
} LbmctsStatus;

typedef enum LbmctsMode {
  LBMCTS_MODE_HYBRID = 0,
  LBMCTS_MODE_BO_ONLY = 1,
  LBMCTS_MODE_LLM_ONLY = 2,
  LBMCTS_MODE_FIXED = 3,
} LbmctsMode;

typedef struct LbmctsResult LbmctsResult;

typedef struct LbmctsSpace LbmctsSpace;

/**
 * Run settings. LLM proposals come from the built-in seeded mock.
 */
typedef struct LbmctsOptions {
  uint64_t budget;
  uint64_t seed;
  double epsilon;
  enum LbmctsMode mode;
  /**
   * BO probability for `LBMCTS_MODE_FIXED`.
   */
  double fixed_p_bo;
} LbmctsOptions;

/**
 * Objective callback. Receives `{"algorithm": ..., "params": {...}}` and
 * writes the score (larger is better) to `out_y`. A nonzero return marks
 * the evaluation as failed; the run skips it and continues.
 */
typedef int (*LbmctsObjective)(void *user, const char *config_json, double *out_y);

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread; empty after a success.
 * Valid until the next library call on the same thread.
 */
const char *lbmcts_last_error_message(void);

void lbmcts_string_free(char *s);

/**
 * Budget 300, seed 0, ε 0.05, hybrid mode.
 */
enum LbmctsStatus lbmcts_options_default(struct LbmctsOptions *out);

/**
 * Parses a search-space JSON document.
 */
enum LbmctsStatus lbmcts_space_from_json(const char *json, struct LbmctsSpace **out);

/**
 * The built-in three-algorithm synthetic space.
 */
enum LbmctsStatus lbmcts_space_synth3(struct LbmctsSpace **out);

void lbmcts_space_free(struct LbmctsSpace *space);

/**
 * Number of algorithms, or 0 for a null handle.
 */
size_t lbmcts_space_algorithm_count(const struct LbmctsSpace *space);

/**
 * Total hyperparameter count over all algorithms, or 0 for a null handle.
 */
size_t lbmcts_space_param_count(const struct LbmctsSpace *space);

/**
 * Runs the optimizer, calling `objective` once per iteration.
 */
enum LbmctsStatus lbmcts_run(const struct LbmctsSpace *space,
                             LbmctsObjective objective,
                             void *user,
                             const struct LbmctsOptions *options,
                             struct LbmctsResult **out);

void lbmcts_result_free(struct LbmctsResult *result);

/**
 * Best score, or NaN when nothing was evaluated successfully or the handle
 * is null.
 */
double lbmcts_result_best_y(const struct LbmctsResult *result);

size_t lbmcts_result_evaluations(const struct LbmctsResult *result);

/**
 * `{"algorithm": ..., "params": {...}}` of the incumbent, or null.
 */
char *lbmcts_result_best_config_json(const struct LbmctsResult *result);

/**
 * One JSON trial record per line, or null for a null handle.
 */
char *lbmcts_result_history_jsonl(const struct LbmctsResult *result);

char *lbmcts_result_summary_json(const struct LbmctsResult *result);

/**
 * Kendall τ-a of two length-`n` arrays.
 */
enum LbmctsStatus lbmcts_kendall_tau(const double *a, const double *b, size_t n, double *out);

/**
 * Expected improvement of a Gaussian prediction over `best`.
 */
enum LbmctsStatus lbmcts_expected_improvement(double mean,
                                              double variance,
                                              double best,
                                              double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* LBMCTS_H */
