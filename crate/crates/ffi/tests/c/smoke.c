#include <math.h>
#include <stdio.h>
#include <string.h>

#include "lbmcts.h"

static int objective(void *user, const char *config_json, double *out_y) {
  int *calls = (int *)user;
  ++*calls;
  if (strstr(config_json, "\"algoC\"") != NULL) {
    return 1;
  }
  *out_y = strstr(config_json, "\"algoA\"") != NULL ? 1.0 : 0.5;
  return 0;
}

int main(void) {
  LbmctsSpace *space = NULL;
  if (lbmcts_space_synth3(&space) != LBMCTS_STATUS_OK) {
    return 1;
  }
  LbmctsOptions opts;
  lbmcts_options_default(&opts);
  opts.budget = 20;
  opts.seed = 3;

  int calls = 0;
  LbmctsResult *result = NULL;
  LbmctsStatus rc = lbmcts_run(space, objective, &calls, &opts, &result);
  if (rc != LBMCTS_STATUS_OK) {
    fprintf(stderr, "run failed: %s\n", lbmcts_last_error_message());
    return 2;
  }
  if (calls != 20 || lbmcts_result_best_y(result) != 1.0) {
    return 3;
  }
  char *best = lbmcts_result_best_config_json(result);
  if (best == NULL || strstr(best, "algoA") == NULL) {
    return 4;
  }
  printf("%zu %s\n", lbmcts_result_evaluations(result), best);
  lbmcts_string_free(best);
  lbmcts_result_free(result);

  if (lbmcts_run(space, NULL, NULL, &opts, &result) != LBMCTS_STATUS_NULL_POINTER) {
    return 5;
  }
  if (strlen(lbmcts_last_error_message()) == 0) {
    return 6;
  }
  double tau = NAN;
  const double a[] = {1, 2, 3};
  if (lbmcts_kendall_tau(a, a, 3, &tau) != LBMCTS_STATUS_OK || tau != 1.0) {
    return 7;
  }
  lbmcts_space_free(space);
  return 0;
}
