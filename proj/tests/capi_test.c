/* Exercises the shared library through its C header only. */
#include <math.h>
#include <stdio.h>
#include <stdlib.h>
#include <string.h>

#include "asyncrl/asyncrl.h"

static int failures = 0;

#define EXPECT(cond)                                               \
  do {                                                             \
    if (!(cond)) {                                                 \
      fprintf(stderr, "%s:%d: expected %s\n", __FILE__, __LINE__, #cond); \
      ++failures;                                                  \
    }                                                              \
  } while (0)

static int near(double a, double b) { return fabs(a - b) <= 1e-12; }

static void kernels(void) {
  double v = 0.0;
  EXPECT(arl_mismatch_ratio(-1.0, -1.5, &v) == ARL_OK && near(v, exp(0.5)));
  EXPECT(arl_pop_mask(2.0, 2.0, &v) == ARL_OK && v == 2.0);
  EXPECT(arl_pop_mask(2.5, 2.0, &v) == ARL_OK && v == 0.0);
  EXPECT(arl_pop_mask(1.0, 0.5, &v) == ARL_ERR_INVALID_HYPERPARAMETER);
  EXPECT(strlen(arl_last_error()) > 0);
  EXPECT(arl_dsis_factor(1.1, 0.2, 0.2, &v) == ARL_OK && v == 1.1);
  EXPECT(arl_dsis_factor(1.2, 0.2, 0.2, &v) == ARL_OK && v == 0.0);
  EXPECT(arl_mismatch_ratio(0.0, 0.0, NULL) == ARL_ERR_INVALID_INPUT);

  const double rewards[] = {1.0, 0.0, 1.0, 0.0};
  double adv[4];
  EXPECT(arl_group_advantages(rewards, 4, 1, adv) == ARL_OK);
  EXPECT(near(adv[0], 1.0) && near(adv[1], -1.0));
  EXPECT(arl_group_advantages(rewards, 4, 0, adv) == ARL_OK);
  EXPECT(near(adv[0], 0.5) && near(adv[1], -0.5));

  /* Two one-token members with no mismatch: A = {+1, -1}, loss 0,
   * dL/dlp = -A / G. */
  const arl_hyperparams hp = arl_default_hyperparams();
  const double r2[] = {1.0, 0.0};
  const size_t len[] = {1, 1};
  const double lp[] = {-0.7, -0.9};
  double loss = 1.0, grad[2] = {0.0, 0.0};
  EXPECT(arl_icepop_loss(&hp, r2, len, 2, lp, lp, lp, &loss, grad) == ARL_OK);
  EXPECT(near(loss, 0.0));
  EXPECT(near(grad[0], -0.5) && near(grad[1], 0.5));

  /* A mismatch ratio of e^1 lies outside [1/2, 2]: the member is popped. */
  const double infer[] = {-1.7, -0.9};
  EXPECT(arl_icepop_loss(&hp, r2, len, 2, infer, lp, lp, &loss, grad) == ARL_OK);
  EXPECT(grad[0] == 0.0 && near(grad[1], 0.5));
  EXPECT(near(loss, 0.5));
}

static void router(void) {
  arl_router* r = NULL;
  uint32_t rank = 99, again = 98;
  uint64_t charged = 0;
  EXPECT(arl_router_create(64, 7, &r) == ARL_OK);
  EXPECT(arl_router_route(r, 1, &rank) == ARL_ERR_UNAVAILABLE);
  for (uint32_t k = 0; k < 4; ++k) EXPECT(arl_router_add_rank(r, k) == ARL_OK);
  EXPECT(arl_router_add_rank(r, 2) == ARL_ERR_CONFLICT);
  EXPECT(arl_router_route(r, 12345, &rank) == ARL_OK && rank < 4);
  EXPECT(arl_router_route(r, 12345, &again) == ARL_OK && again == rank);
  EXPECT(arl_router_prefill_cost(r, 12345, 100, &charged) == ARL_OK && charged == 100);
  EXPECT(arl_router_prefill_cost(r, 12345, 160, &charged) == ARL_OK && charged == 60);
  EXPECT(arl_router_remove_rank(r, 9) == ARL_ERR_NOT_FOUND);
  arl_router_destroy(r);
}

static void tito(void) {
  /* Standard vocabulary: 'a' = 0, 'b' = 1, and "ab" is a merge. */
  arl_tito* g = NULL;
  const uint32_t split[] = {0, 1}, reversed[] = {1, 0};
  const double lp[] = {-0.1, -0.2};
  int mismatch = -1;
  size_t count = 0;
  EXPECT(arl_tito_create(&g) == ARL_OK);
  EXPECT(arl_tito_record(g, 1, 0, 1, split, lp, 2, 0) == ARL_ERR_NOT_FOUND);
  EXPECT(arl_tito_register(g, 1) == ARL_OK);
  EXPECT(arl_tito_register(g, 2) == ARL_OK);
  EXPECT(arl_tito_record(g, 1, 0, 1, split, lp, 2, 0) == ARL_OK);
  EXPECT(arl_tito_record(g, 2, 0, 1, reversed, lp, 2, 0) == ARL_OK);
  EXPECT(arl_tito_record(g, 1, 0, 1, reversed, lp, 2, 0) == ARL_ERR_CONFLICT);
  EXPECT(arl_tito_round_trip_mismatch(g, 1, &mismatch) == ARL_OK && mismatch == 1);
  EXPECT(arl_tito_round_trip_mismatch(g, 2, &mismatch) == ARL_OK && mismatch == 0);
  EXPECT(arl_tito_record_count(g, &count) == ARL_OK && count == 2);
  arl_tito_destroy(g);
}

static void experiment(void) {
  arl_config* c = NULL;
  arl_run* run = NULL;
  char* dir = NULL;
  EXPECT(arl_config_parse("steps = 3\n", &c) == ARL_ERR_CONFIG);
  EXPECT(strstr(arl_last_error(), "seed") != NULL);
  EXPECT(arl_config_parse("seed = 2\nsteps = 5\n[hyper]\ngroup_size = 4\nbatch_size = 8\n", &c) == ARL_OK);
  EXPECT(arl_config_output_dir(c, &dir) == ARL_OK && strcmp(dir, "runs/default") == 0);
  arl_string_free(dir);
  EXPECT(arl_run_experiment(c, &run) == ARL_OK);
  EXPECT(arl_run_updates(run) == 5);
  EXPECT(arl_run_utilization(run) > 0.0 && arl_run_utilization(run) <= 1.0);
  EXPECT(arl_run_final_reward(run) <= arl_run_optimal_reward(run) + 1e-12);
  arl_run_free(run);
  arl_config_free(c);

  char* table = NULL;
  int passed = 0;
  const char* names[] = {"hashing"};
  EXPECT(arl_verify(names, 1, 0, &table, &passed) == ARL_OK && passed == 1);
  EXPECT(strstr(table, "hashing") != NULL);
  arl_string_free(table);
  const char* unknown[] = {"no-such-suite"};
  EXPECT(arl_verify(unknown, 1, 0, &table, &passed) == ARL_ERR_INVALID_INPUT);

  char *out = NULL, *err = NULL;
  EXPECT(arl_report(NULL, 0, &out, &err) == ARL_OK && strcmp(out, "(no runs)\n") == 0);
  arl_string_free(out);
  arl_string_free(err);
}

int main(void) {
  EXPECT(strcmp(arl_status_name(ARL_ERR_CONFLICT), "") != 0);
  EXPECT(strlen(arl_version()) > 0);
  kernels();
  router();
  tito();
  experiment();
  if (failures) {
    fprintf(stderr, "%d C API check(s) failed\n", failures);
    return 1;
  }
  puts("C API checks passed");
  return 0;
}
