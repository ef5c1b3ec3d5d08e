/* C interface to the asyncrl library.
 *
 * Every call returns an arl_status. On failure the message is available
 * from arl_last_error() until the next call on the same thread. Objects are
 * opaque handles released with their matching *_destroy / *_free call.
 * Strings returned through char** are owned by the caller and released with
 * arl_string_free.
 */
#ifndef ASYNCRL_H
#define ASYNCRL_H

#include <stddef.h>
#include <stdint.h>

#if defined(_WIN32)
#define ARL_API __declspec(dllexport)
#else
#define ARL_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum arl_status {
  ARL_OK = 0,
  ARL_ERR_INVALID_INPUT = 1,
  ARL_ERR_INVALID_HYPERPARAMETER = 2,
  ARL_ERR_INVALID_TRAJECTORY = 3,
  ARL_ERR_INVALID_BATCH = 4,
  ARL_ERR_INVALID_STATE = 5,
  ARL_ERR_CONFLICT = 6,
  ARL_ERR_NOT_FOUND = 7,
  ARL_ERR_UNAVAILABLE = 8,
  ARL_ERR_INTEGRITY = 9,
  ARL_ERR_CONFIG = 10,
  ARL_ERR_IO = 11,
  ARL_ERR_INTERNAL = 12
} arl_status;

ARL_API const char* arl_version(void);
ARL_API const char* arl_status_name(arl_status status);
ARL_API const char* arl_last_error(void);
ARL_API void arl_string_free(char* s);

/* Loss kernels. */
typedef struct arl_hyperparams {
  double beta, eps_low, eps_high, eps_l, eps_h;
} arl_hyperparams;

ARL_API arl_hyperparams arl_default_hyperparams(void);
ARL_API arl_status arl_mismatch_ratio(double lp_train_old, double lp_infer_old, double* out);
ARL_API arl_status arl_pop_mask(double rho, double beta, double* out);
ARL_API arl_status arl_dsis_factor(double r, double eps_l, double eps_h, double* out);
/* normalized != 0: (R - mean) / std; otherwise R - mean. */
ARL_API arl_status arl_group_advantages(const double* rewards, size_t n, int normalized, double* out);
/* One group of sequences; token arrays are concatenated and split by
 * lengths[]. grad_out (may be NULL) receives dL/dlp_train_cur per token. */
ARL_API arl_status arl_icepop_loss(const arl_hyperparams* hp, const double* rewards, const size_t* lengths,
                                   size_t members, const double* lp_infer_old, const double* lp_train_old,
                                   const double* lp_train_cur, double* loss_out, double* grad_out);

/* Router. */
typedef struct arl_router arl_router;
ARL_API arl_status arl_router_create(uint32_t vnodes, uint64_t seed, arl_router** out);
ARL_API void arl_router_destroy(arl_router* r);
ARL_API arl_status arl_router_add_rank(arl_router* r, uint32_t rank);
ARL_API arl_status arl_router_remove_rank(arl_router* r, uint32_t rank);
ARL_API arl_status arl_router_route(const arl_router* r, uint64_t rollout, uint32_t* rank_out);
ARL_API arl_status arl_router_prefill_cost(arl_router* r, uint64_t rollout, uint64_t new_total,
                                           uint64_t* charged_out);

/* Token-in-token-out gateway. */
typedef struct arl_tito arl_tito;
ARL_API arl_status arl_tito_create(arl_tito** out);
ARL_API void arl_tito_destroy(arl_tito* g);
ARL_API arl_status arl_tito_register(arl_tito* g, uint64_t trajectory);
/* role: 0 task, 1 model, 2 environment. logprobs may be NULL for non-model roles. */
ARL_API arl_status arl_tito_record(arl_tito* g, uint64_t trajectory, uint32_t turn, int role,
                                   const uint32_t* tokens, const double* logprobs, size_t n, uint64_t version);
ARL_API arl_status arl_tito_round_trip_mismatch(const arl_tito* g, uint64_t trajectory, int* mismatch_out);
ARL_API arl_status arl_tito_record_count(const arl_tito* g, size_t* out);

/* Experiments. */
typedef struct arl_config arl_config;
typedef struct arl_run arl_run;
ARL_API arl_status arl_config_load(const char* path, arl_config** out);
ARL_API arl_status arl_config_parse(const char* text, arl_config** out);
ARL_API void arl_config_free(arl_config* c);
ARL_API arl_status arl_config_output_dir(const arl_config* c, char** out);

ARL_API arl_status arl_run_experiment(const arl_config* c, arl_run** out);
ARL_API void arl_run_free(arl_run* r);
ARL_API double arl_run_utilization(const arl_run* r);
ARL_API size_t arl_run_updates(const arl_run* r);
ARL_API double arl_run_final_reward(const arl_run* r);
ARL_API double arl_run_optimal_reward(const arl_run* r);
/* Writes metrics.jsonl and summary.json; *dir_out gets the directory. */
ARL_API arl_status arl_run_write(const arl_run* r, const arl_config* c, char** dir_out);

/* Verification suites. names may be NULL when count is 0 (all suites).
 * *table_out receives the printed pass/fail table, *all_passed 1 or 0. */
ARL_API arl_status arl_verify(const char* const* names, size_t count, int inject_topk_fault, char** table_out,
                              int* all_passed);
ARL_API arl_status arl_verify_suite_names(char** out); /* newline separated */

/* Metrics report. Returns ARL_ERR_INVALID_INPUT for unreadable or malformed
 * files; *out and *err always receive the rendered text and diagnostics. */
ARL_API arl_status arl_report(const char* const* paths, size_t count, char** out, char** err);

#ifdef __cplusplus
}
#endif

#endif
