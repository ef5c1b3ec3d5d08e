#include "asyncrl/asyncrl.h"

#include <cstdlib>
#include <cstring>
#include <iomanip>
#include <sstream>
#include <string>

#include "asyncrl/error.hpp"
#include "asyncrl/experiment.hpp"
#include "asyncrl/report.hpp"
#include "asyncrl/rl_math.hpp"
#include "asyncrl/router.hpp"
#include "asyncrl/tito_gateway.hpp"
#include "asyncrl/verify.hpp"

struct arl_router {
  arl::Router impl;
};
struct arl_tito {
  arl::TitoGateway impl;
};
struct arl_config {
  arl::ExperimentConfig impl;
};
struct arl_run {
  arl::RunMetrics impl;
};

namespace {

thread_local std::string g_last_error;

arl_status status_of(arl::ErrorKind k) {
  using arl::ErrorKind;
  switch (k) {
    case ErrorKind::InvalidInput: return ARL_ERR_INVALID_INPUT;
    case ErrorKind::InvalidHyperparameter: return ARL_ERR_INVALID_HYPERPARAMETER;
    case ErrorKind::InvalidTrajectory: return ARL_ERR_INVALID_TRAJECTORY;
    case ErrorKind::InvalidBatch: return ARL_ERR_INVALID_BATCH;
    case ErrorKind::InvalidState: return ARL_ERR_INVALID_STATE;
    case ErrorKind::Conflict: return ARL_ERR_CONFLICT;
    case ErrorKind::NotFound: return ARL_ERR_NOT_FOUND;
    case ErrorKind::Unavailable: return ARL_ERR_UNAVAILABLE;
    case ErrorKind::Integrity: return ARL_ERR_INTEGRITY;
    case ErrorKind::Config: return ARL_ERR_CONFIG;
    case ErrorKind::Io: return ARL_ERR_IO;
  }
  return ARL_ERR_INTERNAL;
}

template <typename F>
arl_status guarded(F&& f) {
  g_last_error.clear();
  try {
    f();
    return ARL_OK;
  } catch (const arl::Error& e) {
    g_last_error = e.what();
    return status_of(e.kind());
  } catch (const std::exception& e) {
    g_last_error = e.what();
    return ARL_ERR_INTERNAL;
  } catch (...) {
    g_last_error = "unknown failure";
    return ARL_ERR_INTERNAL;
  }
}

arl_status null_arg(const char* name) {
  g_last_error = std::string(name) + " must not be NULL";
  return ARL_ERR_INVALID_INPUT;
}

char* dup(const std::string& s) {
  char* p = static_cast<char*>(std::malloc(s.size() + 1));
  if (p == nullptr) throw std::bad_alloc();
  std::memcpy(p, s.c_str(), s.size() + 1);
  return p;
}

arl::RLHyperparams to_hp(const arl_hyperparams* hp) {
  arl::RLHyperparams out;
  if (hp != nullptr) {
    out.beta = hp->beta;
    out.eps_low = hp->eps_low;
    out.eps_high = hp->eps_high;
    out.eps_l = hp->eps_l;
    out.eps_h = hp->eps_h;
  }
  return out;
}

}  // namespace

extern "C" {

const char* arl_version(void) { return "0.1.0"; }

const char* arl_status_name(arl_status status) {
  switch (status) {
    case ARL_OK: return "ok";
    case ARL_ERR_INVALID_INPUT: return "invalid-input";
    case ARL_ERR_INVALID_HYPERPARAMETER: return "invalid-hyperparameter";
    case ARL_ERR_INVALID_TRAJECTORY: return "invalid-trajectory";
    case ARL_ERR_INVALID_BATCH: return "invalid-batch";
    case ARL_ERR_INVALID_STATE: return "invalid-state";
    case ARL_ERR_CONFLICT: return "conflict";
    case ARL_ERR_NOT_FOUND: return "not-found";
    case ARL_ERR_UNAVAILABLE: return "unavailable";
    case ARL_ERR_INTEGRITY: return "integrity";
    case ARL_ERR_CONFIG: return "config";
    case ARL_ERR_IO: return "io";
    case ARL_ERR_INTERNAL: return "internal";
  }
  return "unknown";
}

const char* arl_last_error(void) { return g_last_error.c_str(); }

void arl_string_free(char* s) { std::free(s); }

arl_hyperparams arl_default_hyperparams(void) {
  const arl::RLHyperparams hp;
  return {hp.beta, hp.eps_low, hp.eps_high, hp.eps_l, hp.eps_h};
}

arl_status arl_mismatch_ratio(double lp_train_old, double lp_infer_old, double* out) {
  if (out == nullptr) return null_arg("out");
  return guarded([&] { *out = arl::mismatch_ratio(lp_train_old, lp_infer_old); });
}

arl_status arl_pop_mask(double rho, double beta, double* out) {
  if (out == nullptr) return null_arg("out");
  return guarded([&] { *out = arl::pop_mask(rho, beta); });
}

arl_status arl_dsis_factor(double r, double eps_l, double eps_h, double* out) {
  if (out == nullptr) return null_arg("out");
  return guarded([&] { *out = arl::dsis_factor(r, eps_l, eps_h); });
}

arl_status arl_group_advantages(const double* rewards, size_t n, int normalized, double* out) {
  if (rewards == nullptr || out == nullptr) return null_arg("rewards/out");
  return guarded([&] {
    const std::span<const double> r(rewards, n);
    const auto a = normalized ? arl::group_advantages_normalized(r) : arl::group_advantages_centered(r);
    std::copy(a.begin(), a.end(), out);
  });
}

arl_status arl_icepop_loss(const arl_hyperparams* hp, const double* rewards, const size_t* lengths,
                           size_t members, const double* lp_infer_old, const double* lp_train_old,
                           const double* lp_train_cur, double* loss_out, double* grad_out) {
  if (!rewards || !lengths || !lp_infer_old || !lp_train_old || !lp_train_cur || !loss_out)
    return null_arg("input arrays and loss_out");
  return guarded([&] {
    arl::Group g;
    std::size_t k = 0;
    for (std::size_t i = 0; i < members; ++i) {
      arl::Sequence s;
      s.reward = rewards[i];
      for (std::size_t t = 0; t < lengths[i]; ++t, ++k)
        s.tokens.push_back({lp_infer_old[k], lp_train_old[k], lp_train_cur[k], true});
      g.members.push_back(std::move(s));
    }
    const std::vector<arl::Group> groups{g};
    const auto lg = arl::icepop_loss_grad(groups, to_hp(hp));
    *loss_out = lg.loss;
    if (grad_out != nullptr) std::copy(lg.dloss_dlp.begin(), lg.dloss_dlp.end(), grad_out);
  });
}

arl_status arl_router_create(uint32_t vnodes, uint64_t seed, arl_router** out) {
  if (out == nullptr) return null_arg("out");
  return guarded([&] {
    arl::RouterOptions o;
    if (vnodes != 0) o.vnodes = vnodes;
    if (seed != 0) o.seed = seed;
    *out = new arl_router{arl::Router(o)};
  });
}

void arl_router_destroy(arl_router* r) { delete r; }

arl_status arl_router_add_rank(arl_router* r, uint32_t rank) {
  if (r == nullptr) return null_arg("router");
  return guarded([&] { r->impl.add_rank(rank); });
}

arl_status arl_router_remove_rank(arl_router* r, uint32_t rank) {
  if (r == nullptr) return null_arg("router");
  return guarded([&] { r->impl.remove_rank(rank); });
}

arl_status arl_router_route(const arl_router* r, uint64_t rollout, uint32_t* rank_out) {
  if (r == nullptr || rank_out == nullptr) return null_arg("router/rank_out");
  return guarded([&] { *rank_out = r->impl.route(rollout); });
}

arl_status arl_router_prefill_cost(arl_router* r, uint64_t rollout, uint64_t new_total, uint64_t* charged_out) {
  if (r == nullptr || charged_out == nullptr) return null_arg("router/charged_out");
  return guarded([&] { *charged_out = r->impl.prefill_cost(rollout, new_total); });
}

arl_status arl_tito_create(arl_tito** out) {
  if (out == nullptr) return null_arg("out");
  return guarded([&] { *out = new arl_tito{}; });
}

void arl_tito_destroy(arl_tito* g) { delete g; }

arl_status arl_tito_register(arl_tito* g, uint64_t trajectory) {
  if (g == nullptr) return null_arg("gateway");
  return guarded([&] { g->impl.register_trajectory(trajectory); });
}

arl_status arl_tito_record(arl_tito* g, uint64_t trajectory, uint32_t turn, int role, const uint32_t* tokens,
                           const double* logprobs, size_t n, uint64_t version) {
  if (g == nullptr || (tokens == nullptr && n > 0)) return null_arg("gateway/tokens");
  return guarded([&] {
    if (role < 0 || role > 2) arl::fail(arl::ErrorKind::InvalidInput, "role must be 0, 1 or 2");
    arl::TokenRecord rec;
    rec.trajectory = trajectory;
    rec.turn = turn;
    rec.role = static_cast<arl::Role>(role);
    rec.version = version;
    if (n > 0) rec.tokens.assign(tokens, tokens + n);
    if (logprobs != nullptr && n > 0) rec.logprobs.assign(logprobs, logprobs + n);
    g->impl.record_generation(std::move(rec));
  });
}

arl_status arl_tito_round_trip_mismatch(const arl_tito* g, uint64_t trajectory, int* mismatch_out) {
  if (g == nullptr || mismatch_out == nullptr) return null_arg("gateway/mismatch_out");
  return guarded([&] {
    *mismatch_out = g->impl.text_round_trip(trajectory, arl::ToyTokenizer::standard()).mismatch ? 1 : 0;
  });
}

arl_status arl_tito_record_count(const arl_tito* g, size_t* out) {
  if (g == nullptr || out == nullptr) return null_arg("gateway/out");
  return guarded([&] { *out = g->impl.record_count(); });
}

arl_status arl_config_load(const char* path, arl_config** out) {
  if (path == nullptr || out == nullptr) return null_arg("path/out");
  return guarded([&] { *out = new arl_config{arl::load_config(path)}; });
}

arl_status arl_config_parse(const char* text, arl_config** out) {
  if (text == nullptr || out == nullptr) return null_arg("text/out");
  return guarded([&] { *out = new arl_config{arl::parse_config(text)}; });
}

void arl_config_free(arl_config* c) { delete c; }

arl_status arl_config_output_dir(const arl_config* c, char** out) {
  if (c == nullptr || out == nullptr) return null_arg("config/out");
  return guarded([&] { *out = dup(arl::resolve_output_dir(c->impl)); });
}

arl_status arl_run_experiment(const arl_config* c, arl_run** out) {
  if (c == nullptr || out == nullptr) return null_arg("config/out");
  return guarded([&] { *out = new arl_run{arl::run_experiment(c->impl)}; });
}

void arl_run_free(arl_run* r) { delete r; }
double arl_run_utilization(const arl_run* r) { return r ? r->impl.utilization : 0.0; }
size_t arl_run_updates(const arl_run* r) { return r ? r->impl.updates : 0; }
double arl_run_final_reward(const arl_run* r) { return r ? r->impl.final_expected_reward : 0.0; }
double arl_run_optimal_reward(const arl_run* r) { return r ? r->impl.optimal_reward : 0.0; }

arl_status arl_run_write(const arl_run* r, const arl_config* c, char** dir_out) {
  if (r == nullptr || c == nullptr) return null_arg("run/config");
  return guarded([&] {
    const std::string dir = arl::write_run_outputs(c->impl, r->impl);
    if (dir_out != nullptr) *dir_out = dup(dir);
  });
}

arl_status arl_verify(const char* const* names, size_t count, int inject_topk_fault, char** table_out,
                      int* all_passed) {
  if (table_out == nullptr || all_passed == nullptr || (names == nullptr && count > 0))
    return null_arg("names/table_out/all_passed");
  return guarded([&] {
    arl::VerifyOptions opts;
    for (std::size_t i = 0; i < count; ++i) opts.suites.emplace_back(names[i]);
    opts.inject_topk_fault = inject_topk_fault != 0;
    const auto results = arl::run_verify(opts);
    std::ostringstream t;
    bool ok = true;
    t << std::left << std::setw(18) << "suite" << std::setw(8) << "result" << "detail\n";
    for (const auto& r : results) {
      ok = ok && r.passed;
      t << std::setw(18) << r.name << std::setw(8) << (r.passed ? "PASS" : "FAIL") << r.detail << '\n';
    }
    *all_passed = ok ? 1 : 0;
    *table_out = dup(t.str());
  });
}

arl_status arl_verify_suite_names(char** out) {
  if (out == nullptr) return null_arg("out");
  return guarded([&] {
    std::string s;
    for (const auto& n : arl::verify_suite_names()) s += n + "\n";
    *out = dup(s);
  });
}

arl_status arl_report(const char* const* paths, size_t count, char** out, char** err) {
  if (out == nullptr || err == nullptr || (paths == nullptr && count > 0)) return null_arg("paths/out/err");
  int rc = 0;
  const arl_status st = guarded([&] {
    std::vector<std::string> p(paths, paths + count);
    std::ostringstream o, e;
    rc = arl::report(p, o, e);
    *out = dup(o.str());
    *err = dup(e.str());
  });
  if (st != ARL_OK) return st;
  if (rc != 0) {
    g_last_error = "malformed or unreadable metrics file";
    return ARL_ERR_INVALID_INPUT;
  }
  return ARL_OK;
}

}  // extern "C"
