// asyncrl command line: train / verify / report.
// Exit codes: 0 success, 1 runtime failure or failed check, 2 config error.

#include <cstdio>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "asyncrl/asyncrl.h"

namespace {

int cmd_train(const std::string& path) {
  arl_config* cfg = nullptr;
  arl_status st = arl_config_load(path.c_str(), &cfg);
  if (st != ARL_OK) {
    std::fprintf(stderr, "config error: %s\n", arl_last_error());
    return st == ARL_ERR_CONFIG ? 2 : 1;
  }
  arl_run* run = nullptr;
  st = arl_run_experiment(cfg, &run);
  if (st != ARL_OK) {
    std::fprintf(stderr, "run failed (%s): %s\n", arl_status_name(st), arl_last_error());
    arl_config_free(cfg);
    return st == ARL_ERR_CONFIG ? 2 : 1;
  }
  char* dir = nullptr;
  st = arl_run_write(run, cfg, &dir);
  if (st != ARL_OK) {
    std::fprintf(stderr, "cannot write outputs: %s\n", arl_last_error());
    arl_run_free(run);
    arl_config_free(cfg);
    return 1;
  }
  std::printf("updates %zu  utilization %.4f  reward %.4f / %.4f  -> %s/metrics.jsonl\n", arl_run_updates(run),
              arl_run_utilization(run), arl_run_final_reward(run), arl_run_optimal_reward(run), dir);
  arl_string_free(dir);
  arl_run_free(run);
  arl_config_free(cfg);
  return 0;
}

int cmd_verify(const std::vector<std::string>& suites, bool inject) {
  std::vector<const char*> names;
  for (const auto& s : suites) names.push_back(s.c_str());
  char* table = nullptr;
  int ok = 0;
  const arl_status st = arl_verify(names.data(), names.size(), inject ? 1 : 0, &table, &ok);
  if (st != ARL_OK) {
    std::fprintf(stderr, "verify: %s\n", arl_last_error());
    return 1;
  }
  std::fputs(table, stdout);
  arl_string_free(table);
  return ok ? 0 : 1;
}

int cmd_report(const std::vector<std::string>& paths) {
  std::vector<const char*> p;
  for (const auto& s : paths) p.push_back(s.c_str());
  char* out = nullptr;
  char* err = nullptr;
  const arl_status st = arl_report(p.data(), p.size(), &out, &err);
  if (out) std::fputs(out, stdout);
  if (err) std::fputs(err, stderr);
  arl_string_free(out);
  arl_string_free(err);
  if (st != ARL_OK && !err) std::fprintf(stderr, "report: %s\n", arl_last_error());
  return st == ARL_OK ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"asyncrl: asynchronous RL orchestration on a virtual clock"};
  app.require_subcommand(1);

  std::string config;
  auto* train = app.add_subcommand("train", "run an experiment from a config file");
  train->add_option("--config", config, "experiment config (TOML-style)")->required();

  std::vector<std::string> suites;
  bool inject = false;
  auto* verify = app.add_subcommand("verify", "run the oracle suites");
  verify->add_option("--suite", suites, "run only the named suite (repeatable)");
  verify->add_flag("--inject-topk-fault", inject, "use the randomized-tie top-k double (canary)");

  std::vector<std::string> paths;
  auto* report = app.add_subcommand("report", "summarize metrics files");
  report->add_option("paths", paths, "metrics.jsonl files")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    // A missing --config is a configuration problem, not a usage crash.
    return (rc != 0 && train->parsed()) ? 2 : rc;
  }

  if (train->parsed()) return cmd_train(config);
  if (verify->parsed()) return cmd_verify(suites, inject);
  return cmd_report(paths);
}
