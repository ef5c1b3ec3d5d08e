#pragma once

// End-to-end experiments on a discrete-event virtual clock.
//
// Rollout workers (task services) run bandit-chat episodes against the
// latest published weights; finished trajectories flow through the TITO
// gateway and the orchestrator into threshold batches; the trainer consumes
// batches and publishes every K updates. In async mode new groups are
// admitted while the in-flight work cannot exceed what the staleness bound
// will accept; in sync mode the next batch is dispatched only once the
// trainer is idle and has nothing queued.

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "asyncrl/env_sim.hpp"
#include "asyncrl/orchestrator.hpp"
#include "asyncrl/policy_sim.hpp"
#include "asyncrl/rl_math.hpp"
#include "asyncrl/trainer.hpp"

namespace arl {

enum class RunMode { Async, Sync };
const char* to_string(RunMode m) noexcept;

struct ServiceConfig {
  std::string id;
  TaskFamily family = TaskFamily::BanditChat;
  double ratio = 1.0;
  std::size_t max_concurrency = 256;
};

struct ExperimentConfig {
  RunMode mode = RunMode::Async;
  Algorithm algorithm = Algorithm::IcePop;
  RLHyperparams hp = desk_hyperparams();
  double learning_rate = 4.0;
  double momentum = 0.9;

  TaskSpec task;
  double latency_mu = 0.0;
  double latency_sigma = 0.0;
  double p_fail = 0.0;
  double generation_time = 1.0;  // virtual ms per model turn
  double train_time = 250.0;     // virtual ms per update
  InferPerturbation perturbation;

  std::uint64_t seed = 0;
  std::size_t steps = 100;  // trainer updates
  std::vector<ServiceConfig> services;
  double heartbeat_interval = 1000.0;
  double heartbeat_timeout = 3000.0;

  std::uint32_t router_ranks = 4;
  bool rebalance = true;

  double kill_fraction = 0.0;  // share of services that stop at kill_time
  double kill_time = 0.0;

  double teacher_strength = 4.0;  // distill: teacher logit margin on the answer

  std::string output_dir = "runs/default";

  // 8 groups of 8 at desk scale.
  static RLHyperparams desk_hyperparams() {
    RLHyperparams hp;
    hp.group_size = 8;
    hp.batch_size = 64;
    return hp;
  }

  // Throws Config describing the first problem.
  void validate() const;
};

// TOML-style key/value text: top-level keys, [section] tables and
// [[services]] arrays. Unknown keys are config errors.
ExperimentConfig parse_config(const std::string& text);
ExperimentConfig load_config(const std::string& path);

// Output directory after applying the ARL_OUTPUT_ROOT override.
std::string resolve_output_dir(const ExperimentConfig& cfg);

struct PublishRecord {
  Version version = 0;
  double time = 0.0;
  std::size_t updates = 0;
  double batch_mean_reward = 0.0;
  double expected_reward = 0.0;    // exact, under the published infer policy
  std::optional<double> kl;        // distill: held-out KL(teacher || student)
};

struct RunMetrics {
  RunMode mode = RunMode::Async;
  Algorithm algorithm = Algorithm::IcePop;
  double utilization = 0.0;
  double busy_time = 0.0;
  double last_update_time = 0.0;
  double end_time = 0.0;
  std::size_t updates = 0;
  BatchCounts counts;
  RolloutAccounting rollouts;
  std::vector<PublishRecord> publishes;
  std::vector<PolicyWeights> published;  // every published version, v0 first
  std::vector<std::string> deregistered;
  std::vector<std::string> killed;
  std::uint64_t charged_prefill = 0;
  std::uint64_t naive_prefill = 0;
  double initial_expected_reward = 0.0;
  double final_expected_reward = 0.0;
  double optimal_reward = 0.0;
  std::string jsonl;  // the metrics stream, one event per line
};

RunMetrics run_experiment(const ExperimentConfig& cfg);
RunMetrics run_async(ExperimentConfig cfg);
RunMetrics run_sync(ExperimentConfig cfg);

// Probability the infer policy solves an episode, averaging over uniformly
// drawn prompts.
double expected_reward(const PolicyWeights& w, const TaskSpec& task, const InferPerturbation& pert);
// Reward of the best policy, found by enumerating every reply per prompt.
double optimal_reward(const TaskSpec& task);

// Fixed teacher for distillation runs.
PolicyWeights make_teacher(const TaskSpec& task, double strength);
// Mean over held-out prompts of E_teacher[log(pi_teacher / pi_student)],
// train mode.
double heldout_kl(const PolicyWeights& student, const PolicyWeights& teacher, const TaskSpec& task);

// Writes metrics.jsonl and summary.json into the resolved output directory
// and returns it.
std::string write_run_outputs(const ExperimentConfig& cfg, const RunMetrics& m);

}  // namespace arl
