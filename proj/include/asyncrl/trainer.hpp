#pragma once

// Trainer: sample filtering, the group pad/drop rule, loss-driven updates of
// the tabular policy, and periodic weight publication with optimizer reset.
//
// The policy context of a model token is the token immediately preceding it
// in the trajectory's message stream, folded into the policy's context table
// (token mod context_dim).

#include <cstddef>
#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "asyncrl/orchestrator.hpp"
#include "asyncrl/policy_sim.hpp"
#include "asyncrl/rl_math.hpp"

namespace arl {

enum class Algorithm { IcePop, Dsis, Distill };
const char* to_string(Algorithm a) noexcept;
Algorithm algorithm_from_string(const std::string& s);

struct OptimizerState {
  std::vector<double> momentum;
  double learning_rate = 0.1;
  double momentum_coef = 0.9;

  void reset() { std::fill(momentum.begin(), momentum.end(), 0.0); }
};

struct SyncPolicy {
  std::size_t k_sync = 1;
  bool due(std::size_t updates) const { return updates > 0 && updates % k_sync == 0; }
};

// Keeps trajectories whose oldest version is within tau publishes of
// w_current (w_current - w_0 <= tau).
std::vector<Trajectory> filter_staleness(std::vector<Trajectory> trajs, Version w_current,
                                         std::uint64_t tau);

// Pads a group with repeats of its valid members (cycling in order) when
// more than half are valid; otherwise drops it.
template <typename T>
std::optional<std::vector<T>> regroup(std::span<const T> group, std::span<const bool> valid,
                                      std::size_t group_size) {
  std::vector<T> kept;
  for (std::size_t i = 0; i < group.size() && i < valid.size(); ++i)
    if (valid[i]) kept.push_back(group[i]);
  if (2 * kept.size() <= group_size) return std::nullopt;
  const std::size_t v = kept.size();
  for (std::size_t i = 0; kept.size() < group_size; ++i) kept.push_back(kept[i % v]);
  return kept;
}

struct BatchCounts {
  std::size_t consumed = 0;
  std::size_t trained = 0;  // distinct valid trajectories in surviving groups
  std::size_t dropped_stale = 0;
  std::size_t dropped_env = 0;
  std::size_t dropped_group = 0;
  std::size_t padded = 0;   // repeats added by the group rule

  BatchCounts& operator+=(const BatchCounts& o);
};

struct StepReport {
  double loss = 0.0;
  std::size_t model_tokens = 0;
  std::size_t masked_tokens = 0;  // tokens with zero gradient weight
  double mean_reward = 0.0;
};

struct TrainerOptions {
  RLHyperparams hp;
  Algorithm algorithm = Algorithm::IcePop;
  double learning_rate = 0.5;
  double momentum = 0.9;
};

class Trainer {
 public:
  Trainer(PolicyWeights initial, TrainerOptions opts);

  const PolicyWeights& weights() const { return current_; }
  const WeightStore& store() const { return store_; }
  WeightStore& store() { return store_; }
  const OptimizerState& optimizer() const { return opt_; }
  std::size_t updates() const { return updates_; }
  const TrainerOptions& options() const { return opts_; }

  // Groups the batch by group id (first-appearance order), applies the
  // staleness filter, environment-failure exclusion and the group rule.
  // Returns the surviving groups flattened in order.
  std::vector<Trajectory> filter_batch(const std::vector<Trajectory>& batch, BatchCounts& counts) const;

  // One optimizer update from an already filtered batch. Groups are runs of
  // consecutive trajectories sharing a group id.
  StepReport train_step(const std::vector<Trajectory>& batch, Algorithm mode);

  // filter_batch + train_step (skipped when nothing survives) + maybe_sync.
  struct ConsumeResult {
    BatchCounts counts;
    std::optional<StepReport> step;
    std::optional<Version> published;
  };
  ConsumeResult consume(const std::vector<Trajectory>& batch);

  // Publishes and resets the optimizer when the update count is a multiple
  // of k_sync.
  std::optional<Version> maybe_sync();

  // Loss of `batch` under the current weights without updating.
  double evaluate_loss(const std::vector<Trajectory>& batch, Algorithm mode) const;

 private:
  struct TokenRef {
    ContextId ctx;
    TokenId token;
  };
  struct Prepared {
    LossAndGrad lg;
    std::vector<TokenRef> refs;  // aligned with lg.dloss_dlp
    double mean_reward = 0.0;
  };
  Prepared prepare(const std::vector<Trajectory>& batch, Algorithm mode) const;

  TrainerOptions opts_;
  PolicyWeights current_;
  WeightStore store_;
  OptimizerState opt_;
  SyncPolicy sync_;
  std::size_t updates_ = 0;
};

}  // namespace arl
