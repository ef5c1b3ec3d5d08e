#pragma once

// Deterministic verifiable toy environments.
//
// key-chase: a hidden chain key_0 -> key_1 -> ... -> key_h. The question
// names key_0 and h. Action "? k" looks up k and observes its successor
// (followed by filler tokens); action "! k" submits k as the answer, which
// is verified against key_h.
//
// bandit-chat: max(h,1) rounds. Each round shows one prompt token and the
// model replies with one token; reward 1 iff every reply matches the fixed
// answer table.
//
// Latency and failures come from EnvConfig and are drawn from streams that
// are independent of episode content.

#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "asyncrl/policy_sim.hpp"

namespace arl {

enum class TaskFamily { KeyChase, BanditChat };

const char* to_string(TaskFamily f) noexcept;
TaskFamily family_from_string(const std::string& s);

struct TaskSpec {
  std::string id;
  TaskFamily family = TaskFamily::BanditChat;
  std::uint32_t h = 1;
  std::uint32_t max_turns = 2;
  // key-chase: filler tokens appended to every lookup observation.
  std::uint32_t observation_padding = 48;
  // bandit-chat: prompts are tokens [0, num_prompts), replies [0, num_answers).
  std::uint32_t num_prompts = 8;
  std::uint32_t num_answers = 8;

  void validate() const;
  std::uint32_t bandit_rounds() const { return h == 0 ? 1 : h; }
};

struct EnvConfig {
  double latency_mu = 0.0;     // log-space location, virtual ms
  double latency_sigma = 0.0;  // log-space scale
  double p_fail = 0.0;         // per step
  std::uint64_t seed = 0;

  void validate() const;
};

struct StepResult {
  std::vector<TokenId> observation;
  bool done = false;
  std::optional<double> reward;
  bool env_failure = false;
  double latency = 0.0;
};

// The fixed reply the bandit verifier accepts for a prompt token.
TokenId bandit_answer(TokenId prompt, std::uint32_t num_answers);

class Episode {
 public:
  const TaskSpec& spec() const { return spec_; }
  const std::vector<TokenId>& initial_observation() const { return initial_; }
  bool done() const { return done_; }
  std::uint32_t turns_taken() const { return turns_; }

  // key-chase only.
  const std::vector<TokenId>& chain() const { return chain_; }
  // bandit-chat only: the prompt shown in the current round.
  TokenId current_prompt() const;

  StepResult step(const std::vector<TokenId>& action);

 private:
  friend Episode reset(const TaskSpec&, const EnvConfig&, std::uint64_t);
  Episode(const TaskSpec& spec, const EnvConfig& cfg, std::uint64_t seed);

  StepResult step_key_chase(const std::vector<TokenId>& action);
  StepResult step_bandit(const std::vector<TokenId>& action);

  TaskSpec spec_;
  EnvConfig cfg_;
  std::mt19937_64 content_rng_;
  std::mt19937_64 latency_rng_;
  std::mt19937_64 failure_rng_;
  std::vector<TokenId> initial_;
  std::vector<TokenId> chain_;
  std::vector<TokenId> prompts_;
  std::uint32_t round_ = 0;
  bool all_correct_ = true;
  std::uint32_t turns_ = 0;
  bool done_ = false;
};

Episode reset(const TaskSpec& spec, const EnvConfig& cfg, std::uint64_t seed);

double sample_latency(const EnvConfig& cfg, std::mt19937_64& rng);

// Reads [{id, family, h, max_turns}, ...].
std::vector<TaskSpec> load_task_specs(const std::string& path);

// key-chase action vocabulary in the standard tokenizer.
struct KeyChaseTokens {
  TokenId lookup;
  TokenId answer;
  TokenId end;
  TokenId miss;
  static const KeyChaseTokens& get();
};

}  // namespace arl
