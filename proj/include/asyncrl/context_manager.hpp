#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "asyncrl/policy_sim.hpp"

namespace arl {

struct Round {
  std::vector<TokenId> reasoning;
  std::vector<TokenId> action;
  std::vector<TokenId> observation;
  bool folded = false;

  friend bool operator==(const Round&, const Round&) = default;
};

struct ManagedContext {
  std::vector<TokenId> question;
  std::vector<Round> rounds;
  std::vector<std::string> audit;  // one entry per discard-all event

  friend bool operator==(const ManagedContext&, const ManagedContext&) = default;
};

inline constexpr const char* kFoldPlaceholder = "Tool result is omitted to save tokens.";

// kFoldPlaceholder in the standard tokenizer, encoded once.
const std::vector<TokenId>& fold_placeholder_tokens();

// Replaces every observation older than the most recent k rounds with the
// placeholder.
ManagedContext fold_keep_recent(ManagedContext ctx, std::size_t k);

std::size_t context_tokens(const ManagedContext& ctx);

// Keep-recent-k, then discard the whole tool-call history when the folded
// context still exceeds t_ctx tokens.
ManagedContext hierarchical_manage(ManagedContext ctx, std::size_t t_ctx, std::size_t k);

// Scripted key-chase agent: follows the chain by looking up whatever key the
// newest observation names and answers once the terminus marker shows up.
// It reads only its (possibly managed) context, so a discard-all sends it
// back to the first key.
struct KeyChaseAgentOptions {
  std::uint64_t seed = 0;
  std::uint32_t h = 8;
  std::uint32_t max_turns = 0;  // 0: 4 * (h + 1)
  std::uint32_t observation_padding = 48;
  std::size_t token_budget = 400;  // the agent cannot read a longer context
  bool managed = true;
  std::size_t k = 5;
  std::size_t t_ctx = 0;  // 0: token_budget
};

struct KeyChaseAgentResult {
  std::uint32_t steps = 0;
  bool solved = false;
  bool overflowed = false;
  std::size_t max_context = 0;
  std::size_t discards = 0;
};

KeyChaseAgentResult run_key_chase_agent(const KeyChaseAgentOptions& opts);

}  // namespace arl
