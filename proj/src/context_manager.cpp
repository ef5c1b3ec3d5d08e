#include "asyncrl/context_manager.hpp"

#include <algorithm>

#include "asyncrl/env_sim.hpp"
#include "asyncrl/error.hpp"
#include "asyncrl/tito_gateway.hpp"

namespace arl {

const std::vector<TokenId>& fold_placeholder_tokens() {
  static const std::vector<TokenId> tokens =
      ToyTokenizer::standard().encode(kFoldPlaceholder);
  return tokens;
}

ManagedContext fold_keep_recent(ManagedContext ctx, std::size_t k) {
  if (k == 0) fail(ErrorKind::InvalidInput, "keep-recent k must be at least 1");
  const std::size_t n = ctx.rounds.size();
  if (n <= k) return ctx;
  for (std::size_t i = 0; i < n - k; ++i) {
    Round& r = ctx.rounds[i];
    if (r.folded) continue;
    r.observation = fold_placeholder_tokens();
    r.folded = true;
  }
  return ctx;
}

std::size_t context_tokens(const ManagedContext& ctx) {
  std::size_t n = ctx.question.size();
  for (const Round& r : ctx.rounds)
    n += r.reasoning.size() + r.action.size() + r.observation.size();
  return n;
}

ManagedContext hierarchical_manage(ManagedContext ctx, std::size_t t_ctx, std::size_t k) {
  if (t_ctx <= ctx.question.size() + fold_placeholder_tokens().size())
    fail(ErrorKind::InvalidInput, "context threshold too small for the question");
  ctx = fold_keep_recent(std::move(ctx), k);
  const std::size_t after_fold = context_tokens(ctx);
  if (after_fold > t_ctx) {
    ctx.audit.push_back("discard-all: " + std::to_string(ctx.rounds.size()) + " rounds, " +
                        std::to_string(after_fold) + " tokens > " + std::to_string(t_ctx));
    ctx.rounds.clear();
  }
  return ctx;
}

namespace {

bool is_key(TokenId t) {
  const std::string& p = ToyTokenizer::standard().piece(t);
  return p.size() == 1 && p[0] >= 'A' && p[0] <= 'Z';
}

}  // namespace

KeyChaseAgentResult run_key_chase_agent(const KeyChaseAgentOptions& opts) {
  TaskSpec spec;
  spec.id = "key-chase";
  spec.family = TaskFamily::KeyChase;
  spec.h = opts.h;
  spec.max_turns = opts.max_turns == 0 ? 4 * (opts.h + 1) : opts.max_turns;
  spec.observation_padding = opts.observation_padding;
  Episode ep = reset(spec, EnvConfig{0.0, 0.0, 0.0, opts.seed}, opts.seed);
  const KeyChaseTokens& kt = KeyChaseTokens::get();
  const std::vector<TokenId> reasoning = ToyTokenizer::standard().encode("next");
  const std::size_t t_ctx = opts.t_ctx == 0 ? opts.token_budget : opts.t_ctx;

  ManagedContext ctx;
  ctx.question = ep.initial_observation();
  KeyChaseAgentResult res;
  while (!ep.done()) {
    if (opts.managed) ctx = hierarchical_manage(std::move(ctx), t_ctx, opts.k);
    const std::size_t n = context_tokens(ctx);
    res.max_context = std::max(res.max_context, n);
    if (n > opts.token_budget) {
      res.overflowed = true;
      break;
    }
    std::vector<TokenId> action;
    if (ctx.rounds.empty()) {
      for (TokenId t : ctx.question)
        if (is_key(t)) {
          action = {kt.lookup, t};
          break;
        }
    } else {
      const Round& last = ctx.rounds.back();
      const TokenId seen = last.observation.empty() ? kt.miss : last.observation.front();
      if (seen == kt.end) action = {kt.answer, last.action.back()};
      else if (is_key(seen)) action = {kt.lookup, seen};
      else action = {kt.answer, last.action.back()};
    }
    const StepResult step = ep.step(action);
    ++res.steps;
    if (step.done) {
      res.solved = step.reward.value_or(0.0) == 1.0;
      break;
    }
    ctx.rounds.push_back(Round{reasoning, action, step.observation, false});
  }
  res.discards = ctx.audit.size();
  return res;
}

}  // namespace arl
