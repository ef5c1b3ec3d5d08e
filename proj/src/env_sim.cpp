#include "asyncrl/env_sim.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include <json.hpp>

#include "asyncrl/error.hpp"
#include "asyncrl/tito_gateway.hpp"

namespace arl {

const char* to_string(TaskFamily f) noexcept {
  switch (f) {
    case TaskFamily::KeyChase: return "key-chase";
    case TaskFamily::BanditChat: return "bandit-chat";
  }
  return "?";
}

TaskFamily family_from_string(const std::string& s) {
  if (s == "key-chase") return TaskFamily::KeyChase;
  if (s == "bandit-chat") return TaskFamily::BanditChat;
  fail(ErrorKind::Config, "unknown task family '" + s + "'");
}

void TaskSpec::validate() const {
  if (family == TaskFamily::KeyChase) {
    if (h > 25) fail(ErrorKind::InvalidInput, "key-chase chain length exceeds 25");
    if (max_turns < h + 1)
      fail(ErrorKind::InvalidInput, "key-chase needs max_turns >= h + 1");
  } else {
    if (num_prompts == 0 || num_answers == 0)
      fail(ErrorKind::InvalidInput, "bandit-chat needs prompts and answers");
    if (max_turns < bandit_rounds())
      fail(ErrorKind::InvalidInput, "bandit-chat needs max_turns >= rounds");
  }
}

void EnvConfig::validate() const {
  if (!(latency_sigma >= 0.0)) fail(ErrorKind::InvalidInput, "latency sigma must be >= 0");
  if (!(p_fail >= 0.0 && p_fail < 1.0))
    fail(ErrorKind::InvalidInput, "p_fail must lie in [0,1)");
  if (!std::isfinite(latency_mu)) fail(ErrorKind::InvalidInput, "latency mu must be finite");
}

const KeyChaseTokens& KeyChaseTokens::get() {
  static const KeyChaseTokens t = [] {
    const ToyTokenizer& tok = ToyTokenizer::standard();
    return KeyChaseTokens{tok.id_of("?"), tok.id_of("!"), tok.id_of("."), tok.id_of(" ")};
  }();
  return t;
}

TokenId bandit_answer(TokenId prompt, std::uint32_t num_answers) {
  return static_cast<TokenId>(mix64(0xba4d17ULL ^ prompt) % num_answers);
}

double sample_latency(const EnvConfig& cfg, std::mt19937_64& rng) {
  if (cfg.latency_sigma == 0.0) return std::exp(cfg.latency_mu);
  std::lognormal_distribution<double> d(cfg.latency_mu, cfg.latency_sigma);
  double x = d(rng);
  return x > 0.0 ? x : std::numeric_limits<double>::min();
}

Episode::Episode(const TaskSpec& spec, const EnvConfig& cfg, std::uint64_t seed)
    : spec_(spec),
      cfg_(cfg),
      content_rng_(mix_seed(seed, 1)),
      latency_rng_(mix_seed(mix_seed(cfg.seed, seed), 2)),
      failure_rng_(mix_seed(mix_seed(cfg.seed, seed), 3)) {
  spec_.validate();
  cfg_.validate();
  const ToyTokenizer& tok = ToyTokenizer::standard();
  if (spec_.family == TaskFamily::KeyChase) {
    std::vector<TokenId> keys;
    for (char c = 'A'; c <= 'Z'; ++c) keys.push_back(tok.id_of(std::string(1, c)));
    std::shuffle(keys.begin(), keys.end(), content_rng_);
    chain_.assign(keys.begin(), keys.begin() + spec_.h + 1);
    initial_ = tok.encode("chase ");
    initial_.push_back(chain_.front());
    const auto tail = tok.encode(" " + std::to_string(spec_.h));
    initial_.insert(initial_.end(), tail.begin(), tail.end());
  } else {
    for (std::uint32_t i = 0; i < spec_.bandit_rounds(); ++i)
      prompts_.push_back(static_cast<TokenId>(content_rng_() % spec_.num_prompts));
    initial_ = {prompts_.front()};
  }
}

Episode reset(const TaskSpec& spec, const EnvConfig& cfg, std::uint64_t seed) {
  return Episode(spec, cfg, seed);
}

TokenId Episode::current_prompt() const {
  if (spec_.family != TaskFamily::BanditChat || round_ >= prompts_.size())
    fail(ErrorKind::InvalidState, "no pending bandit prompt");
  return prompts_[round_];
}

StepResult Episode::step(const std::vector<TokenId>& action) {
  if (done_) fail(ErrorKind::InvalidState, "step after episode end");
  ++turns_;
  const double latency = sample_latency(cfg_, latency_rng_);
  const bool failed = cfg_.p_fail > 0.0 && unit_interval(failure_rng_()) < cfg_.p_fail;
  StepResult res = spec_.family == TaskFamily::KeyChase ? step_key_chase(action)
                                                        : step_bandit(action);
  res.latency = latency;
  if (failed) {
    res.env_failure = true;
    res.done = true;
    res.reward.reset();
  } else if (!res.done && turns_ >= spec_.max_turns) {
    res.done = true;
    res.reward = 0.0;
  }
  done_ = res.done;
  return res;
}

StepResult Episode::step_key_chase(const std::vector<TokenId>& action) {
  const KeyChaseTokens& kt = KeyChaseTokens::get();
  StepResult res;
  if (action.size() != 2 || (action[0] != kt.lookup && action[0] != kt.answer)) {
    res.observation = {kt.miss};
    return res;
  }
  if (action[0] == kt.answer) {
    res.done = true;
    res.reward = action[1] == chain_.back() ? 1.0 : 0.0;
    return res;
  }
  auto it = std::find(chain_.begin(), chain_.end(), action[1]);
  if (it == chain_.end()) {
    res.observation = {kt.miss};
  } else if (std::next(it) == chain_.end()) {
    res.observation = {kt.end};
  } else {
    res.observation = {*std::next(it)};
  }
  for (std::uint32_t i = 0; i < spec_.observation_padding; ++i)
    res.observation.push_back(static_cast<TokenId>(content_rng_() % 26));  // a..z
  return res;
}

StepResult Episode::step_bandit(const std::vector<TokenId>& action) {
  StepResult res;
  const TokenId prompt = prompts_[round_];
  if (action.size() != 1 || action[0] != bandit_answer(prompt, spec_.num_answers))
    all_correct_ = false;
  ++round_;
  if (round_ == prompts_.size()) {
    res.done = true;
    res.reward = all_correct_ ? 1.0 : 0.0;
  } else {
    res.observation = {prompts_[round_]};
  }
  return res;
}

std::vector<TaskSpec> load_task_specs(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::Io, "cannot open task spec file " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::Config, "malformed task spec file: " + std::string(e.what()));
  }
  if (!j.is_array()) fail(ErrorKind::Config, "task spec file must hold a JSON array");
  std::vector<TaskSpec> out;
  for (const auto& e : j) {
    try {
      TaskSpec s;
      s.id = e.at("id").get<std::string>();
      s.family = family_from_string(e.at("family").get<std::string>());
      s.h = e.at("h").get<std::uint32_t>();
      s.max_turns = e.at("max_turns").get<std::uint32_t>();
      s.validate();
      out.push_back(std::move(s));
    } catch (const nlohmann::json::exception& ex) {
      fail(ErrorKind::Config, "bad task spec entry: " + std::string(ex.what()));
    } catch (const Error& ex) {
      fail(ErrorKind::Config, "bad task spec entry: " + std::string(ex.what()));
    }
  }
  return out;
}

}  // namespace arl
