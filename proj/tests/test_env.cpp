#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <random>

#include "asyncrl/env_sim.hpp"
#include "asyncrl/tito_gateway.hpp"
#include "support.hpp"

using namespace arl;

namespace {

TaskSpec key_chase(std::uint32_t h) {
  TaskSpec s;
  s.id = "kc";
  s.family = TaskFamily::KeyChase;
  s.h = h;
  s.max_turns = 2 * (h + 1);
  s.observation_padding = 4;
  return s;
}

bool is_key(TokenId t) {
  const std::string& p = ToyTokenizer::standard().piece(t);
  return p.size() == 1 && p[0] >= 'A' && p[0] <= 'Z';
}

std::vector<TokenId> keys_in(const std::vector<TokenId>& obs) {
  std::vector<TokenId> out;
  for (TokenId t : obs)
    if (is_key(t)) out.push_back(t);
  return out;
}

}  // namespace

TEST_CASE("reset is deterministic") {
  const TaskSpec s = key_chase(5);
  CHECK(reset(s, {}, 17).initial_observation() == reset(s, {}, 17).initial_observation());
  CHECK(reset(s, {}, 17).chain() == reset(s, {}, 17).chain());
  CHECK(reset(s, {}, 17).chain() != reset(s, {}, 18).chain());
}

TEST_CASE("a zero-length chain shows the answer up front") {
  Episode ep = reset(key_chase(0), {}, 3);
  const auto keys = keys_in(ep.initial_observation());
  REQUIRE(keys.size() == 1);
  const KeyChaseTokens& kt = KeyChaseTokens::get();
  const StepResult r = ep.step({kt.answer, keys[0]});
  CHECK(r.done);
  CHECK(r.reward == 1.0);
}

TEST_CASE("the scripted optimal agent needs exactly h + 1 turns") {
  const KeyChaseTokens& kt = KeyChaseTokens::get();
  for (std::uint32_t h = 0; h <= 10; ++h) {
    Episode ep = reset(key_chase(h), {}, 100 + h);
    TokenId key = keys_in(ep.initial_observation()).at(0);
    for (std::uint32_t i = 0; i < h; ++i) {
      const StepResult r = ep.step({kt.lookup, key});
      REQUIRE_FALSE(r.done);
      key = r.observation.at(0);
    }
    const StepResult r = ep.step({kt.answer, key});
    CHECK(r.done);
    CHECK(r.reward == 1.0);
    CHECK(ep.turns_taken() == h + 1);
  }
}

TEST_CASE("verifier agrees with a replay of the hidden chain") {
  const KeyChaseTokens& kt = KeyChaseTokens::get();
  std::mt19937_64 rng(9);
  const auto& tok = ToyTokenizer::standard();
  for (std::uint64_t seed = 0; seed < 300; ++seed) {
    const std::uint32_t h = static_cast<std::uint32_t>(rng() % 8);
    Episode ep = reset(key_chase(h), {}, seed);
    const auto chain = ep.chain();
    TokenId guess = tok.id_of(std::string(1, static_cast<char>('A' + rng() % 26)));
    if (rng() % 2) guess = chain.back();
    const StepResult r = ep.step({kt.answer, guess});
    CHECK(r.done);
    CHECK(r.reward == (guess == chain.back() ? 1.0 : 0.0));
    CHECK(error_kind([&] { ep.step({kt.answer, guess}); }) == ErrorKind::InvalidState);
  }
}

TEST_CASE("malformed or unknown lookups observe the miss marker") {
  const KeyChaseTokens& kt = KeyChaseTokens::get();
  Episode ep = reset(key_chase(3), {}, 1);
  CHECK(ep.step({kt.lookup}).observation == std::vector<TokenId>{kt.miss});
  const StepResult r = ep.step({kt.lookup, ep.chain().back()});
  CHECK(r.observation.at(0) == kt.end);
  CHECK(r.observation.size() == 1 + ep.spec().observation_padding);
}

TEST_CASE("running out of turns ends with reward 0") {
  const KeyChaseTokens& kt = KeyChaseTokens::get();
  TaskSpec s = key_chase(2);
  s.max_turns = 3;
  Episode ep = reset(s, {}, 4);
  StepResult r;
  for (int i = 0; i < 3; ++i) r = ep.step({kt.lookup, ep.chain().front()});
  CHECK(r.done);
  CHECK(r.reward == 0.0);
}

TEST_CASE("environment failures") {
  const KeyChaseTokens& kt = KeyChaseTokens::get();
  EnvConfig always;
  always.p_fail = std::nextafter(1.0, 0.0);
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    Episode ep = reset(key_chase(3), always, seed);
    const StepResult r = ep.step({kt.lookup, ep.chain().front()});
    CHECK(r.env_failure);
    CHECK(r.done);
    CHECK_FALSE(r.reward.has_value());
  }

  EnvConfig some;
  some.p_fail = 0.3;
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    some.seed = seed;
    Episode ep = reset(key_chase(4), some, seed);
    StepResult r;
    while (!r.done) r = ep.step({kt.lookup, ep.chain().front()});
    CHECK(r.reward.has_value() == !r.env_failure);
  }

  EnvConfig bad;
  bad.p_fail = 1.0;
  CHECK(error_kind([&] { reset(key_chase(1), bad, 0); }) == ErrorKind::InvalidInput);
  bad.p_fail = 0.0;
  bad.latency_sigma = -1.0;
  CHECK(error_kind([&] { reset(key_chase(1), bad, 0); }) == ErrorKind::InvalidInput);
}

TEST_CASE("episodes replay identically, latencies included") {
  EnvConfig cfg{1.0, 1.2, 0.1, 77};
  const KeyChaseTokens& kt = KeyChaseTokens::get();
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    Episode a = reset(key_chase(6), cfg, seed), b = reset(key_chase(6), cfg, seed);
    while (!a.done()) {
      const std::vector<TokenId> act = {kt.lookup, a.chain()[a.turns_taken() % a.chain().size()]};
      const StepResult x = a.step(act), y = b.step(act);
      CHECK(x.observation == y.observation);
      CHECK(x.latency == y.latency);
      CHECK(x.env_failure == y.env_failure);
      CHECK(x.reward == y.reward);
    }
  }
}

TEST_CASE("bandit-chat rounds") {
  TaskSpec s;
  s.h = 3;
  s.max_turns = 3;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    Episode ep = reset(s, {}, seed);
    const bool all_right = seed % 2 == 0;
    StepResult r;
    for (std::uint32_t round = 0; round < 3; ++round) {
      const TokenId p = ep.current_prompt();
      const TokenId answer = bandit_answer(p, s.num_answers);
      const TokenId reply = all_right || round != 1 ? answer : (answer + 1) % s.num_answers;
      r = ep.step({reply});
      CHECK(r.done == (round == 2));
    }
    CHECK(r.reward == (all_right ? 1.0 : 0.0));
  }
  s.max_turns = 2;
  CHECK(error_kind([&] { reset(s, {}, 0); }) == ErrorKind::InvalidInput);
}

TEST_CASE("lognormal latency") {
  EnvConfig cfg{1.5, 0.0, 0.0, 0};
  std::mt19937_64 rng(1);
  CHECK(sample_latency(cfg, rng) == std::exp(1.5));

  auto quantiles = [](double sigma) {
    EnvConfig c{2.0, sigma, 0.0, 0};
    std::mt19937_64 r(11);
    std::vector<double> xs(100000);
    for (double& x : xs) {
      x = sample_latency(c, r);
      REQUIRE(x > 0.0);
    }
    std::sort(xs.begin(), xs.end());
    return std::pair{xs[50000], xs[99000]};
  };
  double last_ratio = 0.0;
  for (double sigma : {0.5, 1.0, 2.0}) {
    const auto [p50, p99] = quantiles(sigma);
    CHECK(std::abs(p50 / std::exp(2.0) - 1.0) < 0.02);
    CHECK(p99 / p50 > last_ratio);
    last_ratio = p99 / p50;
  }
}

TEST_CASE("task specs from JSON") {
  const std::string path = "asyncrl_test_tasks.json";
  {
    std::ofstream(path) << R"([{"id":"kc","family":"key-chase","h":3,"max_turns":8},
                              {"id":"bc","family":"bandit-chat","h":1,"max_turns":1}])";
  }
  const auto specs = load_task_specs(path);
  REQUIRE(specs.size() == 2);
  CHECK(specs[0].family == TaskFamily::KeyChase);
  CHECK(specs[0].h == 3);
  CHECK(specs[1].id == "bc");
  { std::ofstream(path) << R"([{"id":"kc","family":"key-chase","h":3,"max_turns":2}])"; }
  CHECK(error_kind([&] { load_task_specs(path); }) == ErrorKind::Config);
  { std::ofstream(path) << "[{"; }
  CHECK(error_kind([&] { load_task_specs(path); }) == ErrorKind::Config);
  std::remove(path.c_str());
  CHECK(error_kind([&] { load_task_specs(path); }) == ErrorKind::Io);
}
