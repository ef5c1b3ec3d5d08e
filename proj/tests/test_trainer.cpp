#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "asyncrl/trainer.hpp"
#include "support.hpp"

using namespace arl;

namespace {

Trajectory bandit(const PolicyWeights& w, std::uint64_t id, std::uint64_t group, TokenId prompt, TokenId reply,
                  double reward, Version v = 0) {
  Trajectory t;
  t.id = id;
  t.group = group;
  t.messages = {Message{Role::Task, {prompt}, {}, {}, 0},
                Message{Role::Model, {reply}, {logprob_train(w, prompt % w.context_dim, reply)}, {}, v}};
  t.versions = {v};
  t.reward = reward;
  return t;
}

Trajectory versioned(std::uint64_t id, Version w0) {
  Trajectory t;
  t.id = id;
  t.versions = {w0, w0 + 1};
  return t;
}

TrainerOptions options(Algorithm a, std::size_t G, double lr = 0.5) {
  TrainerOptions o;
  o.algorithm = a;
  o.hp.group_size = G;
  o.hp.batch_size = G;
  o.learning_rate = lr;
  return o;
}

}  // namespace

TEST_CASE("staleness filter") {
  auto kept = [](Version w0, Version current, std::uint64_t tau) {
    return filter_staleness({versioned(1, w0)}, current, tau).size() == 1;
  };
  CHECK(kept(7, 10, 3));
  CHECK_FALSE(kept(6, 10, 3));
  CHECK(kept(0, 1000, kUnboundedStaleness));
  CHECK(kept(5, 5, 0));
  CHECK_FALSE(kept(4, 5, 0));
}

TEST_CASE("group pad and drop") {
  const std::vector<int> g = {0, 1, 2, 3, 4, 5, 6, 7};
  const bool five[] = {true, false, true, true, false, true, false, true};
  const auto padded = regroup<int>(g, five, 8);
  REQUIRE(padded.has_value());
  CHECK(*padded == std::vector<int>{0, 2, 3, 5, 7, 0, 2, 3});
  const bool four[] = {true, false, true, false, false, true, false, true};
  CHECK_FALSE(regroup<int>(g, four, 8).has_value());
  const bool all[] = {true, true, true, true, true, true, true, true};
  CHECK(*regroup<int>(g, all, 8) == g);
}

TEST_CASE("batch filtering counts every trajectory once") {
  TrainerOptions o = options(Algorithm::IcePop, 4);
  o.hp.tau_staleness = 1;
  Trainer tr(PolicyWeights(4, 4), o);
  tr.store().publish(tr.weights());
  tr.store().publish(tr.weights());
  std::vector<Trajectory> batch;
  const PolicyWeights& w = tr.weights();
  for (std::uint64_t i = 0; i < 4; ++i) batch.push_back(bandit(w, i, 0, 1, 1, 1.0, 2));       // all fresh
  for (std::uint64_t i = 0; i < 4; ++i) batch.push_back(bandit(w, 4 + i, 1, 1, 1, 1.0, i == 0 ? 0 : 1));
  for (std::uint64_t i = 0; i < 4; ++i) batch.push_back(bandit(w, 8 + i, 2, 1, 1, 1.0, i < 2 ? 0 : 2));
  batch[3].env_failure = true;
  batch[3].reward.reset();
  BatchCounts c;
  const auto kept = tr.filter_batch(batch, c);
  CHECK(c.consumed == 12);
  CHECK(c.dropped_stale == 3);
  CHECK(c.dropped_env == 1);
  CHECK(c.dropped_group == 2);
  CHECK(c.trained == 6);
  CHECK(c.padded == 2);
  CHECK(kept.size() == 8);
  CHECK(c.consumed == c.trained + c.dropped_stale + c.dropped_env + c.dropped_group);
}

TEST_CASE("zero advantage leaves the weights alone") {
  Trainer tr(PolicyWeights(4, 4), options(Algorithm::IcePop, 4));
  std::vector<Trajectory> batch;
  for (std::uint64_t i = 0; i < 4; ++i) batch.push_back(bandit(tr.weights(), i, 0, i, i, 1.0));
  const PolicyWeights before = tr.weights();
  const StepReport rep = tr.train_step(batch, Algorithm::IcePop);
  CHECK(tr.weights().logits == before.logits);
  CHECK(rep.masked_tokens == 4);
  CHECK(tr.updates() == 1);
}

TEST_CASE("distilling a student into itself is a fixed point") {
  PolicyWeights start(4, 4);
  for (std::size_t i = 0; i < start.logits.size(); ++i) start.logits[i] = std::sin(double(i));
  Trainer self(start, options(Algorithm::Distill, 1));
  std::vector<Trajectory> batch;
  for (std::uint64_t i = 0; i < 8; ++i) {
    Trajectory t = bandit(start, i, i, static_cast<TokenId>(i % 4), static_cast<TokenId>((i * 3) % 4), 0.0);
    t.messages[1].teacher_logprobs = t.messages[1].logprobs;
    batch.push_back(t);
  }
  self.train_step(batch, Algorithm::Distill);
  for (std::size_t i = 0; i < start.logits.size(); ++i)
    CHECK(std::abs(self.weights().logits[i] - start.logits[i]) <= 1e-12);

  batch[0].messages[1].teacher_logprobs.clear();
  CHECK(error_kind([&] { self.train_step(batch, Algorithm::Distill); }) == ErrorKind::InvalidBatch);
}

TEST_CASE("a small icepop step lowers the loss") {
  for (double lr : {0.01, 0.05}) {
    Trainer tr(PolicyWeights(4, 4), options(Algorithm::IcePop, 2, lr));
    const std::vector<Trajectory> batch = {bandit(tr.weights(), 0, 0, 1, 2, 1.0), bandit(tr.weights(), 1, 0, 1, 3, 0.0)};
    const double before = tr.evaluate_loss(batch, Algorithm::IcePop);
    tr.train_step(batch, Algorithm::IcePop);
    CHECK(tr.evaluate_loss(batch, Algorithm::IcePop) < before);
    CHECK(tr.weights().at(1, 2) > 0.0);
    CHECK(tr.weights().at(1, 3) < 0.0);
  }
}

TEST_CASE("dsis steps follow the centered advantage") {
  Trainer tr(PolicyWeights(4, 4), options(Algorithm::Dsis, 2, 0.1));
  const std::vector<Trajectory> batch = {bandit(tr.weights(), 0, 0, 2, 0, 1.0), bandit(tr.weights(), 1, 0, 2, 1, 0.0)};
  tr.train_step(batch, Algorithm::Dsis);
  CHECK(tr.weights().at(2, 0) > tr.weights().at(2, 1));
}

TEST_CASE("publishing every K updates resets the optimizer") {
  TrainerOptions o = options(Algorithm::IcePop, 2, 0.1);
  o.hp.k_sync = 4;
  Trainer tr(PolicyWeights(4, 4), o);
  std::vector<std::size_t> published_at;
  Version last = 0;
  for (std::size_t step = 1; step <= 12; ++step) {
    // Rollouts come from the latest published policy, as in a real run.
    const auto pub = tr.store().latest();
    const Version pv = tr.store().latest_version();
    const std::vector<Trajectory> batch = {bandit(*pub, 2 * step, step, 1, 2, 1.0, pv),
                                           bandit(*pub, 2 * step + 1, step, 1, 3, 0.0, pv)};
    tr.train_step(batch, Algorithm::IcePop);
    if (auto v = tr.maybe_sync()) {
      published_at.push_back(step);
      CHECK(*v == last + 1);
      last = *v;
      CHECK(std::all_of(tr.optimizer().momentum.begin(), tr.optimizer().momentum.end(),
                        [](double m) { return m == 0.0; }));
      CHECK(tr.store().latest()->logits == tr.weights().logits);
    } else {
      CHECK(std::any_of(tr.optimizer().momentum.begin(), tr.optimizer().momentum.end(),
                        [](double m) { return m != 0.0; }));
    }
  }
  CHECK(published_at == std::vector<std::size_t>{4, 8, 12});
}

TEST_CASE("consume filters, trains and syncs") {
  Trainer tr(PolicyWeights(4, 4), options(Algorithm::IcePop, 2, 0.1));
  const std::vector<Trajectory> batch = {bandit(tr.weights(), 0, 0, 1, 2, 1.0), bandit(tr.weights(), 1, 0, 1, 3, 0.0)};
  const auto res = tr.consume(batch);
  CHECK(res.step.has_value());
  CHECK(res.published == Version{1});
  CHECK(res.counts.trained == 2);

  std::vector<Trajectory> failed = batch;
  for (auto& t : failed) {
    t.env_failure = true;
    t.reward.reset();
  }
  const auto none = tr.consume(failed);
  CHECK_FALSE(none.step.has_value());
  CHECK_FALSE(none.published.has_value());
  CHECK(none.counts.dropped_env == 2);
  CHECK(tr.updates() == 1);
}

TEST_CASE("algorithm names") {
  for (Algorithm a : {Algorithm::IcePop, Algorithm::Dsis, Algorithm::Distill})
    CHECK(algorithm_from_string(to_string(a)) == a);
  CHECK(error_kind([] { algorithm_from_string("ppo"); }) == ErrorKind::Config);
  TrainerOptions bad;
  bad.learning_rate = 0.0;
  CHECK(error_kind([&] { Trainer(PolicyWeights(2, 2), bad); }) == ErrorKind::Config);
}
