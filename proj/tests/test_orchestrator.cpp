#include <doctest.h>

#include <cmath>
#include <map>
#include <random>
#include <sstream>

#include <json.hpp>

#include "asyncrl/orchestrator.hpp"
#include "support.hpp"

using namespace arl;

namespace {

TaskServiceRegistration service(const std::string& id, double ratio, std::size_t cap = 1000) {
  TaskServiceRegistration r;
  r.id = id;
  r.ratio = ratio;
  r.max_concurrency = cap;
  return r;
}

Trajectory finished(std::uint64_t id) {
  Trajectory t;
  t.id = id;
  t.group = id;
  t.messages = {Message{Role::Task, {1}, {}, {}, 0}, Message{Role::Model, {2, 3}, {-0.1, -0.2}, {}, 0},
                Message{Role::Environment, {4}, {}, {}, 0}};
  t.versions = {0};
  t.reward = 1.0;
  return t;
}

}  // namespace

TEST_CASE("registration") {
  Orchestrator o;
  o.register_service(service("a", 0.5));
  o.register_service(service("b", 0.5));
  CHECK(error_kind([&] { o.register_service(service("a", 0.5)); }) == ErrorKind::Conflict);
  CHECK(error_kind([&] { o.register_service(service("c", -1.0)); }) == ErrorKind::InvalidInput);
  const auto shares = o.shares();
  CHECK(shares.at("a") == doctest::Approx(0.5));
  double total = 0.0;
  for (const auto& [id, s] : shares) total += s;
  CHECK(std::abs(total - 1.0) < 1e-9);
}

TEST_CASE("a zero-share service is never dispatched") {
  Orchestrator o;
  o.register_service(service("a", 1.0));
  o.register_service(service("zero", 0.0));
  for (std::uint64_t r = 0; r < 100; ++r) CHECK(o.dispatch(r, TaskFamily::BanditChat, 0.0) == "a");
  CHECK(o.dispatch_count("zero") == 0);
}

TEST_CASE("deficit round robin") {
  Orchestrator o;
  o.register_service(service("a", 0.75));
  o.register_service(service("b", 0.25));
  for (std::uint64_t r = 0; r < 4; ++r) o.dispatch(r, TaskFamily::BanditChat, 0.0);
  CHECK(o.dispatch_count("a") == 3);
  CHECK(o.dispatch_count("b") == 1);

  Orchestrator solo;
  solo.register_service(service("only", 0.3));
  for (std::uint64_t r = 0; r < 10; ++r) CHECK(solo.dispatch(r, TaskFamily::BanditChat, 0.0) == "only");

  Orchestrator many;
  const std::map<std::string, double> ratios = {{"p", 0.5}, {"q", 0.3}, {"r", 0.15}, {"s", 0.05}};
  for (const auto& [id, ratio] : ratios) many.register_service(service(id, ratio, 100000));
  for (std::uint64_t r = 1; r <= 10000; ++r) {
    many.dispatch(r, TaskFamily::BanditChat, 0.0);
    for (const auto& [id, ratio] : ratios)
      CHECK(std::abs(double(many.dispatch_count(id)) - ratio * double(r)) <= 1.0 + 1e-9);
  }
}

TEST_CASE("capacity and family filters") {
  Orchestrator o;
  o.register_service(service("a", 1.0, 2));
  CHECK(o.dispatch(1, TaskFamily::BanditChat, 0.0) == "a");
  CHECK(o.dispatch(2, TaskFamily::BanditChat, 0.0) == "a");
  CHECK_FALSE(o.dispatch(3, TaskFamily::BanditChat, 0.0).has_value());
  o.complete(1);
  CHECK(o.next_dispatch(0.0) == "a");
  CHECK(error_kind([&] { o.next_dispatch(0.0, TaskFamily::KeyChase); }) == ErrorKind::Unavailable);
}

TEST_CASE("heartbeats, sweeps and retries") {
  Orchestrator o({4, 1000.0, 3000.0});
  o.register_service(service("a", 0.5), 0.0);
  o.register_service(service("b", 0.5), 0.0);
  for (std::uint64_t r = 0; r < 6; ++r) o.dispatch(r, TaskFamily::BanditChat, 0.0);

  for (double t = 1000.0; t <= 10000.0; t += 1000.0) {
    o.record_heartbeat("a", t);
    if (t <= 2000.0) o.record_heartbeat("b", t);
    const auto dead = o.sweep_unhealthy(t);
    if (t < 6000.0) CHECK(dead.empty());
    if (t == 6000.0) CHECK(dead == std::vector<std::string>{"b"});
  }
  CHECK(o.services().size() == 1);
  CHECK(error_kind([&] { o.record_heartbeat("b", 11000.0); }) == ErrorKind::NotFound);

  std::size_t retried = 0;
  while (o.has_retry()) {
    const auto r = o.peek_retry();
    o.pop_retry();
    CHECK(o.dispatch(r.rollout, r.family, 10000.0) == "a");
    ++retried;
  }
  CHECK(retried == 3);
  o.pop_retry();
  CHECK_FALSE(o.has_retry());
  for (std::uint64_t r = 0; r < 100; ++r) CHECK(o.next_dispatch(10000.0) == "a");

  CHECK(o.sweep_unhealthy(20000.0) == std::vector<std::string>{"a"});
  CHECK(error_kind([&] { o.next_dispatch(20000.0); }) == ErrorKind::Unavailable);
}

TEST_CASE("threshold batches are FIFO and disjoint") {
  Orchestrator o({4, 1000.0, 3000.0});
  std::vector<std::vector<Trajectory>> batches;
  for (std::uint64_t i = 0; i < 9; ++i)
    if (auto b = o.submit_trajectory(finished(i))) batches.push_back(*b);
  REQUIRE(batches.size() == 2);
  CHECK(o.buffer_depth() == 1);
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t i = 0; i < 4; ++i) CHECK(batches[b][i].id == b * 4 + i);

  Trajectory broken = finished(50);
  broken.messages[1].role = Role::Environment;
  CHECK(error_kind([&] { o.submit_trajectory(broken); }) == ErrorKind::InvalidTrajectory);
  CHECK(o.buffer_depth() == 1);
}

TEST_CASE("trajectory validation") {
  CHECK_NOTHROW(validate_trajectory(finished(1)));
  auto broken = [](auto mutate) {
    Trajectory t = finished(1);
    mutate(t);
    return error_kind([&] { validate_trajectory(t); });
  };
  CHECK(broken([](Trajectory& t) { t.messages.clear(); }) == ErrorKind::InvalidTrajectory);
  CHECK(broken([](Trajectory& t) { t.messages[1].logprobs.pop_back(); }) == ErrorKind::InvalidTrajectory);
  CHECK(broken([](Trajectory& t) { t.messages[1].logprobs[0] = 0.5; }) == ErrorKind::InvalidTrajectory);
  CHECK(broken([](Trajectory& t) { t.versions = {2, 1}; }) == ErrorKind::InvalidTrajectory);
  CHECK(broken([](Trajectory& t) { t.env_failure = true; }) == ErrorKind::InvalidTrajectory);
  CHECK(broken([](Trajectory& t) { t.reward.reset(); }) == ErrorKind::InvalidTrajectory);
}

TEST_CASE("standardization reads only TITO records") {
  TitoGateway gw;
  gw.register_trajectory(3);
  gw.record_generation(TokenRecord{3, 0, {5, 6}, {-0.5, -0.25}, 0, Role::Model});
  gw.record_generation(TokenRecord{3, 1, {7}, {}, 0, Role::Environment});
  RawTaskOutput raw{3, 9, TaskFamily::BanditChat, {1, 2}, 1, 1.0, false};
  const Trajectory t = standardize(raw, gw);
  REQUIRE(t.messages.size() == 3);
  CHECK(t.messages[0].role == Role::Task);
  CHECK(t.messages[1].tokens == std::vector<TokenId>{5, 6});
  CHECK(t.messages[1].logprobs == std::vector<double>{-0.5, -0.25});
  CHECK(t.messages[2].role == Role::Environment);
  CHECK(t.group == 9);

  gw.record_generation(TokenRecord{3, 2, {8}, {-0.1}, 2, Role::Model});
  raw.model_turns = 2;
  const Trajectory synced = standardize(raw, gw);
  CHECK(synced.versions == std::vector<Version>{0, 2});
  CHECK(synced.oldest_version() == 0);

  raw.model_turns = 3;
  CHECK(error_kind([&] { standardize(raw, gw); }) == ErrorKind::Integrity);
  raw.trajectory = 44;
  CHECK(error_kind([&] { standardize(raw, gw); }) == ErrorKind::Integrity);
}

TEST_CASE("rollout accounting is conserved") {
  std::mt19937_64 rng(8);
  Orchestrator o({1000000, 1000.0, 3000.0});
  o.register_service(service("a", 0.5), 0.0);
  o.register_service(service("b", 0.5), 0.0);
  std::vector<std::uint64_t> live;
  for (std::uint64_t r = 0; r < 500; ++r) {
    o.dispatch(r, TaskFamily::BanditChat, 0.0);
    live.push_back(r);
  }
  o.record_heartbeat("a", 5000.0);
  o.sweep_unhealthy(5000.0);  // b dies with its in-flight work
  while (o.has_retry()) {
    const auto r = o.peek_retry();
    o.pop_retry();
    o.dispatch(r.rollout, r.family, 5000.0);
  }
  for (std::uint64_t r : live) {
    if (rng() % 10 == 0) o.drop(r, "env_failure");
    else o.submit_trajectory(finished(r));
  }
  const RolloutAccounting a = o.accounting();
  CHECK(a.dispatched == 500);
  CHECK(a.in_flight == 0);
  CHECK(a.requeued == 0);
  CHECK(a.submitted + a.dropped == a.dispatched);
  CHECK(a.retried_then_submitted > 0);
  CHECK(a.drop_causes.at("env_failure") == a.dropped);

  std::ostringstream out;
  o.write_metrics(out, 5000.0);
  const auto j = nlohmann::json::parse(out.str());
  CHECK(j["buffer_depth"] == a.submitted);
  CHECK(j["deregistered"] == nlohmann::json::array({"b"}));
}
