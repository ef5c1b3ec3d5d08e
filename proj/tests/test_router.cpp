#include <doctest.h>

#include <map>
#include <random>
#include <sstream>

#include <json.hpp>

#include "asyncrl/router.hpp"
#include "support.hpp"

using namespace arl;

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  std::uint64_t z = x + 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

std::vector<std::uint64_t> probe_ids(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<std::uint64_t> ids(n);
  for (auto& id : ids) id = rng();
  return ids;
}

void add_ranks(Router& r, std::uint32_t n) {
  for (RankId i = 0; i < n; ++i) r.add_rank(i);
}

}  // namespace

TEST_CASE("ring hash test vectors") {
  CHECK(ring_hash(0, 0) == 0xa706dd2f4d197e6fULL);
  CHECK(ring_hash(1, 0) == 0x08b4fda8c892b50eULL);
  CHECK(ring_hash(42, 0x5eed5eedULL) == 0x59841bc36a10f154ULL);
  CHECK(ring_hash(0xdeadbeefULL, 7) == 0x03b1802eab8d5742ULL);
  for (std::uint64_t k : probe_ids(100, 1)) CHECK(ring_hash(k, 99) == splitmix64(k ^ splitmix64(99)));
}

TEST_CASE("routing is sticky and uniform") {
  Router empty;
  CHECK(error_kind([&] { empty.route(1); }) == ErrorKind::Unavailable);

  Router one;

  add_ranks(one, 1);
  for (std::uint64_t id : probe_ids(1000, 2)) CHECK(one.route(id) == 0);

  Router r;

  add_ranks(r, 4);
  const auto ids = probe_ids(10000, 3);
  std::map<RankId, int> count;
  for (std::uint64_t id : ids) {
    const RankId first = r.route(id);
    ++count[first];
    for (int i = 0; i < 100 && id == ids.front(); ++i) CHECK(r.route(id) == first);
  }
  REQUIRE(count.size() == 4);
  for (const auto& [rank, n] : count) {
    CHECK(n / 10000.0 >= 0.15);
    CHECK(n / 10000.0 <= 0.35);
  }
}

TEST_CASE("membership changes remap minimally") {
  Router r;
  add_ranks(r, 4);
  const auto ids = probe_ids(10000, 4);
  std::vector<RankId> before;
  for (auto id : ids) before.push_back(r.route(id));
  const auto epoch = r.epoch();

  const double added = r.add_rank(4, ids);
  CHECK(r.epoch() > epoch);
  CHECK(added >= 0.10);
  CHECK(added <= 0.30);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const RankId now = r.route(ids[i]);
    if (now != before[i]) CHECK(now == 4);
  }

  std::vector<RankId> five;
  for (auto id : ids) five.push_back(r.route(id));
  const double removed = r.remove_rank(2, ids);
  std::size_t moved = 0;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const RankId now = r.route(ids[i]);
    if (five[i] != 2) CHECK(now == five[i]);
    else CHECK(now != 2);
    moved += now != five[i];
  }
  CHECK(removed == doctest::Approx(double(moved) / double(ids.size())));

  r.add_rank(2);
  for (std::size_t i = 0; i < ids.size(); ++i) CHECK(r.route(ids[i]) == five[i]);

  CHECK(error_kind([&] { r.add_rank(2); }) == ErrorKind::Conflict);
  CHECK(error_kind([&] { r.remove_rank(9); }) == ErrorKind::NotFound);
}

TEST_CASE("rebalancing") {
  Router r;
  add_ranks(r, 2);
  CHECK(r.rebalance({{0, 10.0}, {1, 10.0}}).empty());
  const auto epoch = r.epoch();
  const auto moves = r.rebalance({{0, 100.0}, {1, 0.0}});
  REQUIRE_FALSE(moves.empty());
  CHECK(moves.size() <= 4);
  for (const auto& m : moves) {
    CHECK(m.from == 0);
    CHECK(m.to == 1);
  }
  CHECK(r.epoch() > epoch);
  CHECK(error_kind([&] { r.rebalance({{0, 1.0}}); }) == ErrorKind::InvalidInput);
}

TEST_CASE("rebalancing a static workload never worsens the imbalance") {
  Router r;
  add_ranks(r, 4);
  std::mt19937_64 rng(6);
  for (std::uint64_t id : probe_ids(2000, 5)) r.record_load(id, 1.0 + double(rng() % 3) * (id % 7 == 0 ? 20.0 : 1.0));
  auto ratio = [&] {
    const auto loads = r.recorded_loads();
    double lo = 1e300, hi = 0.0;
    for (const auto& [k, v] : loads) lo = std::min(lo, v), hi = std::max(hi, v);
    return hi / lo;
  };
  double last = ratio();
  for (int call = 0; call < 20; ++call) {
    r.rebalance(r.recorded_loads());
    const double now = ratio();
    CHECK(now <= last + 1e-9);
    last = now;
  }
}

TEST_CASE("incremental prefill") {
  Router r;
  add_ranks(r, 2);
  CHECK(r.prefill_cost(42, 100) == 100);
  CHECK(r.prefill_cost(42, 150) == 50);
  CHECK(error_kind([&] { r.prefill_cost(42, 120); }) == ErrorKind::InvalidInput);
  CHECK(r.cached_rank(42) == r.route(42));

  // Load every rollout cached on rank 0 so a rebalance has to move segments.
  const auto ids = probe_ids(200, 3);
  std::vector<RankId> before;
  for (auto id : ids) {
    r.prefill_cost(id, 100);
    before.push_back(r.route(id));
    if (before.back() == 0) r.record_load(id, 10.0);
  }
  std::map<RankId, double> loads = r.recorded_loads();
  loads[1] = 0.0;
  REQUIRE_FALSE(r.rebalance(loads).empty());
  std::size_t moved = 0;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const bool was_moved = r.route(ids[i]) != before[i];
    moved += was_moved;
    CHECK(r.prefill_cost(ids[i], 150) == (was_moved ? 150u : 50u));
    CHECK(r.cached_rank(ids[i]) == r.route(ids[i]));
  }
  CHECK(moved > 0);
}

TEST_CASE("telescoping prefill for an unmoved rollout") {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 50; ++trial) {
    Router r;
    add_ranks(r, 3);
    const std::uint64_t id = rng();
    std::uint64_t total = 0, charged = 0, naive = 0;
    for (int turn = 0; turn < 20; ++turn) {
      total += 1 + rng() % 500;
      charged += r.prefill_cost(id, total);
      naive += total;
    }
    CHECK(charged == total);
    CHECK(r.naive_tokens() == naive);
    CHECK(r.charged_tokens() == charged);
  }
}

TEST_CASE("a rollout is cached on at most one rank") {
  Router r;
  add_ranks(r, 3);
  const auto ids = probe_ids(300, 8);
  for (auto id : ids) r.prefill_cost(id, 10);
  r.add_rank(3);
  for (auto id : ids) r.prefill_cost(id, 20);
  for (auto id : ids) CHECK(r.cached_rank(id) == r.route(id));

  std::ostringstream out;
  r.write_metrics(out);
  const auto j = nlohmann::json::parse(out.str());
  CHECK(j["charged_tokens"] == r.charged_tokens());
  CHECK(j["naive_tokens"] == r.naive_tokens());
  CHECK(j.contains("epoch"));
  CHECK(j.contains("remap_events"));
}
