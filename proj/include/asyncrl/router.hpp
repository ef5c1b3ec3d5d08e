#pragma once

// DP-aware rollout router.
//
// Rollout ids are placed on a consistent-hash ring with `vnodes` points per
// rank, so every turn of a rollout lands on the rank that already holds its
// KV prefix. Rebalancing reassigns whole ring segments (the arc ending at a
// virtual node) from the most to the least loaded rank. The KV account
// charges only the tokens a rank has not cached yet.

#include <cstdint>
#include <iosfwd>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <unordered_map>
#include <vector>

namespace arl {

using RankId = std::uint32_t;

// Seeded 64-bit ring hash. Pinned by test vectors; do not change.
std::uint64_t ring_hash(std::uint64_t key, std::uint64_t seed) noexcept;

struct RouterOptions {
  std::uint32_t vnodes = 128;
  double imbalance_bound = 1.5;
  std::size_t max_moves = 4;
  std::uint64_t seed = 0x5eed5eedULL;
};

struct SegmentMove {
  std::uint64_t point = 0;
  RankId from = 0;
  RankId to = 0;
  double estimated_load = 0.0;
};

class Router {
 public:
  explicit Router(RouterOptions opts = {});

  // Both return the fraction of `probe` ids whose rank changed.
  double add_rank(RankId rank, std::span<const std::uint64_t> probe = {});
  double remove_rank(RankId rank, std::span<const std::uint64_t> probe = {});

  RankId route(std::uint64_t rollout) const;
  std::uint64_t epoch() const;
  std::vector<RankId> ranks() const;
  std::size_t points_owned(RankId rank) const;

  // Attributes `amount` of load to the ring segment serving `rollout`.
  void record_load(std::uint64_t rollout, double amount);
  // Per-rank sums of recorded segment load under the current ownership.
  std::map<RankId, double> recorded_loads() const;

  std::vector<SegmentMove> rebalance(const std::map<RankId, double>& loads);

  // Tokens to prefill for a turn whose full context is `new_total` tokens.
  std::uint64_t prefill_cost(std::uint64_t rollout, std::uint64_t new_total);
  std::optional<RankId> cached_rank(std::uint64_t rollout) const;
  std::uint64_t charged_tokens() const;
  std::uint64_t naive_tokens() const;

  // {"epoch","ranks":{rank:load},"charged","naive","remap_events"}
  void write_metrics(std::ostream& out) const;

 private:
  struct Ring {
    std::map<std::uint64_t, RankId> owner;
    std::uint64_t epoch = 0;
  };

  std::shared_ptr<const Ring> snapshot() const;
  void rebuild_locked();
  RankId route_in(const Ring& ring, std::uint64_t rollout) const;
  std::uint64_t point_for(const Ring& ring, std::uint64_t rollout) const;

  RouterOptions opts_;
  mutable std::mutex mu_;
  std::shared_ptr<const Ring> ring_;
  std::map<RankId, std::vector<std::uint64_t>> base_points_;
  std::map<std::uint64_t, RankId> overrides_;
  std::map<std::uint64_t, double> segment_load_;
  std::map<RankId, std::unordered_map<std::uint64_t, std::uint64_t>> kv_;
  std::unordered_map<std::uint64_t, RankId> kv_owner_;
  std::uint64_t charged_ = 0;
  std::uint64_t naive_ = 0;
  std::uint64_t remap_events_ = 0;
};

}  // namespace arl
