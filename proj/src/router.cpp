#include "asyncrl/router.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <ostream>
#include <string>

#include <json.hpp>

#include "asyncrl/error.hpp"
#include "asyncrl/policy_sim.hpp"

namespace arl {

std::uint64_t ring_hash(std::uint64_t key, std::uint64_t seed) noexcept {
  return mix64(key ^ mix64(seed));
}

Router::Router(RouterOptions opts) : opts_(opts), ring_(std::make_shared<const Ring>()) {
  if (opts_.vnodes == 0) fail(ErrorKind::InvalidInput, "router needs at least one virtual node per rank");
  if (!(opts_.imbalance_bound >= 1.0))
    fail(ErrorKind::InvalidInput, "imbalance bound must be >= 1");
}

std::shared_ptr<const Router::Ring> Router::snapshot() const {
  std::lock_guard lock(mu_);
  return ring_;
}

void Router::rebuild_locked() {
  auto next = std::make_shared<Ring>();
  next->epoch = ring_->epoch + 1;
  for (const auto& [rank, points] : base_points_)
    for (std::uint64_t p : points) next->owner[p] = rank;
  for (const auto& [p, rank] : overrides_) next->owner[p] = rank;
  ring_ = std::move(next);
  ++remap_events_;
}

std::uint64_t Router::point_for(const Ring& ring, std::uint64_t rollout) const {
  if (ring.owner.empty()) fail(ErrorKind::Unavailable, "router has no ranks");
  auto it = ring.owner.lower_bound(ring_hash(rollout, opts_.seed));
  if (it == ring.owner.end()) it = ring.owner.begin();
  return it->first;
}

RankId Router::route_in(const Ring& ring, std::uint64_t rollout) const {
  return ring.owner.at(point_for(ring, rollout));
}

namespace {

double changed_fraction(std::span<const std::uint64_t> probe,
                        const std::vector<RankId>& before,
                        const std::vector<RankId>& after) {
  if (probe.empty()) return 0.0;
  std::size_t moved = 0;
  for (std::size_t i = 0; i < probe.size(); ++i) moved += before[i] != after[i];
  return static_cast<double>(moved) / static_cast<double>(probe.size());
}

}  // namespace

double Router::add_rank(RankId rank, std::span<const std::uint64_t> probe) {
  std::lock_guard lock(mu_);
  if (base_points_.count(rank)) fail(ErrorKind::Conflict, "rank " + std::to_string(rank) + " already present");
  std::vector<RankId> before;
  if (!ring_->owner.empty())
    for (auto id : probe) before.push_back(route_in(*ring_, id));
  std::vector<std::uint64_t> points;
  points.reserve(opts_.vnodes);
  for (std::uint32_t v = 0; v < opts_.vnodes; ++v)
    points.push_back(ring_hash((static_cast<std::uint64_t>(rank) << 32) | v,
                               opts_.seed ^ 0x7a11ULL));
  base_points_[rank] = std::move(points);
  segment_load_.clear();
  rebuild_locked();
  if (before.empty()) return probe.empty() ? 0.0 : 1.0;
  std::vector<RankId> after;
  for (auto id : probe) after.push_back(route_in(*ring_, id));
  return changed_fraction(probe, before, after);
}

double Router::remove_rank(RankId rank, std::span<const std::uint64_t> probe) {
  std::lock_guard lock(mu_);
  auto it = base_points_.find(rank);
  if (it == base_points_.end()) fail(ErrorKind::NotFound, "rank " + std::to_string(rank) + " not present");
  std::vector<RankId> before;
  for (auto id : probe) before.push_back(route_in(*ring_, id));
  for (std::uint64_t p : it->second) overrides_.erase(p);
  base_points_.erase(it);
  std::erase_if(overrides_, [&](const auto& kv) { return kv.second == rank; });
  segment_load_.clear();
  if (auto kv = kv_.find(rank); kv != kv_.end()) {
    for (const auto& [id, count] : kv->second) kv_owner_.erase(id);
    kv_.erase(kv);
  }
  rebuild_locked();
  if (ring_->owner.empty()) return probe.empty() ? 0.0 : 1.0;
  std::vector<RankId> after;
  for (auto id : probe) after.push_back(route_in(*ring_, id));
  return changed_fraction(probe, before, after);
}

RankId Router::route(std::uint64_t rollout) const {
  auto ring = snapshot();
  return route_in(*ring, rollout);
}

std::uint64_t Router::epoch() const { return snapshot()->epoch; }

std::vector<RankId> Router::ranks() const {
  std::lock_guard lock(mu_);
  std::vector<RankId> out;
  for (const auto& [r, pts] : base_points_) out.push_back(r);
  return out;
}

std::size_t Router::points_owned(RankId rank) const {
  auto ring = snapshot();
  return static_cast<std::size_t>(std::count_if(
      ring->owner.begin(), ring->owner.end(), [&](const auto& kv) { return kv.second == rank; }));
}

void Router::record_load(std::uint64_t rollout, double amount) {
  std::lock_guard lock(mu_);
  segment_load_[point_for(*ring_, rollout)] += amount;
}

std::map<RankId, double> Router::recorded_loads() const {
  std::lock_guard lock(mu_);
  std::map<RankId, double> out;
  for (const auto& [r, pts] : base_points_) out[r] = 0.0;
  for (const auto& [p, load] : segment_load_) out[ring_->owner.at(p)] += load;
  return out;
}

std::vector<SegmentMove> Router::rebalance(const std::map<RankId, double>& loads) {
  std::lock_guard lock(mu_);
  for (const auto& [r, pts] : base_points_)
    if (!loads.count(r)) fail(ErrorKind::InvalidInput, "loads missing rank " + std::to_string(r));
  std::map<RankId, double> load;
  for (const auto& [r, pts] : base_points_) load[r] = loads.at(r);
  if (load.size() < 2) return {};

  std::map<std::uint64_t, RankId> owner = ring_->owner;
  std::vector<SegmentMove> moves;
  while (moves.size() < opts_.max_moves) {
    auto [lo_it, hi_it] = std::minmax_element(load.begin(), load.end(), [](const auto& a, const auto& b) {
      return a.second < b.second;
    });
    const RankId hi = hi_it->first, lo = lo_it->first;
    const double hi_load = hi_it->second, lo_load = lo_it->second;
    const double ratio = lo_load > 0.0 ? hi_load / lo_load
                                       : (hi_load > 0.0 ? std::numeric_limits<double>::infinity() : 1.0);
    if (ratio <= opts_.imbalance_bound) break;

    // Segments of the hot rank with their arc length and recorded load.
    std::vector<std::uint64_t> pts;
    double arc_total = 0.0, rec_total = 0.0;
    std::map<std::uint64_t, double> arc;
    for (auto it = owner.begin(); it != owner.end(); ++it) {
      if (it->second != hi) continue;
      const std::uint64_t prev = it == owner.begin() ? std::prev(owner.end())->first : std::prev(it)->first;
      const double a = static_cast<double>(it->first - prev) + (owner.size() == 1 ? 0x1p64 : 0.0);
      arc[it->first] = a;
      arc_total += a;
      if (auto s = segment_load_.find(it->first); s != segment_load_.end()) rec_total += s->second;
      pts.push_back(it->first);
    }
    if (pts.size() < 2) break;
    const double gap = hi_load - lo_load;
    std::optional<std::uint64_t> best;
    double best_est = 0.0;
    for (std::uint64_t p : pts) {
      double est;
      if (rec_total > 0.0) {
        auto s = segment_load_.find(p);
        est = s == segment_load_.end() ? 0.0 : hi_load * s->second / rec_total;
      } else {
        est = hi_load * arc[p] / arc_total;
      }
      // A move of the whole gap only swaps the hot and cold ranks.
      if (!(est > 0.0) || est >= gap) continue;
      if (!best || std::abs(est - gap / 2) < std::abs(best_est - gap / 2)) {
        best = p;
        best_est = est;
      }
    }
    if (!best) break;
    owner[*best] = lo;
    overrides_[*best] = lo;
    load[hi] -= best_est;
    load[lo] += best_est;
    moves.push_back({*best, hi, lo, best_est});
  }
  if (!moves.empty()) {
    // Drop overrides that point back at the base owner.
    for (const auto& [rank, points] : base_points_)
      for (std::uint64_t p : points)
        if (auto o = overrides_.find(p); o != overrides_.end() && o->second == rank) overrides_.erase(o);
    rebuild_locked();
  }
  return moves;
}

std::uint64_t Router::prefill_cost(std::uint64_t rollout, std::uint64_t new_total) {
  std::lock_guard lock(mu_);
  const std::uint64_t point = point_for(*ring_, rollout);
  const RankId rank = ring_->owner.at(point);
  std::uint64_t charge = new_total;
  auto owner = kv_owner_.find(rollout);
  if (owner != kv_owner_.end() && owner->second == rank) {
    std::uint64_t& cached = kv_[rank][rollout];
    if (new_total < cached)
      fail(ErrorKind::InvalidInput, "context shrank from " + std::to_string(cached) + " to " +
                                        std::to_string(new_total) + " tokens");
    charge = new_total - cached;
    cached = new_total;
  } else {
    if (owner != kv_owner_.end()) kv_[owner->second].erase(rollout);
    kv_[rank][rollout] = new_total;
    kv_owner_[rollout] = rank;
  }
  charged_ += charge;
  naive_ += new_total;
  segment_load_[point] += static_cast<double>(charge);
  return charge;
}

std::optional<RankId> Router::cached_rank(std::uint64_t rollout) const {
  std::lock_guard lock(mu_);
  auto it = kv_owner_.find(rollout);
  if (it == kv_owner_.end()) return std::nullopt;
  return it->second;
}

std::uint64_t Router::charged_tokens() const {
  std::lock_guard lock(mu_);
  return charged_;
}

std::uint64_t Router::naive_tokens() const {
  std::lock_guard lock(mu_);
  return naive_;
}

void Router::write_metrics(std::ostream& out) const {
  const auto loads = recorded_loads();
  std::lock_guard lock(mu_);
  nlohmann::ordered_json j;
  j["event"] = "router";
  j["epoch"] = ring_->epoch;
  nlohmann::ordered_json per_rank = nlohmann::ordered_json::object();
  for (const auto& [r, l] : loads) per_rank[std::to_string(r)] = l;
  j["rank_load"] = per_rank;
  j["remap_events"] = remap_events_;
  j["charged_tokens"] = charged_;
  j["naive_tokens"] = naive_;
  out << j.dump() << '\n';
}

}  // namespace arl
