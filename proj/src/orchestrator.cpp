#include "asyncrl/orchestrator.hpp"

#include <algorithm>
#include <cmath>
#include <ostream>

#include <json.hpp>

#include "asyncrl/error.hpp"

namespace arl {

const char* to_string(Health h) noexcept {
  switch (h) {
    case Health::Healthy: return "healthy";
    case Health::Suspect: return "suspect";
    case Health::Dead: return "dead";
  }
  return "?";
}

void validate_trajectory(const Trajectory& t) {
  auto bad = [&](const std::string& what) {
    fail(ErrorKind::InvalidTrajectory, "trajectory " + std::to_string(t.id) + ": " + what);
  };
  if (t.messages.empty()) bad("empty message list");
  if (t.messages.front().role != Role::Task) bad("first message must be the task");
  bool any_model = false;
  for (std::size_t i = 1; i < t.messages.size(); ++i) {
    const Message& m = t.messages[i];
    const Role expected = (i % 2 == 1) ? Role::Model : Role::Environment;
    if (m.role != expected)
      bad("message " + std::to_string(i) + " has role " + to_string(m.role) + ", expected " +
          to_string(expected));
    if (m.role == Role::Model) {
      any_model = true;
      if (m.logprobs.size() != m.tokens.size()) bad("model message log-probs do not match tokens");
      if (!m.teacher_logprobs.empty() && m.teacher_logprobs.size() != m.tokens.size())
        bad("teacher log-probs do not match tokens");
      for (double lp : m.logprobs)
        if (!(lp <= 0.0)) bad("log-prob above zero or NaN");
    }
  }
  if (!any_model) bad("no model turn");
  for (std::size_t i = 1; i < t.versions.size(); ++i)
    if (t.versions[i] < t.versions[i - 1]) bad("weight versions not ascending");
  if (t.versions.empty()) bad("missing weight versions");
  if (t.env_failure && t.reward) bad("environment failure carries a reward");
  if (!t.env_failure && !t.reward) bad("missing reward");
}

Trajectory standardize(const RawTaskOutput& raw, const TitoGateway& gateway) {
  std::vector<TokenRecord> records;
  try {
    records = gateway.fetch_exact(raw.trajectory);
  } catch (const Error& e) {
    fail(ErrorKind::Integrity, e.what());
  }
  Trajectory t;
  t.id = raw.trajectory;
  t.group = raw.group;
  t.family = raw.family;
  t.reward = raw.reward;
  t.env_failure = raw.env_failure;
  t.messages.push_back(Message{Role::Task, raw.prompt, {}, {}, 0});
  std::uint32_t model_turns = 0;
  for (TokenRecord& r : records) {
    Message m;
    m.role = r.role;
    m.tokens = std::move(r.tokens);
    if (r.role == Role::Model) {
      ++model_turns;
      m.logprobs = std::move(r.logprobs);
      m.version = r.version;
      t.versions.push_back(r.version);
    }
    t.messages.push_back(std::move(m));
  }
  if (model_turns != raw.model_turns)
    fail(ErrorKind::Integrity, "trajectory " + std::to_string(raw.trajectory) + ": " +
                                   std::to_string(raw.model_turns) + " model turns reported, " +
                                   std::to_string(model_turns) + " recorded");
  std::sort(t.versions.begin(), t.versions.end());
  t.versions.erase(std::unique(t.versions.begin(), t.versions.end()), t.versions.end());
  return t;
}

Orchestrator::Orchestrator(OrchestratorOptions opts) : opts_(opts) {
  if (opts_.batch_threshold == 0) fail(ErrorKind::Config, "batch threshold must be at least 1");
  if (!(opts_.heartbeat_interval > 0.0) || !(opts_.heartbeat_timeout > 0.0))
    fail(ErrorKind::Config, "heartbeat interval and timeout must be positive");
}

void Orchestrator::register_service(TaskServiceRegistration reg, double now) {
  if (!(reg.ratio >= 0.0) || !std::isfinite(reg.ratio))
    fail(ErrorKind::InvalidInput, "service ratio must be a finite non-negative number");
  std::lock_guard lock(mu_);
  if (services_.count(reg.id)) fail(ErrorKind::Conflict, "service '" + reg.id + "' already registered");
  reg.health = Health::Healthy;
  reg.last_heartbeat = now;
  const std::string id = reg.id;
  services_.emplace(id, ServiceState{std::move(reg), 0, {}});
}

std::map<std::string, double> Orchestrator::shares() const {
  std::lock_guard lock(mu_);
  double total = 0.0;
  for (const auto& [id, s] : services_) total += s.reg.ratio;
  std::map<std::string, double> out;
  for (const auto& [id, s] : services_) out[id] = total > 0.0 ? s.reg.ratio / total : 0.0;
  return out;
}

std::vector<TaskServiceRegistration> Orchestrator::services() const {
  std::lock_guard lock(mu_);
  std::vector<TaskServiceRegistration> out;
  for (const auto& [id, s] : services_) out.push_back(s.reg);
  return out;
}

std::size_t Orchestrator::dispatch_count(const std::string& service) const {
  std::lock_guard lock(mu_);
  auto it = services_.find(service);
  if (it == services_.end()) fail(ErrorKind::NotFound, "unknown service '" + service + "'");
  return it->second.dispatched;
}

std::optional<std::string> Orchestrator::next_dispatch(double /*now*/, std::optional<TaskFamily> family,
                                                       std::size_t needed) const {
  std::lock_guard lock(mu_);
  std::vector<const ServiceState*> candidates;
  for (const auto& [id, s] : services_) {
    if (s.reg.health != Health::Healthy || s.reg.ratio <= 0.0) continue;
    if (family && s.reg.family != *family) continue;
    candidates.push_back(&s);
  }
  if (candidates.empty()) fail(ErrorKind::Unavailable, "no healthy task service available");
  double ratio_sum = 0.0;
  std::size_t total = 0;
  for (const ServiceState* s : candidates) {
    ratio_sum += s->reg.ratio;
    total += s->dispatched;
  }
  const ServiceState* best = nullptr;
  double best_deficit = 0.0;
  for (const ServiceState* s : candidates) {
    if (s->in_flight.size() + needed > s->reg.max_concurrency) continue;
    const double deficit = s->reg.ratio / ratio_sum * static_cast<double>(total) -
                           static_cast<double>(s->dispatched);
    // Candidates iterate in id order, so strict > keeps the first on ties.
    if (best == nullptr || deficit > best_deficit) {
      best = s;
      best_deficit = deficit;
    }
  }
  if (best == nullptr) return std::nullopt;
  return best->reg.id;
}

void Orchestrator::assign(const std::string& service, std::uint64_t rollout, TaskFamily family) {
  std::lock_guard lock(mu_);
  auto it = services_.find(service);
  if (it == services_.end()) fail(ErrorKind::NotFound, "unknown service '" + service + "'");
  if (it->second.reg.family != family)
    fail(ErrorKind::InvalidInput, "service '" + service + "' does not serve " + to_string(family));
  it->second.dispatched += 1;
  it->second.in_flight.insert(rollout);
  RolloutState& r = rollouts_[rollout];
  r.outcome = RolloutOutcome::InFlight;
  r.family = family;
  r.service = service;
  r.attempts += 1;
}

std::optional<std::string> Orchestrator::dispatch(std::uint64_t rollout, TaskFamily family, double now) {
  auto svc = next_dispatch(now, family);
  if (svc) assign(*svc, rollout, family);
  return svc;
}

void Orchestrator::complete(std::uint64_t rollout) {
  std::lock_guard lock(mu_);
  auto it = rollouts_.find(rollout);
  if (it == rollouts_.end()) return;
  if (auto s = services_.find(it->second.service); s != services_.end()) s->second.in_flight.erase(rollout);
}

void Orchestrator::drop(std::uint64_t rollout, const std::string& cause) {
  std::lock_guard lock(mu_);
  auto it = rollouts_.find(rollout);
  if (it == rollouts_.end()) fail(ErrorKind::NotFound, "unknown rollout " + std::to_string(rollout));
  if (auto s = services_.find(it->second.service); s != services_.end()) s->second.in_flight.erase(rollout);
  std::erase_if(retries_, [&](const Retry& r) { return r.rollout == rollout; });
  it->second.outcome = RolloutOutcome::Dropped;
  it->second.service.clear();
  it->second.cause = cause;
}

void Orchestrator::record_heartbeat(const std::string& service, double now) {
  std::lock_guard lock(mu_);
  auto it = services_.find(service);
  if (it == services_.end()) fail(ErrorKind::NotFound, "unknown service '" + service + "'");
  it->second.reg.last_heartbeat = now;
  it->second.reg.health = Health::Healthy;
}

std::vector<std::string> Orchestrator::sweep_unhealthy(double now, std::optional<double> timeout) {
  const double limit = timeout.value_or(opts_.heartbeat_timeout);
  std::lock_guard lock(mu_);
  std::vector<std::string> dead;
  for (auto it = services_.begin(); it != services_.end();) {
    ServiceState& s = it->second;
    const double age = now - s.reg.last_heartbeat;
    if (age > limit) {
      for (std::uint64_t r : s.in_flight) {
        rollouts_[r].outcome = RolloutOutcome::Requeued;
        rollouts_[r].service.clear();
        retries_.push_back({r, s.reg.family});
      }
      dead.push_back(it->first);
      deregistrations_.push_back(it->first);
      it = services_.erase(it);
      continue;
    }
    s.reg.health = age > opts_.heartbeat_interval ? Health::Suspect : Health::Healthy;
    ++it;
  }
  return dead;
}

bool Orchestrator::has_retry() const {
  std::lock_guard lock(mu_);
  return !retries_.empty();
}

Orchestrator::Retry Orchestrator::peek_retry() const {
  std::lock_guard lock(mu_);
  if (retries_.empty()) fail(ErrorKind::InvalidState, "retry queue is empty");
  return retries_.front();
}

void Orchestrator::pop_retry() {
  std::lock_guard lock(mu_);
  if (!retries_.empty()) retries_.pop_front();
}

std::optional<std::string> Orchestrator::service_of(std::uint64_t rollout) const {
  std::lock_guard lock(mu_);
  auto it = rollouts_.find(rollout);
  if (it == rollouts_.end() || it->second.outcome != RolloutOutcome::InFlight) return std::nullopt;
  return it->second.service;
}

std::optional<std::vector<Trajectory>> Orchestrator::submit_trajectory(Trajectory traj) {
  validate_trajectory(traj);
  std::lock_guard lock(mu_);
  if (auto it = rollouts_.find(traj.id); it != rollouts_.end()) {
    if (auto s = services_.find(it->second.service); s != services_.end())
      s->second.in_flight.erase(traj.id);
    it->second.outcome = RolloutOutcome::Submitted;
  }
  buffer_.push_back(std::move(traj));
  if (buffer_.size() < opts_.batch_threshold) return std::nullopt;
  std::vector<Trajectory> batch(std::make_move_iterator(buffer_.begin()),
                                std::make_move_iterator(buffer_.begin() +
                                                        static_cast<std::ptrdiff_t>(opts_.batch_threshold)));
  buffer_.erase(buffer_.begin(), buffer_.begin() + static_cast<std::ptrdiff_t>(opts_.batch_threshold));
  return batch;
}

std::size_t Orchestrator::buffer_depth() const {
  std::lock_guard lock(mu_);
  return buffer_.size();
}

RolloutAccounting Orchestrator::accounting() const {
  std::lock_guard lock(mu_);
  RolloutAccounting a;
  a.dispatched = rollouts_.size();
  for (const auto& [id, r] : rollouts_) {
    switch (r.outcome) {
      case RolloutOutcome::InFlight: ++a.in_flight; break;
      case RolloutOutcome::Requeued: ++a.requeued; break;
      case RolloutOutcome::Submitted:
        ++a.submitted;
        if (r.attempts > 1) ++a.retried_then_submitted;
        break;
      case RolloutOutcome::Dropped:
        ++a.dropped;
        ++a.drop_causes[r.cause];
        break;
    }
  }
  return a;
}

void Orchestrator::write_metrics(std::ostream& out, double now) const {
  std::lock_guard lock(mu_);
  nlohmann::ordered_json j;
  j["event"] = "orchestrator";
  j["time"] = now;
  nlohmann::ordered_json counts = nlohmann::ordered_json::object();
  for (const auto& [id, s] : services_) counts[id] = s.dispatched;
  j["dispatch_counts"] = counts;
  j["buffer_depth"] = buffer_.size();
  j["deregistered"] = deregistrations_;
  out << j.dump() << '\n';
}

}  // namespace arl
