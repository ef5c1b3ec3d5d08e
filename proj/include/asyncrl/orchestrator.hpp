#pragma once

// Central multi-task rollout orchestrator.
//
// Task services register with a target share of rollouts. Dispatch is
// deficit round robin over the healthy services: the service furthest below
// its share wins. Services report heartbeats on the virtual clock; a sweep
// deregisters services that went silent for longer than the timeout and
// requeues their in-flight rollouts for retry elsewhere. Finished rollouts
// are standardized into message lists built from TITO records and buffered
// until a batch threshold is reached.

#include <cstdint>
#include <deque>
#include <iosfwd>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "asyncrl/env_sim.hpp"
#include "asyncrl/tito_gateway.hpp"

namespace arl {

enum class Health { Healthy, Suspect, Dead };
const char* to_string(Health h) noexcept;

struct TaskServiceRegistration {
  std::string id;
  TaskFamily family = TaskFamily::BanditChat;
  double ratio = 1.0;
  std::size_t max_concurrency = 1;
  Health health = Health::Healthy;
  double last_heartbeat = 0.0;
};

struct Message {
  Role role = Role::Task;
  std::vector<TokenId> tokens;
  std::vector<double> logprobs;          // model turns only
  std::vector<double> teacher_logprobs;  // optional, model turns only
  Version version = 0;                   // model turns only
};

struct Trajectory {
  std::uint64_t id = 0;
  std::uint64_t group = 0;
  TaskFamily family = TaskFamily::BanditChat;
  std::vector<Message> messages;
  std::vector<Version> versions;  // ascending, w_0 first
  std::optional<double> reward;
  bool env_failure = false;

  Version oldest_version() const { return versions.empty() ? 0 : versions.front(); }
};

// Throws InvalidTrajectory describing the first violated invariant.
void validate_trajectory(const Trajectory& t);

// What a task service hands back besides the TITO records.
struct RawTaskOutput {
  std::uint64_t trajectory = 0;
  std::uint64_t group = 0;
  TaskFamily family = TaskFamily::BanditChat;
  std::vector<TokenId> prompt;
  std::uint32_t model_turns = 0;
  std::optional<double> reward;
  bool env_failure = false;
};

// Builds the message list strictly from the gateway's records.
Trajectory standardize(const RawTaskOutput& raw, const TitoGateway& gateway);

struct OrchestratorOptions {
  std::size_t batch_threshold = 64;
  double heartbeat_interval = 1000.0;
  double heartbeat_timeout = 3000.0;
};

enum class RolloutOutcome { InFlight, Requeued, Submitted, Dropped };

struct RolloutAccounting {
  std::size_t dispatched = 0;  // distinct rollout ids
  std::size_t in_flight = 0;
  std::size_t requeued = 0;    // waiting in the retry queue
  std::size_t submitted = 0;
  std::size_t retried_then_submitted = 0;
  std::size_t dropped = 0;
  std::map<std::string, std::size_t> drop_causes;
};

class Orchestrator {
 public:
  explicit Orchestrator(OrchestratorOptions opts = {});

  const OrchestratorOptions& options() const { return opts_; }

  void register_service(TaskServiceRegistration reg, double now = 0.0);

  // Normalized target shares of the registered services.
  std::map<std::string, double> shares() const;
  std::vector<TaskServiceRegistration> services() const;
  std::size_t dispatch_count(const std::string& service) const;

  // Deficit round robin over healthy services with a positive share,
  // optionally restricted to one family and to services with at least
  // `needed` free slots. Throws Unavailable when no healthy candidate exists;
  // returns nullopt when candidates exist but none has capacity.
  std::optional<std::string> next_dispatch(double now,
                                           std::optional<TaskFamily> family = std::nullopt,
                                           std::size_t needed = 1) const;

  // Records that `rollout` now runs on `service`.
  void assign(const std::string& service, std::uint64_t rollout, TaskFamily family);
  // Picks a service and assigns in one step.
  std::optional<std::string> dispatch(std::uint64_t rollout, TaskFamily family, double now);

  void complete(std::uint64_t rollout);
  void drop(std::uint64_t rollout, const std::string& cause);

  void record_heartbeat(const std::string& service, double now);
  // Marks silent services suspect or dead; dead ones are deregistered and
  // their in-flight rollouts move to the retry queue.
  std::vector<std::string> sweep_unhealthy(double now, std::optional<double> timeout = std::nullopt);

  struct Retry {
    std::uint64_t rollout;
    TaskFamily family;
  };
  bool has_retry() const;
  Retry peek_retry() const;
  void pop_retry();

  std::optional<std::string> service_of(std::uint64_t rollout) const;

  // Buffers `traj`; returns a FIFO batch once the threshold is reached.
  std::optional<std::vector<Trajectory>> submit_trajectory(Trajectory traj);
  std::size_t buffer_depth() const;

  RolloutAccounting accounting() const;

  // One JSON line: dispatch counts, buffer depth, deregistration events.
  void write_metrics(std::ostream& out, double now) const;

 private:
  struct ServiceState {
    TaskServiceRegistration reg;
    std::size_t dispatched = 0;
    std::set<std::uint64_t> in_flight;
  };
  struct RolloutState {
    RolloutOutcome outcome = RolloutOutcome::InFlight;
    TaskFamily family = TaskFamily::BanditChat;
    std::string service;
    std::string cause;
    std::size_t attempts = 0;
  };

  OrchestratorOptions opts_;
  mutable std::mutex mu_;
  std::map<std::string, ServiceState> services_;
  std::map<std::uint64_t, RolloutState> rollouts_;
  std::deque<Retry> retries_;
  std::vector<Trajectory> buffer_;
  std::vector<std::string> deregistrations_;
};

}  // namespace arl
