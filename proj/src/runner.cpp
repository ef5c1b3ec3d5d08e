#include <algorithm>
#include <cmath>
#include <deque>
#include <filesystem>
#include <fstream>
#include <queue>
#include <set>
#include <sstream>

#include <json.hpp>

#include "asyncrl/error.hpp"
#include "asyncrl/experiment.hpp"
#include "asyncrl/router.hpp"
#include "asyncrl/tito_gateway.hpp"

namespace arl {

using json = nlohmann::ordered_json;

double expected_reward(const PolicyWeights& w, const TaskSpec& task, const InferPerturbation& pert) {
  double p = 0.0;
  for (TokenId c = 0; c < task.num_prompts; ++c) {
    const TokenId a = bandit_answer(c, task.num_answers);
    p += std::exp(logprob_infer(w, static_cast<ContextId>(c % w.context_dim), a, pert));
  }
  p /= static_cast<double>(task.num_prompts);
  return std::pow(p, static_cast<double>(task.bandit_rounds()));
}

double optimal_reward(const TaskSpec& task) {
  // Per prompt, the best reply is whichever one the verifier accepts; a
  // round succeeds with probability 1 if any reply is accepted.
  double per_round = 0.0;
  for (TokenId c = 0; c < task.num_prompts; ++c) {
    double best = 0.0;
    for (TokenId a = 0; a < task.num_answers; ++a)
      if (a == bandit_answer(c, task.num_answers)) best = 1.0;
    per_round += best;
  }
  per_round /= static_cast<double>(task.num_prompts);
  return std::pow(per_round, static_cast<double>(task.bandit_rounds()));
}

PolicyWeights make_teacher(const TaskSpec& task, double strength) {
  PolicyWeights t(task.num_prompts, task.num_answers);
  for (ContextId c = 0; c < task.num_prompts; ++c)
    for (TokenId a = 0; a < task.num_answers; ++a) {
      const double noise = unit_interval(mix64(0x7eac4e5ULL ^ (c * 1000003ULL + a))) - 0.5;
      t.at(c, a) = noise + (a == bandit_answer(c, task.num_answers) ? strength : 0.0);
    }
  return t;
}

double heldout_kl(const PolicyWeights& student, const PolicyWeights& teacher, const TaskSpec& task) {
  double total = 0.0;
  for (TokenId p = task.num_prompts; p < 2 * task.num_prompts; ++p) {
    const auto ctx = static_cast<ContextId>(p % student.context_dim);
    const auto ls = log_softmax(student.row(ctx));
    const auto lt = log_softmax(teacher.row(ctx));
    for (std::size_t a = 0; a < ls.size(); ++a) total += std::exp(lt[a]) * (lt[a] - ls[a]);
  }
  return total / static_cast<double>(task.num_prompts);
}

namespace {

enum class EventKind { EnvResult, TrainDone, Tick, Kill };

struct Event {
  double time;
  std::uint64_t seq;
  EventKind kind;
  std::uint64_t rollout = 0;
  std::uint32_t attempt = 0;
};

struct Later {
  bool operator()(const Event& a, const Event& b) const {
    return a.time != b.time ? a.time > b.time : a.seq > b.seq;
  }
};

struct Rollout {
  std::uint64_t id = 0;
  std::uint64_t group = 0;
  std::uint32_t attempt = 0;
  std::string service;
  std::optional<Episode> episode;
  std::vector<TokenId> prompt;
  std::vector<TokenId> stream;
  std::uint32_t model_turns = 0;
  std::uint32_t records = 0;
  StepResult pending;
  bool finished = false;
};

constexpr std::uint64_t kGroupSalt = 0x6a09e667f3bcc909ULL;
constexpr std::uint64_t kRolloutSalt = 0xbb67ae8584caa73bULL;

json counts_json(const BatchCounts& c) {
  json j;
  j["consumed"] = c.consumed;
  j["trained"] = c.trained;
  j["dropped_stale"] = c.dropped_stale;
  j["dropped_env"] = c.dropped_env;
  j["dropped_group"] = c.dropped_group;
  j["padded"] = c.padded;
  return j;
}

class Simulation {
 public:
  explicit Simulation(const ExperimentConfig& cfg)
      : cfg_(cfg),
        trainer_(PolicyWeights(cfg.task.num_prompts, cfg.task.num_answers),
                 TrainerOptions{cfg.hp, cfg.algorithm, cfg.learning_rate, cfg.momentum}),
        orch_(OrchestratorOptions{cfg.hp.batch_size, cfg.heartbeat_interval, cfg.heartbeat_timeout}) {
    for (const ServiceConfig& s : cfg_.services)
      orch_.register_service(TaskServiceRegistration{s.id, s.family, s.ratio, s.max_concurrency}, 0.0);
    for (RankId r = 0; r < cfg_.router_ranks; ++r) router_.add_rank(r);
    if (cfg_.algorithm == Algorithm::Distill) teacher_ = make_teacher(cfg_.task, cfg_.teacher_strength);
  }

  RunMetrics run() {
    m_.mode = cfg_.mode;
    m_.algorithm = cfg_.algorithm;
    m_.optimal_reward = optimal_reward(cfg_.task);
    record_publish(0, 0.0);
    m_.initial_expected_reward = m_.publishes.front().expected_reward;

    if (cfg_.kill_fraction > 0.0) push(cfg_.kill_time, EventKind::Kill);
    push(cfg_.heartbeat_interval, EventKind::Tick);
    try_dispatch();

    while (!queue_.empty()) {
      const Event ev = queue_.top();
      queue_.pop();
      now_ = ev.time;
      if (ev.kind != EventKind::Tick) --work_events_;
      switch (ev.kind) {
        case EventKind::EnvResult: on_env_result(ev); break;
        case EventKind::TrainDone: on_train_done(); break;
        case EventKind::Tick: on_tick(); break;
        case EventKind::Kill: on_kill(); break;
      }
    }
    if (trainer_.updates() < cfg_.steps)
      fail(ErrorKind::InvalidState, "run stalled at update " + std::to_string(trainer_.updates()) + " of " +
                                        std::to_string(cfg_.steps) + " (virtual time " +
                                        std::to_string(now_) + ")");
    finish_metrics();
    return std::move(m_);
  }

 private:
  void push(double t, EventKind kind, std::uint64_t rollout = 0, std::uint32_t attempt = 0) {
    queue_.push(Event{t, seq_++, kind, rollout, attempt});
    if (kind != EventKind::Tick) ++work_events_;
  }

  std::size_t outstanding() const { return dispatched_ - completed_; }

  bool budget_reached() const { return trainer_.updates() + (busy_ ? 1 : 0) >= cfg_.steps; }

  bool admit() const {
    const std::size_t G = cfg_.hp.group_size, B = cfg_.hp.batch_size;
    if (budget_reached()) return false;
    if (dispatched_ + G > (cfg_.steps + skipped_) * B) return false;
    if (cfg_.mode == RunMode::Sync)
      return !busy_ && batches_.empty() && dispatched_ + G <= (taken_ + 1) * B;
    if (cfg_.hp.tau_staleness == kUnboundedStaleness) return true;
    const std::size_t v = trainer_.store().latest_version();
    const std::size_t window = (v + cfg_.hp.tau_staleness + 1) * cfg_.hp.k_sync + skipped_;
    return dispatched_ + G <= window * B;
  }

  std::optional<std::string> pick_service(std::size_t needed) {
    try {
      return orch_.next_dispatch(now_, cfg_.task.family, needed);
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::Unavailable) throw;
      // Every registered service being gone is fatal; transient suspicion is not.
      bool any_live = false;
      for (const auto& s : orch_.services())
        if (!killed_.count(s.id)) any_live = true;
      if (!any_live && outstanding() > 0)
        fail(ErrorKind::Unavailable, "no live task service left for " + std::to_string(outstanding()) +
                                         " outstanding rollouts");
      return std::nullopt;
    }
  }

  void try_dispatch() {
    while (orch_.has_retry()) {
      const auto retry = orch_.peek_retry();
      auto svc = pick_service(1);
      if (!svc) break;
      orch_.pop_retry();
      orch_.assign(*svc, retry.rollout, retry.family);
      Rollout& r = rollouts_.at(retry.rollout);
      r.service = *svc;
      ++retries_;
      start_attempt(r);
    }
    while (admit()) {
      auto svc = pick_service(cfg_.hp.group_size);
      if (!svc) break;
      const std::uint64_t group = next_group_++;
      std::vector<std::uint64_t> ids;
      for (std::size_t i = 0; i < cfg_.hp.group_size; ++i) {
        const std::uint64_t id = next_rollout_++;
        orch_.assign(*svc, id, cfg_.task.family);
        Rollout& r = rollouts_[id];
        r.id = id;
        r.group = group;
        r.service = *svc;
        ids.push_back(id);
      }
      dispatched_ += ids.size();
      for (std::uint64_t id : ids) start_attempt(rollouts_.at(id));
      last_progress_ = now_;
    }
  }

  void start_attempt(Rollout& r) {
    ++r.attempt;
    gateway_.register_trajectory(r.id);
    const EnvConfig env{cfg_.latency_mu, cfg_.latency_sigma, cfg_.p_fail,
                        mix_seed(cfg_.seed ^ kRolloutSalt, mix_seed(r.id, r.attempt))};
    r.episode.emplace(reset(cfg_.task, env, mix_seed(cfg_.seed ^ kGroupSalt, r.group)));
    r.prompt = r.episode->initial_observation();
    r.stream = r.prompt;
    r.model_turns = 0;
    r.records = 0;
    model_turn(r);
  }

  void model_turn(Rollout& r) {
    const auto w = trainer_.store().latest();
    const auto ctx = static_cast<ContextId>(r.stream.back() % w->context_dim);
    const std::uint64_t seed =
        mix_seed(mix_seed(cfg_.seed, r.id), mix_seed(r.attempt, r.model_turns));
    const SampledToken s = sample_action(*w, ctx, seed, cfg_.perturbation);
    router_.prefill_cost(r.id, r.stream.size());
    gateway_.record_generation(TokenRecord{r.id, r.records++, {s.token}, {s.lp_infer}, w->version, Role::Model});
    ++r.model_turns;
    r.stream.push_back(s.token);
    r.pending = r.episode->step({s.token});
    push(now_ + cfg_.generation_time + r.pending.latency, EventKind::EnvResult, r.id, r.attempt);
  }

  void on_env_result(const Event& ev) {
    Rollout& r = rollouts_.at(ev.rollout);
    // Work from a superseded attempt or a stopped service is lost.
    if (ev.attempt != r.attempt || r.finished || killed_.count(r.service)) return;
    if (orch_.service_of(r.id) != r.service) return;
    const StepResult res = r.pending;
    gateway_.record_generation(TokenRecord{r.id, r.records++, res.observation, {}, 0, Role::Environment});
    if (!res.done) {
      r.stream.insert(r.stream.end(), res.observation.begin(), res.observation.end());
      model_turn(r);
      return;
    }
    r.finished = true;
    ++completed_;
    last_progress_ = now_;
    Trajectory t = standardize(RawTaskOutput{r.id, r.group, cfg_.task.family, r.prompt, r.model_turns,
                                             res.reward, res.env_failure},
                               gateway_);
    if (teacher_) annotate_teacher(t);
    r.episode.reset();
    // A group is handed over only once all of its members are back, in
    // member order, so threshold batches never split a group.
    auto& done = finished_groups_[r.group];
    done.push_back(std::move(t));
    if (done.size() == cfg_.hp.group_size) {
      std::sort(done.begin(), done.end(), [](const Trajectory& a, const Trajectory& b) { return a.id < b.id; });
      for (Trajectory& member : done)
        if (auto batch = orch_.submit_trajectory(std::move(member))) batches_.push_back(std::move(*batch));
      finished_groups_.erase(r.group);
    }
    maybe_start_training();
    try_dispatch();
  }

  void annotate_teacher(Trajectory& t) const {
    std::optional<TokenId> prev;
    for (Message& m : t.messages) {
      if (m.role == Role::Model) {
        m.teacher_logprobs.clear();
        for (TokenId tok : m.tokens) {
          const auto ctx = static_cast<ContextId>(prev.value_or(0) % teacher_->context_dim);
          m.teacher_logprobs.push_back(logprob_infer(*teacher_, ctx, tok, cfg_.perturbation));
          prev = tok;
        }
      } else if (!m.tokens.empty()) {
        prev = m.tokens.back();
      }
    }
  }

  void maybe_start_training() {
    while (!busy_ && !batches_.empty() && !budget_reached()) {
      std::vector<Trajectory> batch = std::move(batches_.front());
      batches_.pop_front();
      BatchCounts c;
      std::vector<Trajectory> kept = trainer_.filter_batch(batch, c);
      m_.counts += c;
      ++taken_;
      json j;
      j["event"] = "batch";
      j["index"] = taken_ - 1;
      j["time"] = now_;
      j["version"] = trainer_.store().latest_version();
      j["counts"] = counts_json(c);
      // Rollouts that saw a weight publish mid-episode (w_0 < w_k).
      j["spanning_versions"] = std::count_if(batch.begin(), batch.end(),
                                             [](const Trajectory& t) { return t.versions.size() > 1; });
      emit(j);
      if (kept.empty()) {
        ++skipped_;
        continue;
      }
      pending_ = std::move(kept);
      busy_ = true;
      push(now_ + cfg_.train_time, EventKind::TrainDone);
    }
  }

  void on_train_done() {
    const StepReport rep = trainer_.train_step(pending_, cfg_.algorithm);
    pending_.clear();
    busy_ = false;
    m_.busy_time += cfg_.train_time;
    m_.last_update_time = now_;
    last_progress_ = now_;
    last_batch_reward_ = rep.mean_reward;
    json j;
    j["event"] = "update";
    j["update"] = trainer_.updates();
    j["time"] = now_;
    j["loss"] = rep.loss;
    j["mean_reward"] = rep.mean_reward;
    j["model_tokens"] = rep.model_tokens;
    j["masked_tokens"] = rep.masked_tokens;
    emit(j);
    if (auto v = trainer_.maybe_sync()) record_publish(*v, now_);
    maybe_start_training();
    try_dispatch();
  }

  void on_tick() {
    for (const auto& s : orch_.services())
      if (!killed_.count(s.id)) orch_.record_heartbeat(s.id, now_);
    for (const std::string& id : orch_.sweep_unhealthy(now_)) {
      m_.deregistered.push_back(id);
      json j;
      j["event"] = "deregister";
      j["time"] = now_;
      j["service"] = id;
      emit(j);
    }
    if (cfg_.rebalance) {
      const auto moves = router_.rebalance(router_.recorded_loads());
      if (!moves.empty()) {
        json j;
        j["event"] = "rebalance";
        j["time"] = now_;
        j["moves"] = moves.size();
        j["epoch"] = router_.epoch();
        emit(j);
      }
    }
    try_dispatch();
    if (outstanding() > 0 && now_ - last_progress_ > 100.0 * cfg_.heartbeat_timeout)
      fail(ErrorKind::InvalidState, "run stalled: " + std::to_string(outstanding()) +
                                        " rollouts outstanding with no progress");
    if (work_events_ > 0 || outstanding() > 0 || orch_.has_retry())
      push(now_ + cfg_.heartbeat_interval, EventKind::Tick);
  }

  void on_kill() {
    std::vector<std::string> ids;
    for (const auto& s : orch_.services()) ids.push_back(s.id);
    std::mt19937_64 rng(mix_seed(cfg_.seed, 0x6b111ULL));
    std::shuffle(ids.begin(), ids.end(), rng);
    const auto n = static_cast<std::size_t>(std::lround(cfg_.kill_fraction * static_cast<double>(ids.size())));
    for (std::size_t i = 0; i < n && i < ids.size(); ++i) {
      killed_.insert(ids[i]);
      m_.killed.push_back(ids[i]);
    }
    std::sort(m_.killed.begin(), m_.killed.end());
    json j;
    j["event"] = "kill";
    j["time"] = now_;
    j["services"] = m_.killed;
    emit(j);
  }

  void record_publish(Version v, double t) {
    const auto w = trainer_.store().at(v);
    PublishRecord p;
    p.version = v;
    p.time = t;
    p.updates = trainer_.updates();
    p.batch_mean_reward = v == 0 ? 0.0 : last_batch_reward_;
    p.expected_reward = expected_reward(*w, cfg_.task, cfg_.perturbation);
    if (teacher_) p.kl = heldout_kl(*w, *teacher_, cfg_.task);
    m_.publishes.push_back(p);
    m_.published.push_back(*w);
    json j;
    j["event"] = "publish";
    j["version"] = v;
    j["time"] = t;
    j["updates"] = p.updates;
    j["batch_mean_reward"] = p.batch_mean_reward;
    j["expected_reward"] = p.expected_reward;
    if (p.kl) j["kl"] = *p.kl;
    emit(j);
  }

  void emit(const json& j) {
    m_.jsonl += j.dump();
    m_.jsonl += '\n';
  }

  void finish_metrics() {
    m_.updates = trainer_.updates();
    m_.end_time = now_;
    m_.utilization = m_.last_update_time > 0.0 ? m_.busy_time / m_.last_update_time : 0.0;
    m_.rollouts = orch_.accounting();
    m_.charged_prefill = router_.charged_tokens();
    m_.naive_prefill = router_.naive_tokens();
    m_.final_expected_reward = m_.publishes.back().expected_reward;

    std::ostringstream extra;
    orch_.write_metrics(extra, now_);
    router_.write_metrics(extra);
    m_.jsonl += extra.str();

    json s;
    s["event"] = "summary";
    s["mode"] = to_string(cfg_.mode);
    s["algorithm"] = to_string(cfg_.algorithm);
    s["seed"] = cfg_.seed;
    s["updates"] = m_.updates;
    s["publishes"] = m_.publishes.size() - 1;
    s["busy_time"] = m_.busy_time;
    s["last_update_time"] = m_.last_update_time;
    s["end_time"] = m_.end_time;
    s["utilization"] = m_.utilization;
    s["counts"] = counts_json(m_.counts);
    json r;
    r["dispatched"] = m_.rollouts.dispatched;
    r["submitted"] = m_.rollouts.submitted;
    r["retried_then_submitted"] = m_.rollouts.retried_then_submitted;
    r["dropped"] = m_.rollouts.dropped;
    r["in_flight"] = m_.rollouts.in_flight;
    r["requeued"] = m_.rollouts.requeued;
    r["retries"] = retries_;
    s["rollouts"] = r;
    s["charged_prefill_tokens"] = m_.charged_prefill;
    s["naive_prefill_tokens"] = m_.naive_prefill;
    s["initial_expected_reward"] = m_.initial_expected_reward;
    s["final_expected_reward"] = m_.final_expected_reward;
    s["optimal_reward"] = m_.optimal_reward;
    if (teacher_) s["final_kl"] = *m_.publishes.back().kl;
    emit(s);
  }

  const ExperimentConfig& cfg_;
  Trainer trainer_;
  Orchestrator orch_;
  Router router_;
  TitoGateway gateway_;
  std::optional<PolicyWeights> teacher_;

  std::priority_queue<Event, std::vector<Event>, Later> queue_;
  std::uint64_t seq_ = 0;
  std::size_t work_events_ = 0;
  double now_ = 0.0;
  double last_progress_ = 0.0;

  std::map<std::uint64_t, Rollout> rollouts_;
  std::uint64_t next_rollout_ = 0;
  std::uint64_t next_group_ = 0;
  std::size_t dispatched_ = 0;
  std::size_t completed_ = 0;
  std::size_t retries_ = 0;
  std::set<std::string> killed_;

  std::map<std::uint64_t, std::vector<Trajectory>> finished_groups_;
  std::deque<std::vector<Trajectory>> batches_;
  std::vector<Trajectory> pending_;
  bool busy_ = false;
  std::size_t taken_ = 0;
  std::size_t skipped_ = 0;
  double last_batch_reward_ = 0.0;

  RunMetrics m_;
};

}  // namespace

RunMetrics run_experiment(const ExperimentConfig& cfg) {
  cfg.validate();
  return Simulation(cfg).run();
}

RunMetrics run_async(ExperimentConfig cfg) {
  cfg.mode = RunMode::Async;
  return run_experiment(cfg);
}

RunMetrics run_sync(ExperimentConfig cfg) {
  cfg.mode = RunMode::Sync;
  return run_experiment(cfg);
}

std::string write_run_outputs(const ExperimentConfig& cfg, const RunMetrics& m) {
  const std::string dir = resolve_output_dir(cfg);
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) fail(ErrorKind::Io, "cannot create output directory '" + dir + "': " + ec.message());
  {
    std::ofstream out(dir + "/metrics.jsonl", std::ios::binary | std::ios::trunc);
    if (!out) fail(ErrorKind::Io, "cannot write " + dir + "/metrics.jsonl");
    out << m.jsonl;
  }
  // The summary file repeats the last metrics line, pretty-printed.
  const auto last = m.jsonl.find_last_of('\n', m.jsonl.size() - 2);
  const std::string summary_line = m.jsonl.substr(last == std::string::npos ? 0 : last + 1);
  std::ofstream out(dir + "/summary.json", std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorKind::Io, "cannot write " + dir + "/summary.json");
  out << json::parse(summary_line).dump(2) << '\n';
  return dir;
}

}  // namespace arl
