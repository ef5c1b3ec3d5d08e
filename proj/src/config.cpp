#include <cmath>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <set>
#include <sstream>
#include <variant>

#include "asyncrl/error.hpp"
#include "asyncrl/experiment.hpp"

namespace arl {

const char* to_string(RunMode m) noexcept {
  return m == RunMode::Async ? "async" : "sync";
}

namespace {

using Value = std::variant<bool, double, std::string>;

struct Entry {
  Value value;
  int line = 0;
};

using Table = std::map<std::string, Entry>;

struct Document {
  std::map<std::string, Table> tables;  // "" holds top-level keys
  std::vector<Table> services;
};

[[noreturn]] void config_error(int line, const std::string& what) {
  fail(ErrorKind::Config, "line " + std::to_string(line) + ": " + what);
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::string strip_comment(const std::string& s) {
  bool in_str = false;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (s[i] == '"' && (i == 0 || s[i - 1] != '\\')) in_str = !in_str;
    if (s[i] == '#' && !in_str) return s.substr(0, i);
  }
  return s;
}

Value parse_value(const std::string& raw, int line) {
  if (raw.empty()) config_error(line, "missing value");
  if (raw.front() == '"') {
    if (raw.size() < 2 || raw.back() != '"') config_error(line, "unterminated string");
    std::string out;
    for (std::size_t i = 1; i + 1 < raw.size(); ++i) {
      if (raw[i] == '\\' && i + 2 < raw.size()) {
        const char c = raw[++i];
        out += c == 'n' ? '\n' : c == 't' ? '\t' : c;
      } else {
        out += raw[i];
      }
    }
    return out;
  }
  if (raw == "true") return true;
  if (raw == "false") return false;
  if (raw == "inf" || raw == "+inf") return std::numeric_limits<double>::infinity();
  std::string digits;
  for (char c : raw)
    if (c != '_') digits += c;
  char* end = nullptr;
  const double d = std::strtod(digits.c_str(), &end);
  if (end == digits.c_str() || *end != '\0') config_error(line, "cannot parse value '" + raw + "'");
  return d;
}

Document parse_document(const std::string& text) {
  Document doc;
  doc.tables[""];
  Table* current = &doc.tables[""];
  std::istringstream in(text);
  std::string raw_line;
  int line = 0;
  while (std::getline(in, raw_line)) {
    ++line;
    const std::string s = trim(strip_comment(raw_line));
    if (s.empty()) continue;
    if (s.rfind("[[", 0) == 0) {
      if (s.size() < 4 || s.substr(s.size() - 2) != "]]") config_error(line, "malformed array header");
      const std::string name = trim(s.substr(2, s.size() - 4));
      if (name != "services") config_error(line, "unknown array table [[" + name + "]]");
      doc.services.emplace_back();
      current = &doc.services.back();
      continue;
    }
    if (s.front() == '[') {
      if (s.back() != ']') config_error(line, "malformed table header");
      const std::string name = trim(s.substr(1, s.size() - 2));
      if (name.empty()) config_error(line, "empty table name");
      if (doc.tables.count(name)) config_error(line, "table [" + name + "] defined twice");
      current = &doc.tables[name];
      continue;
    }
    const auto eq = s.find('=');
    if (eq == std::string::npos) config_error(line, "expected key = value");
    const std::string key = trim(s.substr(0, eq));
    if (key.empty()) config_error(line, "missing key");
    Entry e{parse_value(trim(s.substr(eq + 1)), line), line};
    if (!current->emplace(key, e).second) config_error(line, "duplicate key '" + key + "'");
  }
  return doc;
}

// Typed accessors that consume keys so leftovers can be reported.
class Reader {
 public:
  Reader(Table table, std::string where) : table_(std::move(table)), where_(std::move(where)) {}

  bool has(const std::string& key) const { return table_.count(key) != 0; }

  void number(const std::string& key, double& out) {
    if (auto e = take(key)) {
      if (!std::holds_alternative<double>(e->value)) config_error(e->line, key + " must be a number");
      out = std::get<double>(e->value);
    }
  }

  template <typename Int>
  void count(const std::string& key, Int& out) {
    if (auto e = take(key)) {
      if (!std::holds_alternative<double>(e->value)) config_error(e->line, key + " must be a number");
      const double d = std::get<double>(e->value);
      if (!(d >= 0.0) || std::floor(d) != d || d > static_cast<double>(std::numeric_limits<Int>::max()))
        config_error(e->line, key + " must be a non-negative integer");
      out = static_cast<Int>(d);
    }
  }

  void flag(const std::string& key, bool& out) {
    if (auto e = take(key)) {
      if (!std::holds_alternative<bool>(e->value)) config_error(e->line, key + " must be true or false");
      out = std::get<bool>(e->value);
    }
  }

  void string(const std::string& key, std::string& out) {
    if (auto e = take(key)) {
      if (!std::holds_alternative<std::string>(e->value)) config_error(e->line, key + " must be a string");
      out = std::get<std::string>(e->value);
    }
  }

  template <typename T>
  void parsed(const std::string& key, T& out, const std::function<T(const std::string&)>& conv) {
    std::string s;
    std::optional<int> line;
    if (auto it = table_.find(key); it != table_.end()) line = it->second.line;
    string(key, s);
    if (!line) return;
    try {
      out = conv(s);
    } catch (const Error& e) {
      config_error(*line, e.what());
    }
  }

  void finish() const {
    if (table_.empty()) return;
    const auto& [key, e] = *table_.begin();
    config_error(e.line, "unknown key '" + key + "'" + (where_.empty() ? "" : " in " + where_));
  }

 private:
  std::optional<Entry> take(const std::string& key) {
    auto it = table_.find(key);
    if (it == table_.end()) return std::nullopt;
    Entry e = it->second;
    table_.erase(it);
    return e;
  }

  Table table_;
  std::string where_;
};

}  // namespace

ExperimentConfig parse_config(const std::string& text) {
  Document doc = parse_document(text);
  ExperimentConfig cfg;
  cfg.task.family = TaskFamily::BanditChat;
  cfg.task.id = "bandit";

  static const std::set<std::string> known = {"",       "hyper",  "optim", "task",   "env",
                                              "timing", "infer",  "orchestrator", "router",
                                              "faults", "distill"};
  for (const auto& [name, table] : doc.tables)
    if (!known.count(name)) {
      const int line = table.empty() ? 0 : table.begin()->second.line;
      config_error(line, "unknown table [" + name + "]");
    }

  Reader top(doc.tables[""], "");
  if (!top.has("seed")) fail(ErrorKind::Config, "missing required key 'seed'");
  top.parsed<RunMode>("mode", cfg.mode, [](const std::string& s) {
    if (s == "async") return RunMode::Async;
    if (s == "sync") return RunMode::Sync;
    fail(ErrorKind::Config, "mode must be \"async\" or \"sync\"");
  });
  top.parsed<Algorithm>("algorithm", cfg.algorithm, algorithm_from_string);
  top.count("seed", cfg.seed);
  top.count("steps", cfg.steps);
  top.string("output_dir", cfg.output_dir);
  top.finish();

  Reader hyper(doc.tables["hyper"], "[hyper]");
  std::string preset = cfg.algorithm == Algorithm::Distill ? "distillation" : "desk";
  hyper.string("preset", preset);
  if (preset == "reasoning") cfg.hp = RLHyperparams::reasoning();
  else if (preset == "distillation") cfg.hp = RLHyperparams::distillation();
  else if (preset == "desk") cfg.hp = ExperimentConfig::desk_hyperparams();
  else fail(ErrorKind::Config, "unknown preset '" + preset + "'");
  hyper.number("beta", cfg.hp.beta);
  hyper.number("eps_low", cfg.hp.eps_low);
  hyper.number("eps_high", cfg.hp.eps_high);
  hyper.number("eps_l", cfg.hp.eps_l);
  hyper.number("eps_h", cfg.hp.eps_h);
  hyper.count("group_size", cfg.hp.group_size);
  hyper.count("batch_size", cfg.hp.batch_size);
  if (hyper.has("tau")) {
    double tau = 0.0;
    hyper.number("tau", tau);
    if (std::isinf(tau) && tau > 0) {
      cfg.hp.tau_staleness = kUnboundedStaleness;
    } else if (!(tau >= 0.0) || std::floor(tau) != tau) {
      fail(ErrorKind::Config, "tau must be a non-negative integer or inf");
    } else {
      cfg.hp.tau_staleness = static_cast<std::uint64_t>(tau);
    }
  }
  hyper.count("k_sync", cfg.hp.k_sync);
  hyper.count("k_recent", cfg.hp.k_recent);
  hyper.count("t_ctx", cfg.hp.t_ctx);
  hyper.finish();

  Reader optim(doc.tables["optim"], "[optim]");
  optim.number("learning_rate", cfg.learning_rate);
  optim.number("momentum", cfg.momentum);
  optim.finish();

  Reader task(doc.tables["task"], "[task]");
  task.string("id", cfg.task.id);
  task.parsed<TaskFamily>("family", cfg.task.family, family_from_string);
  task.count("h", cfg.task.h);
  cfg.task.max_turns = cfg.task.bandit_rounds();
  task.count("max_turns", cfg.task.max_turns);
  task.count("num_prompts", cfg.task.num_prompts);
  task.count("num_answers", cfg.task.num_answers);
  task.finish();

  Reader env(doc.tables["env"], "[env]");
  env.number("latency_mu", cfg.latency_mu);
  env.number("latency_sigma", cfg.latency_sigma);
  env.number("p_fail", cfg.p_fail);
  env.finish();

  Reader timing(doc.tables["timing"], "[timing]");
  timing.number("generation_time", cfg.generation_time);
  timing.number("train_time", cfg.train_time);
  timing.finish();

  Reader infer(doc.tables["infer"], "[infer]");
  std::string pert = "none";
  double grid = cfg.perturbation.grid;
  infer.string("perturbation", pert);
  infer.number("grid", grid);
  infer.finish();
  if (pert == "none") cfg.perturbation = InferPerturbation::none();
  else if (pert == "round-to-grid") cfg.perturbation = InferPerturbation::round_to_grid(grid);
  else fail(ErrorKind::Config, "perturbation must be \"none\" or \"round-to-grid\"");

  Reader orch(doc.tables["orchestrator"], "[orchestrator]");
  orch.number("heartbeat_interval", cfg.heartbeat_interval);
  cfg.heartbeat_timeout = 3.0 * cfg.heartbeat_interval;
  orch.number("heartbeat_timeout", cfg.heartbeat_timeout);
  orch.finish();

  Reader router(doc.tables["router"], "[router]");
  router.count("ranks", cfg.router_ranks);
  router.flag("rebalance", cfg.rebalance);
  router.finish();

  Reader faults(doc.tables["faults"], "[faults]");
  faults.number("kill_fraction", cfg.kill_fraction);
  faults.number("kill_time", cfg.kill_time);
  faults.finish();

  Reader distill(doc.tables["distill"], "[distill]");
  distill.number("teacher_strength", cfg.teacher_strength);
  distill.finish();

  for (std::size_t i = 0; i < doc.services.size(); ++i) {
    Reader svc(doc.services[i], "[[services]] #" + std::to_string(i + 1));
    ServiceConfig s;
    s.id = "service-" + std::to_string(i);
    svc.string("id", s.id);
    svc.parsed<TaskFamily>("family", s.family, family_from_string);
    svc.number("ratio", s.ratio);
    svc.count("max_concurrency", s.max_concurrency);
    svc.finish();
    cfg.services.push_back(std::move(s));
  }
  if (cfg.services.empty()) cfg.services.push_back(ServiceConfig{"bandit-0", cfg.task.family, 1.0, 256});

  cfg.validate();
  return cfg;
}

ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::Config, "cannot read config file '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

void ExperimentConfig::validate() const {
  auto bad = [](const std::string& what) { fail(ErrorKind::Config, what); };
  try {
    hp.validate();
    task.validate();
    EnvConfig{latency_mu, latency_sigma, p_fail, seed}.validate();
  } catch (const Error& e) {
    if (e.kind() == ErrorKind::Config) throw;
    bad(e.what());
  }
  if (task.family != TaskFamily::BanditChat)
    bad("training runs use the bandit-chat family; key-chase has no trainable policy");
  if (hp.batch_size % hp.group_size != 0) bad("batch_size must be a multiple of group_size");
  if (steps == 0) bad("steps must be at least 1");
  if (!(learning_rate > 0.0)) bad("learning_rate must be positive");
  if (!(momentum >= 0.0 && momentum < 1.0)) bad("momentum must lie in [0,1)");
  if (!(generation_time >= 0.0) || !(train_time > 0.0))
    bad("generation_time must be >= 0 and train_time > 0");
  if (perturbation.mode == InferPerturbation::Mode::RoundToGrid && !(perturbation.grid > 0.0))
    bad("perturbation grid must be positive");
  if (!(heartbeat_interval > 0.0) || !(heartbeat_timeout > heartbeat_interval))
    bad("heartbeat_timeout must exceed a positive heartbeat_interval");
  if (router_ranks == 0) bad("router needs at least one rank");
  if (!(kill_fraction >= 0.0 && kill_fraction < 1.0)) bad("kill_fraction must lie in [0,1)");
  if (!(kill_time >= 0.0)) bad("kill_time must be >= 0");
  if (!(teacher_strength >= 0.0)) bad("teacher_strength must be >= 0");
  if (output_dir.empty()) bad("output_dir must be nonempty");
  if (services.empty()) bad("at least one service is required");
  std::set<std::string> ids;
  double ratio_sum = 0.0;
  for (const ServiceConfig& s : services) {
    if (s.id.empty()) bad("service id must be nonempty");
    if (!ids.insert(s.id).second) bad("duplicate service id '" + s.id + "'");
    if (s.family != task.family)
      bad("service '" + s.id + "' serves " + to_string(s.family) + ", not the configured task family");
    if (!(s.ratio >= 0.0) || !std::isfinite(s.ratio)) bad("service ratio must be finite and >= 0");
    if (s.max_concurrency < hp.group_size)
      bad("service '" + s.id + "' cannot hold one group (max_concurrency < group_size)");
    ratio_sum += s.ratio;
  }
  if (!(ratio_sum > 0.0)) bad("service ratios must not all be zero");
}

std::string resolve_output_dir(const ExperimentConfig& cfg) {
  const char* root = std::getenv("ARL_OUTPUT_ROOT");
  if (root == nullptr || *root == '\0' || (!cfg.output_dir.empty() && cfg.output_dir.front() == '/'))
    return cfg.output_dir;
  std::string r = root;
  if (r.back() != '/') r += '/';
  return r + cfg.output_dir;
}

}  // namespace arl
