#include "asyncrl/report.hpp"

#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>

#include <json.hpp>

namespace arl {

namespace {

using json = nlohmann::json;

struct Parsed {
  std::string path;
  std::optional<json> summary;
  std::vector<std::pair<std::uint64_t, double>> rewards;  // version, expected reward
  std::map<std::uint64_t, double> kl;
};

bool parse_file(const std::string& path, Parsed& p, std::ostream& err) {
  std::ifstream in(path);
  if (!in) {
    err << path << ": cannot open\n";
    return false;
  }
  p.path = path;
  std::string line;
  std::size_t no = 0;
  while (std::getline(in, line)) {
    ++no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception&) {
      err << path << ":" << no << ": malformed JSON line\n";
      return false;
    }
    if (!j.is_object() || !j.contains("event") || !j["event"].is_string()) {
      err << path << ":" << no << ": expected an object with an \"event\" field\n";
      return false;
    }
    try {
      const std::string ev = j["event"].get<std::string>();
      if (ev == "summary") {
        p.summary = j;
      } else if (ev == "publish") {
        const auto v = j.at("version").get<std::uint64_t>();
        p.rewards.emplace_back(v, j.at("expected_reward").get<double>());
        if (j.contains("kl")) p.kl[v] = j["kl"].get<double>();
      }
    } catch (const json::exception&) {
      err << path << ":" << no << ": event is missing required fields\n";
      return false;
    }
  }
  return true;
}

template <typename T>
std::string field(const std::optional<json>& s, std::initializer_list<const char*> keys) {
  if (!s) return "-";
  const json* cur = &*s;
  for (const char* k : keys) {
    if (!cur->is_object() || !cur->contains(k)) return "-";
    cur = &(*cur)[k];
  }
  std::ostringstream o;
  if constexpr (std::is_same_v<T, double>) o << std::fixed << std::setprecision(4) << cur->get<double>();
  else if constexpr (std::is_same_v<T, std::string>) o << cur->get<std::string>();
  else o << cur->get<T>();
  return o.str();
}

}  // namespace

int report(const std::vector<std::string>& paths, std::ostream& out, std::ostream& err) {
  std::vector<Parsed> runs;
  for (const auto& path : paths) {
    Parsed p;
    if (!parse_file(path, p, err)) return 1;
    runs.push_back(std::move(p));
  }

  const std::vector<std::pair<std::string, std::function<std::string(const Parsed&)>>> rows = {
      {"mode", [](const Parsed& p) { return field<std::string>(p.summary, {"mode"}); }},
      {"algorithm", [](const Parsed& p) { return field<std::string>(p.summary, {"algorithm"}); }},
      {"updates", [](const Parsed& p) { return field<std::uint64_t>(p.summary, {"updates"}); }},
      {"utilization", [](const Parsed& p) { return field<double>(p.summary, {"utilization"}); }},
      {"final reward", [](const Parsed& p) { return field<double>(p.summary, {"final_expected_reward"}); }},
      {"consumed", [](const Parsed& p) { return field<std::uint64_t>(p.summary, {"counts", "consumed"}); }},
      {"trained", [](const Parsed& p) { return field<std::uint64_t>(p.summary, {"counts", "trained"}); }},
      {"dropped stale", [](const Parsed& p) { return field<std::uint64_t>(p.summary, {"counts", "dropped_stale"}); }},
      {"dropped env", [](const Parsed& p) { return field<std::uint64_t>(p.summary, {"counts", "dropped_env"}); }},
      {"dropped group", [](const Parsed& p) { return field<std::uint64_t>(p.summary, {"counts", "dropped_group"}); }},
      {"padded", [](const Parsed& p) { return field<std::uint64_t>(p.summary, {"counts", "padded"}); }},
      {"prefill charged", [](const Parsed& p) { return field<std::uint64_t>(p.summary, {"charged_prefill_tokens"}); }},
      {"prefill naive", [](const Parsed& p) { return field<std::uint64_t>(p.summary, {"naive_prefill_tokens"}); }},
      {"kv savings", [](const Parsed& p) {
         if (!p.summary || !p.summary->contains("naive_prefill_tokens")) return std::string("-");
         const double naive = (*p.summary)["naive_prefill_tokens"].get<double>();
         const double charged = (*p.summary)["charged_prefill_tokens"].get<double>();
         std::ostringstream o;
         o << std::fixed << std::setprecision(1) << (naive > 0 ? 100.0 * (1.0 - charged / naive) : 0.0) << "%";
         return o.str();
       }},
  };

  bool any_summary = false;
  for (const auto& r : runs) any_summary = any_summary || r.summary.has_value();
  if (!any_summary) {
    out << "(no runs)\n";
    return 0;
  }

  out << std::left << std::setw(18) << "metric";
  for (const auto& r : runs) out << std::setw(24) << r.path.substr(r.path.size() > 22 ? r.path.size() - 22 : 0);
  out << '\n';
  for (const auto& [name, get] : rows) {
    out << std::setw(18) << name;
    for (const auto& r : runs) out << std::setw(24) << get(r);
    out << '\n';
  }
  if (runs.size() == 2 && runs[0].summary && runs[1].summary) {
    const double a = (*runs[0].summary).value("utilization", 0.0);
    const double b = (*runs[1].summary).value("utilization", 0.0);
    out << std::setw(18) << "utilization delta" << std::showpos << std::fixed << std::setprecision(4) << (a - b)
        << std::noshowpos << '\n';
  }
  for (const auto& r : runs) {
    if (r.rewards.empty()) continue;
    out << "\nreward per version (" << r.path << ")\n";
    for (const auto& [v, reward] : r.rewards) {
      out << "  v" << std::setw(6) << v << std::fixed << std::setprecision(4) << reward;
      if (auto it = r.kl.find(v); it != r.kl.end()) out << "  kl " << it->second;
      out << '\n';
    }
  }
  return 0;
}

}  // namespace arl
