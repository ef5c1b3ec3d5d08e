#include "asyncrl/tito_gateway.hpp"

#include <ostream>

#include <json.hpp>

#include "asyncrl/error.hpp"

namespace arl {

ToyTokenizer::ToyTokenizer(std::vector<std::string> pieces) : pieces_(std::move(pieces)) {
  for (std::size_t i = 0; i < pieces_.size(); ++i) {
    const std::string& p = pieces_[i];
    if (p.empty()) fail(ErrorKind::InvalidInput, "empty tokenizer piece");
    if (!index_.emplace(p, static_cast<TokenId>(i)).second)
      fail(ErrorKind::InvalidInput, "duplicate tokenizer piece '" + p + "'");
    max_piece_len_ = std::max(max_piece_len_, p.size());
  }
  for (const std::string& p : pieces_)
    for (char c : p)
      if (!in_alphabet(c))
        fail(ErrorKind::InvalidInput, "merge piece '" + p + "' uses a character outside the alphabet");
}

const ToyTokenizer& ToyTokenizer::standard() {
  static const ToyTokenizer tok = [] {
    std::vector<std::string> pieces;
    for (char c = 'a'; c <= 'z'; ++c) pieces.emplace_back(1, c);
    for (char c = 'A'; c <= 'Z'; ++c) pieces.emplace_back(1, c);
    for (char c = '0'; c <= '9'; ++c) pieces.emplace_back(1, c);
    for (char c : std::string(" .?!")) pieces.emplace_back(1, c);
    for (const char* m : {"ab", "th", "he", "the", "to", "ke", "en", "ed", "re", "in", "ol", " t"})
      pieces.emplace_back(m);
    return ToyTokenizer(std::move(pieces));
  }();
  return tok;
}

bool ToyTokenizer::in_alphabet(char c) const {
  return index_.count(std::string(1, c)) != 0;
}

const std::string& ToyTokenizer::piece(TokenId id) const {
  if (id >= pieces_.size())
    fail(ErrorKind::InvalidInput, "unknown token id " + std::to_string(id));
  return pieces_[id];
}

TokenId ToyTokenizer::id_of(std::string_view piece) const {
  auto it = index_.find(std::string(piece));
  if (it == index_.end())
    fail(ErrorKind::InvalidInput, "unknown piece '" + std::string(piece) + "'");
  return it->second;
}

std::vector<TokenId> ToyTokenizer::encode(std::string_view text) const {
  std::vector<TokenId> out;
  std::size_t pos = 0;
  while (pos < text.size()) {
    if (!in_alphabet(text[pos]))
      fail(ErrorKind::InvalidInput,
           "character at offset " + std::to_string(pos) + " outside the alphabet");
    std::size_t len = std::min(max_piece_len_, text.size() - pos);
    for (; len > 0; --len) {
      auto it = index_.find(std::string(text.substr(pos, len)));
      if (it != index_.end()) {
        out.push_back(it->second);
        break;
      }
    }
    pos += len;
  }
  return out;
}

std::string ToyTokenizer::decode(std::span<const TokenId> tokens) const {
  std::string out;
  for (TokenId t : tokens) out += piece(t);
  return out;
}

const char* to_string(Role r) noexcept {
  switch (r) {
    case Role::Task: return "task";
    case Role::Model: return "model";
    case Role::Environment: return "environment";
  }
  return "?";
}

Role role_from_string(std::string_view s) {
  if (s == "task") return Role::Task;
  if (s == "model") return Role::Model;
  if (s == "environment") return Role::Environment;
  fail(ErrorKind::InvalidInput, "unknown role '" + std::string(s) + "'");
}

void TitoGateway::register_trajectory(std::uint64_t trajectory) {
  std::lock_guard lock(mu_);
  live_[trajectory] = Attempt{};
}

bool TitoGateway::is_registered(std::uint64_t trajectory) const {
  std::lock_guard lock(mu_);
  return live_.count(trajectory) != 0;
}

std::uint64_t TitoGateway::record_generation(TokenRecord rec) {
  if (rec.role == Role::Model && rec.logprobs.size() != rec.tokens.size())
    fail(ErrorKind::InvalidInput, "model record token/log-prob length mismatch");
  if (rec.role != Role::Model && !rec.logprobs.empty() &&
      rec.logprobs.size() != rec.tokens.size())
    fail(ErrorKind::InvalidInput, "record token/log-prob length mismatch");
  std::lock_guard lock(mu_);
  auto it = live_.find(rec.trajectory);
  if (it == live_.end())
    fail(ErrorKind::NotFound, "trajectory " + std::to_string(rec.trajectory) + " is not registered");
  const std::uint32_t turn = rec.turn;
  if (!it->second.turns.emplace(turn, std::move(rec)).second)
    fail(ErrorKind::Conflict, "duplicate record for trajectory " +
                                  std::to_string(it->first) + " turn " + std::to_string(turn));
  return next_id_++;
}

std::vector<TokenRecord> TitoGateway::fetch_exact(std::uint64_t trajectory) const {
  std::lock_guard lock(mu_);
  auto it = live_.find(trajectory);
  if (it == live_.end())
    fail(ErrorKind::NotFound, "trajectory " + std::to_string(trajectory) + " is not registered");
  std::vector<TokenRecord> out;
  out.reserve(it->second.turns.size());
  for (const auto& [turn, rec] : it->second.turns) out.push_back(rec);
  return out;
}

TitoGateway::RoundTrip TitoGateway::text_round_trip(std::uint64_t trajectory,
                                                    const ToyTokenizer& tok) const {
  std::vector<TokenId> recorded;
  for (const TokenRecord& r : fetch_exact(trajectory))
    if (r.role == Role::Model) recorded.insert(recorded.end(), r.tokens.begin(), r.tokens.end());
  RoundTrip rt;
  rt.reencoded = tok.encode(tok.decode(recorded));
  rt.mismatch = rt.reencoded != recorded;
  return rt;
}

void TitoGateway::export_jsonl(std::ostream& out) const {
  std::lock_guard lock(mu_);
  for (const auto& [traj, attempt] : live_) {
    for (const auto& [turn, rec] : attempt.turns) {
      nlohmann::ordered_json j;
      j["traj"] = traj;
      j["turn"] = turn;
      j["role"] = to_string(rec.role);
      j["version"] = rec.version;
      j["tokens"] = rec.tokens;
      j["logprobs"] = rec.logprobs;
      out << j.dump() << '\n';
    }
  }
}

std::size_t TitoGateway::record_count() const {
  std::lock_guard lock(mu_);
  std::size_t n = 0;
  for (const auto& [traj, attempt] : live_) n += attempt.turns.size();
  return n;
}

}  // namespace arl
