#pragma once

#include <cstdint>
#include <iosfwd>
#include <map>
#include <mutex>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "asyncrl/policy_sim.hpp"

namespace arl {

// Greedy longest-match tokenizer over a fixed piece vocabulary. Every single
// character of the base alphabet is a piece; multi-character pieces are
// merges that make some token sequences non-canonical.
class ToyTokenizer {
 public:
  explicit ToyTokenizer(std::vector<std::string> pieces);

  // Letters, digits, space, '.', '?', '!' and a handful of merges.
  static const ToyTokenizer& standard();

  std::vector<TokenId> encode(std::string_view text) const;
  std::string decode(std::span<const TokenId> tokens) const;

  std::size_t vocab_size() const { return pieces_.size(); }
  const std::string& piece(TokenId id) const;
  TokenId id_of(std::string_view piece) const;
  bool in_alphabet(char c) const;
  const std::vector<std::string>& pieces() const { return pieces_; }

 private:
  std::vector<std::string> pieces_;
  std::unordered_map<std::string, TokenId> index_;
  std::size_t max_piece_len_ = 1;
};

enum class Role { Task, Model, Environment };

const char* to_string(Role r) noexcept;
Role role_from_string(std::string_view s);

struct TokenRecord {
  std::uint64_t trajectory = 0;
  std::uint32_t turn = 0;
  std::vector<TokenId> tokens;
  std::vector<double> logprobs;  // empty for environment turns
  Version version = 0;
  Role role = Role::Model;
};

// Append-only store of exact generation records keyed by (trajectory, turn).
// A retried rollout re-registers its trajectory id, which starts a fresh
// attempt; reads see the latest attempt only.
class TitoGateway {
 public:
  void register_trajectory(std::uint64_t trajectory);
  bool is_registered(std::uint64_t trajectory) const;

  // Returns a monotonically increasing record id.
  std::uint64_t record_generation(TokenRecord rec);

  std::vector<TokenRecord> fetch_exact(std::uint64_t trajectory) const;

  struct RoundTrip {
    std::vector<TokenId> reencoded;
    bool mismatch = false;
  };
  // Decodes the recorded model tokens to text and re-encodes them.
  RoundTrip text_round_trip(std::uint64_t trajectory, const ToyTokenizer& tok) const;

  // One JSON object per record: {traj, turn, role, version, tokens, logprobs}.
  void export_jsonl(std::ostream& out) const;

  std::size_t record_count() const;

 private:
  struct Attempt {
    std::map<std::uint32_t, TokenRecord> turns;
  };
  mutable std::mutex mu_;
  std::map<std::uint64_t, Attempt> live_;
  std::uint64_t next_id_ = 0;
};

}  // namespace arl
