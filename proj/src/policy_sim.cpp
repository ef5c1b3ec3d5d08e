#include "asyncrl/policy_sim.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>
#include <string>

#include "asyncrl/error.hpp"

namespace arl {

std::uint64_t mix64(std::uint64_t x) noexcept {
  // splitmix64 finalizer
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) noexcept {
  return mix64(mix64(a) ^ (b + 0x632be59bd9b4e019ULL));
}

std::span<const double> PolicyWeights::row(ContextId ctx) const {
  if (ctx >= context_dim)
    fail(ErrorKind::InvalidInput, "context id " + std::to_string(ctx) + " out of range");
  return {logits.data() + static_cast<std::size_t>(ctx) * vocab_size, vocab_size};
}

std::span<double> PolicyWeights::row(ContextId ctx) {
  if (ctx >= context_dim)
    fail(ErrorKind::InvalidInput, "context id " + std::to_string(ctx) + " out of range");
  return {logits.data() + static_cast<std::size_t>(ctx) * vocab_size, vocab_size};
}

std::vector<double> log_softmax(std::span<const double> logits) {
  std::vector<double> out(logits.begin(), logits.end());
  if (out.empty()) return out;
  const double mx = *std::max_element(out.begin(), out.end());
  double z = 0.0;
  for (double& x : out) {
    x -= mx;
    z += std::exp(x);
  }
  const double lz = std::log(z);
  for (double& x : out) x -= lz;
  return out;
}

namespace {

void check_token(const PolicyWeights& w, TokenId token) {
  if (token >= w.vocab_size)
    fail(ErrorKind::InvalidInput, "token id " + std::to_string(token) + " out of range");
}

TokenId draw_categorical(std::span<const double> logp, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const double u = unit_interval(rng());
  double acc = 0.0;
  TokenId last_positive = 0;
  for (std::size_t i = 0; i < logp.size(); ++i) {
    const double p = std::exp(logp[i]);
    if (p <= 0.0) continue;
    last_positive = static_cast<TokenId>(i);
    acc += p;
    if (u < acc) return static_cast<TokenId>(i);
  }
  return last_positive;
}

std::vector<double> eval_row(const PolicyWeights& w, ContextId ctx,
                             const InferPerturbation& pert, EvalMode mode) {
  if (mode == EvalMode::Infer) return perturbed_row(w, ctx, pert);
  auto r = w.row(ctx);
  return {r.begin(), r.end()};
}

std::vector<double> sparse_log_probs(std::span<const double> row,
                                     std::span<const std::size_t> support) {
  std::vector<double> restricted;
  restricted.reserve(support.size());
  for (std::size_t i : support) restricted.push_back(row[i]);
  const std::vector<double> lp = log_softmax(restricted);
  std::vector<double> out(row.size(), -std::numeric_limits<double>::infinity());
  for (std::size_t j = 0; j < support.size(); ++j) out[support[j]] = lp[j];
  return out;
}

}  // namespace

std::vector<double> perturbed_row(const PolicyWeights& w, ContextId ctx,
                                  const InferPerturbation& pert) {
  auto r = w.row(ctx);
  std::vector<double> out(r.begin(), r.end());
  if (pert.mode == InferPerturbation::Mode::RoundToGrid) {
    if (!(pert.grid > 0.0)) fail(ErrorKind::InvalidInput, "grid step must be positive");
    for (double& x : out) x = std::round(x / pert.grid) * pert.grid;
  }
  return out;
}

double logprob_train(const PolicyWeights& w, ContextId ctx, TokenId token) {
  check_token(w, token);
  return log_softmax(w.row(ctx))[token];
}

double logprob_infer(const PolicyWeights& w, ContextId ctx, TokenId token,
                     const InferPerturbation& pert) {
  check_token(w, token);
  if (pert.mode == InferPerturbation::Mode::None) return logprob_train(w, ctx, token);
  return log_softmax(perturbed_row(w, ctx, pert))[token];
}

SampledToken sample_action(const PolicyWeights& w, ContextId ctx,
                           std::uint64_t seed, const InferPerturbation& pert) {
  const std::vector<double> lp = log_softmax(perturbed_row(w, ctx, pert));
  const std::uint64_t s = mix_seed(mix_seed(seed, w.version), ctx);
  const TokenId tok = draw_categorical(lp, s);
  return {tok, lp[tok]};
}

std::vector<double> grad_logprob(const PolicyWeights& w, ContextId ctx,
                                 TokenId token) {
  check_token(w, token);
  std::vector<double> g = log_softmax(w.row(ctx));
  for (double& x : g) x = -std::exp(x);
  g[token] += 1.0;
  return g;
}

std::vector<std::size_t> deterministic_topk(std::span<const double> scores,
                                            std::size_t k) {
  if (k > scores.size())
    fail(ErrorKind::InvalidInput, "top-k larger than the candidate set");
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(),
                    [&](std::size_t a, std::size_t b) {
                      if (scores[a] != scores[b]) return scores[a] > scores[b];
                      return a < b;
                    });
  idx.resize(k);
  return idx;
}

TopKSelector randomized_tie_topk(std::uint64_t seed) {
  auto rng = std::make_shared<std::mt19937_64>(seed);
  return [rng](std::span<const double> scores, std::size_t k) {
    if (k > scores.size())
      fail(ErrorKind::InvalidInput, "top-k larger than the candidate set");
    std::vector<std::uint64_t> salt(scores.size());
    for (auto& s : salt) s = (*rng)();
    std::vector<std::size_t> idx(scores.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
      if (scores[a] != scores[b]) return scores[a] > scores[b];
      return salt[a] < salt[b];
    });
    idx.resize(k);
    return idx;
  };
}

double sparse_logprob(const PolicyWeights& w, ContextId ctx, TokenId token,
                      std::size_t k, const InferPerturbation& pert, EvalMode mode,
                      const TopKSelector& select) {
  check_token(w, token);
  if (k > w.vocab_size) fail(ErrorKind::InvalidInput, "k exceeds vocabulary");
  const std::vector<double> row = eval_row(w, ctx, pert, mode);
  const std::vector<std::size_t> support = select(row, k);
  return sparse_log_probs(row, support)[token];
}

SampledToken sample_sparse_action(const PolicyWeights& w, ContextId ctx,
                                  std::uint64_t seed, std::size_t k,
                                  const InferPerturbation& pert,
                                  const TopKSelector& select) {
  if (k > w.vocab_size) fail(ErrorKind::InvalidInput, "k exceeds vocabulary");
  const std::vector<double> row = perturbed_row(w, ctx, pert);
  const std::vector<double> lp = sparse_log_probs(row, select(row, k));
  const std::uint64_t s = mix_seed(mix_seed(seed, w.version), ctx);
  const TokenId tok = draw_categorical(lp, s);
  return {tok, lp[tok]};
}

WeightStore::WeightStore(PolicyWeights initial) {
  auto snap = std::make_shared<const PolicyWeights>(std::move(initial));
  history_.emplace(snap->version, snap);
  head_ = std::move(snap);
}

std::shared_ptr<const PolicyWeights> WeightStore::latest() const {
  std::lock_guard lock(mu_);
  return head_;
}

std::shared_ptr<const PolicyWeights> WeightStore::at(Version v) const {
  std::lock_guard lock(mu_);
  auto it = history_.find(v);
  if (it == history_.end())
    fail(ErrorKind::NotFound, "weight version " + std::to_string(v) + " was never published");
  return it->second;
}

Version WeightStore::latest_version() const {
  std::lock_guard lock(mu_);
  return head_->version;
}

Version WeightStore::publish(PolicyWeights w) {
  std::lock_guard lock(mu_);
  w.version = head_->version + 1;
  auto snap = std::make_shared<const PolicyWeights>(std::move(w));
  history_.emplace(snap->version, snap);
  head_ = std::move(snap);
  return head_->version;
}

}  // namespace arl
