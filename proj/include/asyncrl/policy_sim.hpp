#pragma once

// Tabular softmax policies with exact log-probabilities.
//
// A policy is a dense logit table indexed by (context feature, token). The
// training engine evaluates it exactly; the inference engine evaluates it
// after an optional logit perturbation, which is how train/infer mismatch is
// manufactured. A top-k restricted softmax stands in for sparse attention
// over indexer-selected entries.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <span>
#include <utility>
#include <vector>

namespace arl {

using TokenId = std::uint32_t;
using ContextId = std::uint32_t;
using Version = std::uint64_t;

struct PolicyWeights {
  Version version = 0;
  std::size_t vocab_size = 0;
  std::size_t context_dim = 0;
  std::vector<double> logits;  // row-major [context][token]

  PolicyWeights() = default;
  PolicyWeights(std::size_t contexts, std::size_t vocab, Version v = 0)
      : version(v), vocab_size(vocab), context_dim(contexts),
        logits(contexts * vocab, 0.0) {}

  std::span<const double> row(ContextId ctx) const;
  std::span<double> row(ContextId ctx);
  double& at(ContextId ctx, TokenId tok) { return row(ctx)[tok]; }
  double at(ContextId ctx, TokenId tok) const { return row(ctx)[tok]; }
};

struct InferPerturbation {
  enum class Mode { None, RoundToGrid };
  Mode mode = Mode::None;
  double grid = 1.0 / 128.0;

  static InferPerturbation none() { return {}; }
  static InferPerturbation round_to_grid(double step) {
    return {Mode::RoundToGrid, step};
  }
};

// Log-softmax of a logit row, max-subtracted.
std::vector<double> log_softmax(std::span<const double> logits);

std::vector<double> perturbed_row(const PolicyWeights& w, ContextId ctx,
                                  const InferPerturbation& pert);

double logprob_train(const PolicyWeights& w, ContextId ctx, TokenId token);
double logprob_infer(const PolicyWeights& w, ContextId ctx, TokenId token,
                     const InferPerturbation& pert);

struct SampledToken {
  TokenId token = 0;
  double lp_infer = 0.0;
};

// Draws from the perturbed softmax. The draw is a pure function of
// (seed, w.version, ctx).
SampledToken sample_action(const PolicyWeights& w, ContextId ctx,
                           std::uint64_t seed, const InferPerturbation& pert);

// d log pi(token|ctx) / d logits[ctx, .] = onehot(token) - softmax(row).
std::vector<double> grad_logprob(const PolicyWeights& w, ContextId ctx,
                                 TokenId token);

// Indices of the k largest scores, ordered by (score desc, index asc).
std::vector<std::size_t> deterministic_topk(std::span<const double> scores,
                                            std::size_t k);

using TopKSelector =
    std::function<std::vector<std::size_t>(std::span<const double>, std::size_t)>;

// Selector that breaks score ties in a random order drawn from its own
// generator; successive calls on tied inputs may disagree. Used for fault
// injection only.
TopKSelector randomized_tie_topk(std::uint64_t seed);

enum class EvalMode { Train, Infer };

// Log-prob under the softmax restricted to the top-k support of the row.
// The support is selected on the same logits that are evaluated (train
// logits in Train mode, perturbed logits in Infer mode). Tokens outside the
// support return -infinity.
double sparse_logprob(const PolicyWeights& w, ContextId ctx, TokenId token,
                      std::size_t k, const InferPerturbation& pert,
                      EvalMode mode, const TopKSelector& select = deterministic_topk);

// Samples from the infer-mode sparse distribution.
SampledToken sample_sparse_action(const PolicyWeights& w, ContextId ctx,
                                  std::uint64_t seed, std::size_t k,
                                  const InferPerturbation& pert,
                                  const TopKSelector& select = deterministic_topk);

// Versioned, read-mostly store of published weights. Readers receive
// immutable snapshots; publish() replaces the head atomically.
class WeightStore {
 public:
  explicit WeightStore(PolicyWeights initial);

  std::shared_ptr<const PolicyWeights> latest() const;
  std::shared_ptr<const PolicyWeights> at(Version v) const;
  Version latest_version() const;

  // Stamps `w` with the next version and returns that version.
  Version publish(PolicyWeights w);

 private:
  mutable std::mutex mu_;
  std::shared_ptr<const PolicyWeights> head_;
  std::map<Version, std::shared_ptr<const PolicyWeights>> history_;
};

// 64-bit mixing used for deterministic seed derivation.
std::uint64_t mix64(std::uint64_t x) noexcept;
std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) noexcept;

// Uniform double in [0,1) from a raw 64-bit draw.
inline double unit_interval(std::uint64_t bits) noexcept {
  return static_cast<double>(bits >> 11) * 0x1.0p-53;
}

}  // namespace arl
