#pragma once

// Self-check suites behind `asyncrl verify`. Each suite compares library
// behavior against a separately written reference or a closed-form bound.

#include <cstdint>
#include <string>
#include <vector>

#include "asyncrl/policy_sim.hpp"

namespace arl {

struct SuiteResult {
  std::string name;
  bool passed = false;
  std::string detail;
};

struct VerifyOptions {
  std::vector<std::string> suites;  // empty: all
  // Swap the deterministic top-k operator for the randomized-tie double.
  bool inject_topk_fault = false;
};

const std::vector<std::string>& verify_suite_names();

// Throws InvalidInput for an unknown suite name.
std::vector<SuiteResult> run_verify(const VerifyOptions& opts);

// Samples from the sparse infer path and re-scores each token on the sparse
// train path, both using `select`; returns the fraction of tokens the pop
// mask (beta = 2) rejects. Logits sit on a coarse grid so ties are common.
double sparse_pop_rate(const TopKSelector& select, std::uint64_t seed, std::size_t samples);

struct TitoDemo {
  std::size_t episodes = 0;
  std::size_t text_mismatches = 0;  // decode/re-encode changed the tokens
  std::size_t tito_mismatches = 0;  // gateway records differ from the samples
  double text_rate() const { return episodes ? double(text_mismatches) / double(episodes) : 0.0; }
  double tito_rate() const { return episodes ? double(tito_mismatches) / double(episodes) : 0.0; }
};

// Seeded corpus of multi-turn episodes. Model turns are short phrases whose
// token split is sampled among all matching pieces, as a sampler would emit
// them, so many are not the tokenizer's canonical encoding.
TitoDemo run_tito_demo(std::uint64_t seed, std::size_t episodes);

}  // namespace arl
