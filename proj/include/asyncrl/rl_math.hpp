#pragma once

// Loss, ratio, mask and advantage kernels for the RL trainer.
//
// Every public loss is a minimization loss. Gradients are returned as
// dL/d(lp_train_cur) per token, flattened in traversal order (groups, then
// members, then tokens); environment tokens receive 0. Callers chain these
// through the policy's score function to get logit gradients.

#include <cstddef>
#include <cstdint>
#include <limits>
#include <span>
#include <vector>

namespace arl {

inline constexpr std::uint64_t kUnboundedStaleness =
    std::numeric_limits<std::uint64_t>::max();

struct RLHyperparams {
  double beta = 2.0;       // pop interval [1/beta, beta]
  double eps_low = 0.2;    // PPO clip, lower side
  double eps_high = 0.28;  // PPO clip, upper side
  double eps_l = 0.2;      // double-sided trust region, lower side
  double eps_h = 0.28;     // double-sided trust region, upper side
  std::size_t group_size = 32;
  std::size_t batch_size = 32;
  std::uint64_t tau_staleness = 2;
  std::size_t k_sync = 1;
  std::size_t k_recent = 5;
  std::size_t t_ctx = 32768;

  // Reasoning RL preset: group 32, batch 32.
  static RLHyperparams reasoning() { return {}; }
  // Cross-stage distillation preset: group 1, batch 1024.
  static RLHyperparams distillation() {
    RLHyperparams hp;
    hp.group_size = 1;
    hp.batch_size = 1024;
    return hp;
  }

  // Throws InvalidHyperparameter when any invariant is violated.
  void validate() const;
};

struct TokenLogProbs {
  double lp_infer_old = 0.0;  // inference engine at sampling time (rollout)
  double lp_train_old = 0.0;  // training engine, sampling-time weights
  double lp_train_cur = 0.0;  // training engine, current weights
  bool is_model_token = true;
};

// One sampled response and its scalar reward.
struct Sequence {
  std::vector<TokenLogProbs> tokens;
  double reward = 0.0;
};

// G responses sharing a prompt.
struct Group {
  std::vector<Sequence> members;
};

// A response with a trajectory-level advantage broadcast to its tokens.
struct AdvantagedSequence {
  std::vector<TokenLogProbs> tokens;
  double advantage = 0.0;
};

// A student response with per-token teacher log-probs (one entry per token,
// ignored on environment tokens).
struct DistillSequence {
  std::vector<TokenLogProbs> tokens;
  std::vector<double> lp_teacher;
};

struct LossAndGrad {
  double loss = 0.0;
  std::vector<double> dloss_dlp;  // flattened, one per token
};

std::vector<double> group_advantages_normalized(std::span<const double> rewards);
std::vector<double> group_advantages_centered(std::span<const double> rewards);

double mismatch_ratio(double lp_train_old, double lp_infer_old);
double pop_mask(double rho, double beta);
double clip(double x, double lo, double hi);

// pop(rho) * min(r*A, clip(r)*A) for one model token.
double icepop_token_term(const TokenLogProbs& tlp, double adv,
                         const RLHyperparams& hp);
// d(icepop_token_term)/d(lp_train_cur); pop(rho) is a constant of the old
// policies, so only the surviving branch of the min carries gradient.
double icepop_token_term_grad(const TokenLogProbs& tlp, double adv,
                              const RLHyperparams& hp);

double icepop_loss(std::span<const Group> groups, const RLHyperparams& hp);
LossAndGrad icepop_loss_grad(std::span<const Group> groups,
                             const RLHyperparams& hp);

// f(r; eps_l, eps_h): r inside the open interval (1-eps_l, 1+eps_h), else 0.
double dsis_factor(double r, double eps_l, double eps_h);

// -mean_t f(r_t) * A_t * lp_train_cur over model tokens, with
// r_t = exp(lp_train_cur - lp_infer_old). The calibration weight f(r_t) is a
// stop-gradient coefficient: dL/dlp = -f(r_t) * A_t / N.
double async_pg_loss(std::span<const AdvantagedSequence> seqs,
                     const RLHyperparams& hp);
LossAndGrad async_pg_loss_grad(std::span<const AdvantagedSequence> seqs,
                               const RLHyperparams& hp);

// sg[lp_teacher - lp_student].
double distill_advantage(double lp_teacher, double lp_student);

// The clipped/pop-masked surrogate with the per-token distillation advantage
// in place of the group advantage. Each sequence is its own group (G = 1).
double distill_loss(std::span<const DistillSequence> seqs,
                    const RLHyperparams& hp);
LossAndGrad distill_loss_grad(std::span<const DistillSequence> seqs,
                              const RLHyperparams& hp);

}  // namespace arl
