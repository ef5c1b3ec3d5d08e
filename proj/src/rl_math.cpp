#include "asyncrl/rl_math.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "asyncrl/error.hpp"

namespace arl {

void RLHyperparams::validate() const {
  auto bad = [](const std::string& what) {
    fail(ErrorKind::InvalidHyperparameter, what);
  };
  if (!(beta > 1.0)) bad("beta must exceed 1");
  if (!(eps_low > 0.0 && eps_low < 1.0)) bad("eps_low must lie in (0,1)");
  if (!(eps_high > 0.0)) bad("eps_high must be positive");
  if (!(eps_l > 0.0 && eps_l < 1.0)) bad("eps_l must lie in (0,1)");
  if (!(eps_h > 0.0)) bad("eps_h must be positive");
  if (group_size == 0) bad("group_size must be positive");
  if (batch_size == 0) bad("batch_size must be positive");
  if (k_sync == 0) bad("k_sync must be positive");
  if (k_recent == 0) bad("k_recent must be positive");
  if (t_ctx == 0) bad("t_ctx must be positive");
}

namespace {

void require_nonempty(std::span<const double> xs) {
  if (xs.empty()) fail(ErrorKind::InvalidInput, "empty reward sequence");
  for (double x : xs)
    if (!std::isfinite(x)) fail(ErrorKind::InvalidInput, "non-finite reward");
}

bool all_equal(std::span<const double> xs) {
  return std::all_of(xs.begin(), xs.end(),
                     [&](double x) { return x == xs.front(); });
}

double mean_of(std::span<const double> xs) {
  double s = 0.0;
  for (double x : xs) s += x;
  return s / static_cast<double>(xs.size());
}

void check_logprob(double lp, const char* name) {
  if (!std::isfinite(lp))
    fail(ErrorKind::InvalidInput, std::string("non-finite ") + name);
}

std::size_t count_model_tokens(std::span<const TokenLogProbs> toks) {
  return static_cast<std::size_t>(
      std::count_if(toks.begin(), toks.end(),
                    [](const TokenLogProbs& t) { return t.is_model_token; }));
}

// Clipped, pop-masked surrogate for one token with advantage `adv`; the
// derivative w.r.t. lp_train_cur is written to *grad when non-null.
double surrogate_term(const TokenLogProbs& tlp, double adv,
                      const RLHyperparams& hp, double* grad) {
  const double rho = mismatch_ratio(tlp.lp_train_old, tlp.lp_infer_old);
  const double pop = pop_mask(rho, hp.beta);
  check_logprob(tlp.lp_train_cur, "lp_train_cur");
  const double r = std::exp(tlp.lp_train_cur - tlp.lp_train_old);
  const double unclipped = r * adv;
  const double clipped = clip(r, 1.0 - hp.eps_low, 1.0 + hp.eps_high) * adv;
  if (grad != nullptr) {
    // The unclipped branch is active whenever it attains the min; on ties
    // it is the one with a derivative.
    *grad = (unclipped <= clipped) ? pop * r * adv : 0.0;
  }
  return pop * std::min(unclipped, clipped);
}

}  // namespace

std::vector<double> group_advantages_normalized(std::span<const double> rewards) {
  require_nonempty(rewards);
  std::vector<double> out(rewards.size(), 0.0);
  if (all_equal(rewards)) return out;
  const double mean = mean_of(rewards);
  double var = 0.0;
  for (double r : rewards) var += (r - mean) * (r - mean);
  var /= static_cast<double>(rewards.size());
  const double sd = std::sqrt(var);
  if (sd == 0.0) return out;
  for (std::size_t i = 0; i < rewards.size(); ++i)
    out[i] = (rewards[i] - mean) / sd;
  return out;
}

std::vector<double> group_advantages_centered(std::span<const double> rewards) {
  require_nonempty(rewards);
  std::vector<double> out(rewards.size(), 0.0);
  if (all_equal(rewards)) return out;
  const double mean = mean_of(rewards);
  for (std::size_t i = 0; i < rewards.size(); ++i) out[i] = rewards[i] - mean;
  return out;
}

double mismatch_ratio(double lp_train_old, double lp_infer_old) {
  check_logprob(lp_train_old, "lp_train_old");
  check_logprob(lp_infer_old, "lp_infer_old");
  return std::exp(lp_train_old - lp_infer_old);
}

double pop_mask(double rho, double beta) {
  if (!(beta > 1.0))
    fail(ErrorKind::InvalidHyperparameter, "pop bound beta must exceed 1");
  return (rho >= 1.0 / beta && rho <= beta) ? rho : 0.0;
}

double clip(double x, double lo, double hi) { return std::clamp(x, lo, hi); }

double icepop_token_term(const TokenLogProbs& tlp, double adv,
                         const RLHyperparams& hp) {
  if (!tlp.is_model_token)
    fail(ErrorKind::InvalidInput, "loss term requested for environment token");
  return surrogate_term(tlp, adv, hp, nullptr);
}

double icepop_token_term_grad(const TokenLogProbs& tlp, double adv,
                              const RLHyperparams& hp) {
  if (!tlp.is_model_token) return 0.0;
  double g = 0.0;
  surrogate_term(tlp, adv, hp, &g);
  return g;
}

LossAndGrad icepop_loss_grad(std::span<const Group> groups,
                             const RLHyperparams& hp) {
  hp.validate();
  LossAndGrad out;
  if (groups.empty()) return out;
  const double per_group = 1.0 / static_cast<double>(groups.size());
  double total = 0.0;
  for (const Group& g : groups) {
    if (g.members.empty())
      fail(ErrorKind::InvalidTrajectory, "group without members");
    std::vector<double> rewards;
    rewards.reserve(g.members.size());
    for (const Sequence& s : g.members) rewards.push_back(s.reward);
    const std::vector<double> adv = group_advantages_normalized(rewards);
    const double per_member = 1.0 / static_cast<double>(g.members.size());
    double group_sum = 0.0;
    for (std::size_t i = 0; i < g.members.size(); ++i) {
      const auto& toks = g.members[i].tokens;
      const std::size_t n = count_model_tokens(toks);
      if (n == 0)
        fail(ErrorKind::InvalidTrajectory, "trajectory has no model tokens");
      const double w = per_group * per_member / static_cast<double>(n);
      double seq_sum = 0.0;
      for (const TokenLogProbs& t : toks) {
        if (!t.is_model_token) {
          out.dloss_dlp.push_back(0.0);
          continue;
        }
        double grad = 0.0;
        seq_sum += surrogate_term(t, adv[i], hp, &grad);
        out.dloss_dlp.push_back(-w * grad);
      }
      group_sum += seq_sum / static_cast<double>(n);
    }
    total += group_sum * per_member;
  }
  out.loss = -total * per_group;
  return out;
}

double icepop_loss(std::span<const Group> groups, const RLHyperparams& hp) {
  return icepop_loss_grad(groups, hp).loss;
}

double dsis_factor(double r, double eps_l, double eps_h) {
  return (r > 1.0 - eps_l && r < 1.0 + eps_h) ? r : 0.0;
}

LossAndGrad async_pg_loss_grad(std::span<const AdvantagedSequence> seqs,
                               const RLHyperparams& hp) {
  hp.validate();
  LossAndGrad out;
  std::size_t n = 0;
  for (const auto& s : seqs) n += count_model_tokens(s.tokens);
  if (n == 0) {
    for (const auto& s : seqs) out.dloss_dlp.resize(out.dloss_dlp.size() + s.tokens.size(), 0.0);
    return out;
  }
  const double inv_n = 1.0 / static_cast<double>(n);
  double total = 0.0;
  for (const auto& s : seqs) {
    for (const TokenLogProbs& t : s.tokens) {
      if (!t.is_model_token) {
        out.dloss_dlp.push_back(0.0);
        continue;
      }
      if (!std::isfinite(t.lp_infer_old))
        fail(ErrorKind::InvalidTrajectory, "model token missing rollout log-prob");
      check_logprob(t.lp_train_cur, "lp_train_cur");
      const double r = std::exp(t.lp_train_cur - t.lp_infer_old);
      const double f = dsis_factor(r, hp.eps_l, hp.eps_h);
      total += f * s.advantage * t.lp_train_cur;
      out.dloss_dlp.push_back(-f * s.advantage * inv_n);
    }
  }
  out.loss = -total * inv_n;
  return out;
}

double async_pg_loss(std::span<const AdvantagedSequence> seqs,
                     const RLHyperparams& hp) {
  return async_pg_loss_grad(seqs, hp).loss;
}

double distill_advantage(double lp_teacher, double lp_student) {
  return lp_teacher - lp_student;
}

LossAndGrad distill_loss_grad(std::span<const DistillSequence> seqs,
                              const RLHyperparams& hp) {
  hp.validate();
  LossAndGrad out;
  if (seqs.empty()) return out;
  const double per_seq = 1.0 / static_cast<double>(seqs.size());
  double total = 0.0;
  for (const DistillSequence& s : seqs) {
    if (s.lp_teacher.size() != s.tokens.size())
      fail(ErrorKind::InvalidBatch, "teacher log-probs do not cover the sequence");
    const std::size_t n = count_model_tokens(s.tokens);
    if (n == 0) fail(ErrorKind::InvalidTrajectory, "trajectory has no model tokens");
    const double w = per_seq / static_cast<double>(n);
    double seq_sum = 0.0;
    for (std::size_t t = 0; t < s.tokens.size(); ++t) {
      const TokenLogProbs& tok = s.tokens[t];
      if (!tok.is_model_token) {
        out.dloss_dlp.push_back(0.0);
        continue;
      }
      if (!std::isfinite(s.lp_teacher[t]))
        fail(ErrorKind::InvalidBatch, "non-finite teacher log-prob");
      const double adv = distill_advantage(s.lp_teacher[t], tok.lp_train_cur);
      double grad = 0.0;
      seq_sum += surrogate_term(tok, adv, hp, &grad);
      out.dloss_dlp.push_back(-w * grad);
    }
    total += seq_sum / static_cast<double>(n);
  }
  out.loss = -total * per_seq;
  return out;
}

double distill_loss(std::span<const DistillSequence> seqs,
                    const RLHyperparams& hp) {
  return distill_loss_grad(seqs, hp).loss;
}

}  // namespace arl
