#include "asyncrl/trainer.hpp"

#include <algorithm>
#include <map>

#include "asyncrl/error.hpp"

namespace arl {

const char* to_string(Algorithm a) noexcept {
  switch (a) {
    case Algorithm::IcePop: return "icepop";
    case Algorithm::Dsis: return "dsis";
    case Algorithm::Distill: return "distill";
  }
  return "?";
}

Algorithm algorithm_from_string(const std::string& s) {
  if (s == "icepop") return Algorithm::IcePop;
  if (s == "dsis") return Algorithm::Dsis;
  if (s == "distill") return Algorithm::Distill;
  fail(ErrorKind::Config, "unknown algorithm '" + s + "'");
}

BatchCounts& BatchCounts::operator+=(const BatchCounts& o) {
  consumed += o.consumed;
  trained += o.trained;
  dropped_stale += o.dropped_stale;
  dropped_env += o.dropped_env;
  dropped_group += o.dropped_group;
  padded += o.padded;
  return *this;
}

std::vector<Trajectory> filter_staleness(std::vector<Trajectory> trajs, Version w_current,
                                         std::uint64_t tau) {
  if (tau == kUnboundedStaleness) return trajs;
  std::erase_if(trajs, [&](const Trajectory& t) {
    const Version w0 = t.oldest_version();
    return w_current > w0 && w_current - w0 > tau;
  });
  return trajs;
}

Trainer::Trainer(PolicyWeights initial, TrainerOptions opts)
    : opts_(opts), current_(initial), store_(std::move(initial)) {
  opts_.hp.validate();
  if (!(opts_.learning_rate > 0.0)) fail(ErrorKind::Config, "learning rate must be positive");
  if (!(opts_.momentum >= 0.0 && opts_.momentum < 1.0))
    fail(ErrorKind::Config, "momentum must lie in [0,1)");
  opt_.momentum.assign(current_.logits.size(), 0.0);
  opt_.learning_rate = opts_.learning_rate;
  opt_.momentum_coef = opts_.momentum;
  sync_.k_sync = opts_.hp.k_sync;
}

std::vector<Trajectory> Trainer::filter_batch(const std::vector<Trajectory>& batch,
                                              BatchCounts& counts) const {
  counts.consumed += batch.size();
  const Version w_current = store_.latest_version();
  const std::uint64_t tau = opts_.hp.tau_staleness;

  std::vector<std::uint64_t> order;
  std::map<std::uint64_t, std::vector<const Trajectory*>> groups;
  for (const Trajectory& t : batch) {
    auto [it, inserted] = groups.try_emplace(t.group);
    if (inserted) order.push_back(t.group);
    it->second.push_back(&t);
  }

  std::vector<Trajectory> out;
  for (std::uint64_t gid : order) {
    const auto& members = groups[gid];
    std::vector<Trajectory> copies;
    std::unique_ptr<bool[]> valid(new bool[members.size()]);
    std::size_t v = 0;
    for (const Trajectory* t : members) {
      const Version w0 = t->oldest_version();
      const bool stale = tau != kUnboundedStaleness && w_current > w0 && w_current - w0 > tau;
      if (stale) {
        ++counts.dropped_stale;
      } else if (t->env_failure) {
        ++counts.dropped_env;
      }
      valid[copies.size()] = !stale && !t->env_failure;
      v += valid[copies.size()];
      copies.push_back(*t);
    }
    auto kept = regroup<Trajectory>(copies, std::span<const bool>(valid.get(), copies.size()),
                                    opts_.hp.group_size);
    if (!kept) {
      counts.dropped_group += v;
      continue;
    }
    counts.trained += v;
    counts.padded += kept->size() - v;
    for (Trajectory& t : *kept) out.push_back(std::move(t));
  }
  return out;
}

Trainer::Prepared Trainer::prepare(const std::vector<Trajectory>& batch, Algorithm mode) const {
  Prepared p;
  std::map<Version, std::shared_ptr<const PolicyWeights>> old_weights;
  auto weights_at = [&](Version v) -> const PolicyWeights& {
    auto it = old_weights.find(v);
    if (it == old_weights.end()) it = old_weights.emplace(v, store_.at(v)).first;
    return *it->second;
  };
  const std::size_t C = current_.context_dim;

  struct SeqData {
    std::vector<TokenLogProbs> tokens;
    std::vector<double> teacher;
    double reward = 0.0;
    std::uint64_t group = 0;
  };
  std::vector<SeqData> seqs;
  double reward_sum = 0.0;
  for (const Trajectory& t : batch) {
    SeqData s;
    s.reward = t.reward.value_or(0.0);
    s.group = t.group;
    reward_sum += s.reward;
    std::optional<TokenId> prev;
    for (const Message& m : t.messages) {
      if (m.role == Role::Model) {
        if (mode == Algorithm::Distill && m.teacher_logprobs.size() != m.tokens.size())
          fail(ErrorKind::InvalidBatch,
               "trajectory " + std::to_string(t.id) + " lacks teacher log-probs");
        for (std::size_t j = 0; j < m.tokens.size(); ++j) {
          const TokenId tok = m.tokens[j];
          const ContextId ctx = static_cast<ContextId>(prev.value_or(0) % C);
          TokenLogProbs tl;
          tl.lp_infer_old = m.logprobs.at(j);
          tl.lp_train_old = logprob_train(weights_at(m.version), ctx, tok);
          tl.lp_train_cur = logprob_train(current_, ctx, tok);
          s.tokens.push_back(tl);
          if (mode == Algorithm::Distill) s.teacher.push_back(m.teacher_logprobs[j]);
          p.refs.push_back({ctx, tok});
          prev = tok;
        }
      } else if (!m.tokens.empty()) {
        prev = m.tokens.back();
      }
    }
    if (s.tokens.empty())
      fail(ErrorKind::InvalidTrajectory, "trajectory " + std::to_string(t.id) + " has no model tokens");
    seqs.push_back(std::move(s));
  }
  p.mean_reward = batch.empty() ? 0.0 : reward_sum / static_cast<double>(batch.size());

  switch (mode) {
    case Algorithm::IcePop: {
      std::vector<Group> groups;
      for (std::size_t i = 0; i < seqs.size(); ++i) {
        if (i == 0 || seqs[i].group != seqs[i - 1].group) groups.emplace_back();
        groups.back().members.push_back(Sequence{seqs[i].tokens, seqs[i].reward});
      }
      p.lg = icepop_loss_grad(groups, opts_.hp);
      break;
    }
    case Algorithm::Dsis: {
      std::vector<AdvantagedSequence> adv_seqs;
      for (std::size_t i = 0; i < seqs.size();) {
        std::size_t j = i;
        std::vector<double> rewards;
        while (j < seqs.size() && seqs[j].group == seqs[i].group) rewards.push_back(seqs[j++].reward);
        const auto adv = group_advantages_centered(rewards);
        for (std::size_t k = i; k < j; ++k) adv_seqs.push_back({seqs[k].tokens, adv[k - i]});
        i = j;
      }
      p.lg = async_pg_loss_grad(adv_seqs, opts_.hp);
      break;
    }
    case Algorithm::Distill: {
      std::vector<DistillSequence> ds;
      for (const SeqData& s : seqs) ds.push_back({s.tokens, s.teacher});
      p.lg = distill_loss_grad(ds, opts_.hp);
      break;
    }
  }
  return p;
}

double Trainer::evaluate_loss(const std::vector<Trajectory>& batch, Algorithm mode) const {
  return prepare(batch, mode).lg.loss;
}

StepReport Trainer::train_step(const std::vector<Trajectory>& batch, Algorithm mode) {
  const Prepared p = prepare(batch, mode);
  const std::size_t V = current_.vocab_size;
  std::vector<double> grad(current_.logits.size(), 0.0);
  StepReport rep;
  rep.loss = p.lg.loss;
  rep.mean_reward = p.mean_reward;
  rep.model_tokens = p.refs.size();
  for (std::size_t k = 0; k < p.refs.size(); ++k) {
    const double d = p.lg.dloss_dlp[k];
    if (d == 0.0) {
      ++rep.masked_tokens;
      continue;
    }
    const auto g = grad_logprob(current_, p.refs[k].ctx, p.refs[k].token);
    double* row = grad.data() + static_cast<std::size_t>(p.refs[k].ctx) * V;
    for (std::size_t j = 0; j < V; ++j) row[j] += d * g[j];
  }
  for (std::size_t i = 0; i < grad.size(); ++i) {
    opt_.momentum[i] = opt_.momentum_coef * opt_.momentum[i] + grad[i];
    current_.logits[i] -= opt_.learning_rate * opt_.momentum[i];
  }
  ++updates_;
  return rep;
}

std::optional<Version> Trainer::maybe_sync() {
  if (!sync_.due(updates_)) return std::nullopt;
  const Version v = store_.publish(current_);
  current_.version = v;
  opt_.reset();
  return v;
}

Trainer::ConsumeResult Trainer::consume(const std::vector<Trajectory>& batch) {
  ConsumeResult r;
  const std::vector<Trajectory> kept = filter_batch(batch, r.counts);
  if (kept.empty()) return r;
  r.step = train_step(kept, opts_.algorithm);
  r.published = maybe_sync();
  return r;
}

}  // namespace arl
