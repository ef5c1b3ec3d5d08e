#include "asyncrl/verify.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <sstream>

#include "asyncrl/context_manager.hpp"
#include "asyncrl/error.hpp"
#include "asyncrl/rl_math.hpp"
#include "asyncrl/router.hpp"
#include "asyncrl/tito_gateway.hpp"

namespace arl {

const std::vector<std::string>& verify_suite_names() {
  static const std::vector<std::string> names = {"loss-equivalence", "gradient-check", "hashing",
                                                 "tito",             "context",        "dsa-determinism"};
  return names;
}

namespace {

// Reference loss written straight from the objective, one nested sum at a
// time, sharing nothing with the kernels under test.
double reference_icepop(const std::vector<Group>& groups, const RLHyperparams& hp) {
  double batch = 0.0;
  for (const Group& g : groups) {
    const double G = static_cast<double>(g.members.size());
    double mean = 0.0;
    for (const Sequence& s : g.members) mean += s.reward;
    mean /= G;
    double var = 0.0;
    for (const Sequence& s : g.members) var += (s.reward - mean) * (s.reward - mean);
    const double sd = std::sqrt(var / G);
    double outer = 0.0;
    for (const Sequence& s : g.members) {
      const double a = sd > 0.0 ? (s.reward - mean) / sd : 0.0;
      double inner = 0.0;
      double len = 0.0;
      for (const TokenLogProbs& t : s.tokens) {
        if (!t.is_model_token) continue;
        len += 1.0;
        const double rho = std::exp(t.lp_train_old) / std::exp(t.lp_infer_old);
        const double pop = (rho >= 1.0 / hp.beta && rho <= hp.beta) ? rho : 0.0;
        const double r = std::exp(t.lp_train_cur) / std::exp(t.lp_train_old);
        const double rc = std::max(1.0 - hp.eps_low, std::min(r, 1.0 + hp.eps_high));
        inner += pop * std::min(r * a, rc * a);
      }
      outer += inner / len;
    }
    batch += outer / G;
  }
  return -batch / static_cast<double>(groups.size());
}

std::vector<Group> random_groups(std::mt19937_64& rng, std::size_t max_g, std::size_t max_tokens) {
  std::uniform_int_distribution<std::size_t> ngroups(1, 3), gsize(1, max_g), ntok(1, max_tokens);
  std::uniform_real_distribution<double> lp(-3.0, -0.05), shift(-0.8, 0.8), coin(0.0, 1.0);
  std::vector<Group> groups(ngroups(rng));
  for (Group& g : groups) {
    g.members.resize(gsize(rng));
    for (Sequence& s : g.members) {
      s.reward = coin(rng) < 0.5 ? 0.0 : (coin(rng) < 0.5 ? 1.0 : coin(rng));
      const std::size_t n = ntok(rng);
      for (std::size_t t = 0; t < n; ++t) {
        TokenLogProbs x;
        x.lp_infer_old = lp(rng);
        x.lp_train_old = x.lp_infer_old + shift(rng);
        x.lp_train_cur = x.lp_train_old + 0.5 * shift(rng);
        x.is_model_token = t == 0 || coin(rng) < 0.8;
        s.tokens.push_back(x);
      }
    }
  }
  return groups;
}

SuiteResult loss_equivalence() {
  std::mt19937_64 rng(0x10551ULL);
  const RLHyperparams hp;
  double worst = 0.0;
  for (int i = 0; i < 1000; ++i) {
    const auto groups = random_groups(rng, 8, 16);
    worst = std::max(worst, std::abs(icepop_loss(groups, hp) - reference_icepop(groups, hp)));
  }
  std::ostringstream d;
  d << "1000 batches, max |diff| = " << worst;
  return {"loss-equivalence", worst <= 1e-12, d.str()};
}

// ||analytic - fd|| / ||analytic|| over one case; absolute when the
// analytic gradient vanishes. Per-component ratios would amplify the
// finite-difference roundoff on tiny components.
double rel_err(const std::vector<double>& analytic, const std::vector<double>& fd) {
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    num += (analytic[i] - fd[i]) * (analytic[i] - fd[i]);
    den += analytic[i] * analytic[i];
  }
  return den == 0.0 ? std::sqrt(num) : std::sqrt(num / den);
}

// Perturbs lp_train_cur of one token while all stop-gradient quantities keep
// the values they had at the base point.
SuiteResult gradient_check() {
  std::mt19937_64 rng(0x9ad1e47ULL);
  const RLHyperparams hp;
  const double h = 1e-6;
  std::uniform_real_distribution<double> lp(-3.0, -0.05), u(0.0, 1.0);
  double worst = 0.0;
  std::size_t cases = 0;

  // Clipped surrogate: keep points away from the clip corners and the pop
  // boundary so the finite difference stays on one smooth branch.
  auto interior = [&](const TokenLogProbs& t) {
    const double r = std::exp(t.lp_train_cur - t.lp_train_old);
    const double rho = std::exp(t.lp_train_old - t.lp_infer_old);
    const double lo = 1.0 - hp.eps_low, hi = 1.0 + hp.eps_high;
    return std::abs(r - lo) > 1e-3 && std::abs(r - hi) > 1e-3 && std::abs(rho - 1.0 / hp.beta) > 1e-3 &&
           std::abs(rho - hp.beta) > 1e-3;
  };

  while (cases < 200) {
    auto groups = random_groups(rng, 6, 6);
    bool ok = true;
    for (const auto& g : groups)
      for (const auto& s : g.members)
        for (const auto& t : s.tokens) ok = ok && interior(t);
    if (!ok) continue;
    const LossAndGrad lg = icepop_loss_grad(groups, hp);
    std::vector<double> fd(lg.dloss_dlp.size());
    std::size_t k = 0;
    for (auto& g : groups)
      for (auto& s : g.members)
        for (auto& t : s.tokens) {
          const double base = t.lp_train_cur;
          t.lp_train_cur = base + h;
          const double up = icepop_loss(groups, hp);
          t.lp_train_cur = base - h;
          const double dn = icepop_loss(groups, hp);
          t.lp_train_cur = base;
          fd[k++] = (up - dn) / (2 * h);
        }
    worst = std::max(worst, rel_err(lg.dloss_dlp, fd));
    ++cases;
  }

  // Double-sided IS: f(r) is a stop-gradient weight, frozen at the base point.
  for (int c = 0; c < 200; ++c) {
    std::vector<AdvantagedSequence> seqs(1 + rng() % 4);
    for (auto& s : seqs) {
      s.advantage = u(rng) - 0.5;
      for (std::size_t t = 0; t < 1 + rng() % 6; ++t) {
        TokenLogProbs x;
        x.lp_infer_old = lp(rng);
        x.lp_train_cur = x.lp_infer_old + 0.6 * (u(rng) - 0.5);
        s.tokens.push_back(x);
      }
    }
    const LossAndGrad lg = async_pg_loss_grad(seqs, hp);
    std::vector<double> f;
    std::size_t n = 0;
    for (const auto& s : seqs)
      for (const auto& t : s.tokens) {
        f.push_back(dsis_factor(std::exp(t.lp_train_cur - t.lp_infer_old), hp.eps_l, hp.eps_h));
        ++n;
      }
    auto frozen = [&](const std::vector<AdvantagedSequence>& ss) {
      double total = 0.0;
      std::size_t k = 0;
      for (const auto& s : ss)
        for (const auto& t : s.tokens) total += f[k++] * s.advantage * t.lp_train_cur;
      return -total / static_cast<double>(n);
    };
    std::vector<double> fd(lg.dloss_dlp.size());
    std::size_t k = 0;
    for (auto& s : seqs)
      for (auto& t : s.tokens) {
        const double base = t.lp_train_cur;
        t.lp_train_cur = base + h;
        const double up = frozen(seqs);
        t.lp_train_cur = base - h;
        const double dn = frozen(seqs);
        t.lp_train_cur = base;
        fd[k++] = (up - dn) / (2 * h);
      }
    worst = std::max(worst, rel_err(lg.dloss_dlp, fd));
  }

  // Distillation: the advantage is detached, so it is frozen too.
  for (std::size_t c = 0; c < 200;) {
    std::vector<DistillSequence> seqs(1 + rng() % 4);
    bool ok = true;
    for (auto& s : seqs)
      for (std::size_t t = 0; t < 1 + rng() % 6; ++t) {
        TokenLogProbs x;
        x.lp_infer_old = lp(rng);
        x.lp_train_old = x.lp_infer_old + 0.4 * (u(rng) - 0.5);
        x.lp_train_cur = x.lp_train_old + 0.4 * (u(rng) - 0.5);
        ok = ok && interior(x);
        s.tokens.push_back(x);
        s.lp_teacher.push_back(lp(rng));
      }
    if (!ok) continue;
    const LossAndGrad lg = distill_loss_grad(seqs, hp);
    std::vector<double> adv;
    for (const auto& s : seqs)
      for (std::size_t t = 0; t < s.tokens.size(); ++t)
        adv.push_back(distill_advantage(s.lp_teacher[t], s.tokens[t].lp_train_cur));
    auto frozen = [&](const std::vector<DistillSequence>& ss) {
      double total = 0.0;
      std::size_t k = 0;
      for (const auto& s : ss) {
        double seq = 0.0;
        for (const auto& t : s.tokens) seq += icepop_token_term(t, adv[k++], hp);
        total += seq / static_cast<double>(s.tokens.size());
      }
      return -total / static_cast<double>(ss.size());
    };
    std::vector<double> fd(lg.dloss_dlp.size());
    std::size_t k = 0;
    for (auto& s : seqs)
      for (auto& t : s.tokens) {
        const double base = t.lp_train_cur;
        t.lp_train_cur = base + h;
        const double up = frozen(seqs);
        t.lp_train_cur = base - h;
        const double dn = frozen(seqs);
        t.lp_train_cur = base;
        fd[k++] = (up - dn) / (2 * h);
      }
    worst = std::max(worst, rel_err(lg.dloss_dlp, fd));
    ++c;
  }

  std::ostringstream d;
  d << "3 x 200 cases, max rel err = " << worst;
  return {"gradient-check", worst < 1e-6, d.str()};
}

SuiteResult hashing() {
  std::mt19937_64 rng(0x4a54ULL);
  std::vector<std::uint64_t> ids(10000);
  for (auto& id : ids) id = rng();
  Router router;
  for (RankId r = 0; r < 4; ++r) router.add_rank(r);
  std::map<RankId, std::size_t> per_rank;
  bool sticky = true;
  for (auto id : ids) {
    const RankId r = router.route(id);
    ++per_rank[r];
    sticky = sticky && router.route(id) == r;
  }
  double lo_share = 1.0, hi_share = 0.0;
  for (const auto& [r, n] : per_rank) {
    const double s = static_cast<double>(n) / static_cast<double>(ids.size());
    lo_share = std::min(lo_share, s);
    hi_share = std::max(hi_share, s);
  }
  const double remap = router.add_rank(4, ids);

  Router kv;
  kv.add_rank(0);
  kv.add_rank(1);
  std::uint64_t charged = 0, naive = 0;
  for (std::uint64_t turn = 1; turn <= 10; ++turn) {
    charged += kv.prefill_cost(42, 100 * turn);
    naive += 100 * turn;
  }
  const double ratio = static_cast<double>(naive) / static_cast<double>(charged);

  const bool ok = sticky && per_rank.size() == 4 && lo_share >= 0.15 && hi_share <= 0.35 && remap >= 0.10 &&
                  remap <= 0.30 && charged == 1000 && std::abs(ratio - 5.5) < 1e-12;
  std::ostringstream d;
  d << "shares [" << lo_share << ", " << hi_share << "], remap 4->5 = " << remap << ", prefill " << charged
    << " vs naive " << naive;
  return {"hashing", ok, d.str()};
}

SuiteResult tito() {
  const TitoDemo demo = run_tito_demo(0x7170ULL, 500);
  std::ostringstream d;
  d << "text round trip " << 100.0 * demo.text_rate() << "% mismatched, TITO " << 100.0 * demo.tito_rate() << "%";
  return {"tito", demo.text_rate() > 0.05 && demo.tito_mismatches == 0, d.str()};
}

SuiteResult context() {
  std::mt19937_64 rng(0xc0de7ULL);
  const std::size_t k = 5, T = 32768;
  bool bounded = true, untouched = true;
  for (int e = 0; e < 200; ++e) {
    ManagedContext ctx;
    ctx.question.assign(1 + rng() % 64, 1);
    const std::size_t rounds = rng() % 120;
    for (std::size_t i = 0; i < rounds; ++i) {
      Round r;
      r.reasoning.assign(rng() % 200, 2);
      r.action.assign(1 + rng() % 20, 3);
      r.observation.assign(rng() % 2000, 4);
      ctx.rounds.push_back(r);
      const ManagedContext folded = fold_keep_recent(ctx, k);
      untouched = untouched && folded.question == ctx.question;
      for (std::size_t j = 0; j < ctx.rounds.size(); ++j) {
        untouched = untouched && folded.rounds[j].reasoning == ctx.rounds[j].reasoning &&
                    folded.rounds[j].action == ctx.rounds[j].action;
        if (j + k >= ctx.rounds.size())
          untouched = untouched && folded.rounds[j].observation == ctx.rounds[j].observation;
      }
      ctx = hierarchical_manage(std::move(ctx), T, k);
      bounded = bounded && context_tokens(ctx) <= T;
    }
  }
  std::size_t worse = 0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    KeyChaseAgentOptions o;
    o.seed = seed;
    o.h = 3 + static_cast<std::uint32_t>(seed % 20);
    o.managed = false;
    const auto plain = run_key_chase_agent(o);
    o.managed = true;
    const auto managed = run_key_chase_agent(o);
    if (managed.steps < plain.steps) ++worse;
  }
  std::ostringstream d;
  d << "bound " << (bounded ? "held" : "violated") << ", fold invariants " << (untouched ? "held" : "violated")
    << ", managed agent behind on " << worse << "/100 seeds";
  return {"context", bounded && untouched && worse == 0, d.str()};
}

SuiteResult dsa_determinism(bool inject_fault) {
  const TopKSelector select = inject_fault ? randomized_tie_topk(0xfa17ULL) : TopKSelector(deterministic_topk);
  const std::vector<double> tied = {1.0, 3.0, 3.0, 0.5, 3.0, 1.0, 3.0, 2.0};
  const auto first = select(tied, 3);
  bool repeatable = true;
  for (int i = 0; i < 1000; ++i) repeatable = repeatable && select(tied, 3) == first;
  const double rate = sparse_pop_rate(select, 0xd5aULL, 5000);
  std::ostringstream d;
  d << (inject_fault ? "randomized-tie double: " : "") << "repeat calls " << (repeatable ? "identical" : "diverged")
    << ", sparse pop-mask rate " << rate;
  return {"dsa-determinism", repeatable && rate == 0.0, d.str()};
}

}  // namespace

double sparse_pop_rate(const TopKSelector& select, std::uint64_t seed, std::size_t samples) {
  const std::size_t contexts = 16, vocab = 32, k = 8;
  PolicyWeights w(contexts, vocab);
  std::mt19937_64 rng(seed);
  for (double& x : w.logits) x = 0.5 * static_cast<double>(rng() % 4);
  const InferPerturbation none = InferPerturbation::none();
  std::size_t popped = 0;
  for (std::size_t i = 0; i < samples; ++i) {
    const auto ctx = static_cast<ContextId>(i % contexts);
    const SampledToken s = sample_sparse_action(w, ctx, mix_seed(seed, i), k, none, select);
    const double lp_train = sparse_logprob(w, ctx, s.token, k, none, EvalMode::Train, select);
    const double rho = std::isfinite(lp_train) ? std::exp(lp_train - s.lp_infer) : 0.0;
    if (pop_mask(rho, 2.0) == 0.0) ++popped;
  }
  return static_cast<double>(popped) / static_cast<double>(samples);
}

TitoDemo run_tito_demo(std::uint64_t seed, std::size_t episodes) {
  const ToyTokenizer& tok = ToyTokenizer::standard();
  static const char* const kWords[] = {"the", "key", "then", "token", "ended", "in",   "a",  "table",
                                       "hello", "to",  "ready", "lookup", "answer", "7", "Q", "chase"};
  TitoGateway gw;
  std::mt19937_64 rng(seed);
  TitoDemo demo;
  demo.episodes = episodes;
  for (std::uint64_t e = 0; e < episodes; ++e) {
    gw.register_trajectory(e);
    std::vector<TokenId> sampled;
    std::uint32_t turn = 0;
    const std::size_t turns = 1 + rng() % 3;
    for (std::size_t t = 0; t < turns; ++t) {
      std::string text;
      for (std::size_t w = 0, n = 1 + rng() % 4; w < n; ++w) {
        if (w) text += ' ';
        text += kWords[rng() % std::size(kWords)];
      }
      // Sampled text is valid but its token split need not be the greedy
      // one: at every position any matching piece may come out.
      std::vector<TokenId> gen;
      for (std::size_t i = 0; i < text.size();) {
        std::vector<TokenId> fits;
        for (TokenId id = 0; id < tok.vocab_size(); ++id)
          if (text.compare(i, tok.piece(id).size(), tok.piece(id)) == 0) fits.push_back(id);
        gen.push_back(fits[rng() % fits.size()]);
        i += tok.piece(gen.back()).size();
      }
      const std::vector<double> lps(gen.size(), -std::log(static_cast<double>(tok.vocab_size())));
      sampled.insert(sampled.end(), gen.begin(), gen.end());
      gw.record_generation(TokenRecord{e, turn++, gen, lps, 0, Role::Model});
      gw.record_generation(TokenRecord{e, turn++, tok.encode(" ok."), {}, 0, Role::Environment});
    }
    std::vector<TokenId> exact;
    for (const TokenRecord& r : gw.fetch_exact(e))
      if (r.role == Role::Model) exact.insert(exact.end(), r.tokens.begin(), r.tokens.end());
    if (exact != sampled) ++demo.tito_mismatches;
    if (gw.text_round_trip(e, tok).mismatch) ++demo.text_mismatches;
  }
  return demo;
}

std::vector<SuiteResult> run_verify(const VerifyOptions& opts) {
  const auto& all = verify_suite_names();
  for (const auto& s : opts.suites)
    if (std::find(all.begin(), all.end(), s) == all.end())
      fail(ErrorKind::InvalidInput, "unknown suite '" + s + "'");
  auto wanted = [&](const std::string& name) {
    return opts.suites.empty() || std::find(opts.suites.begin(), opts.suites.end(), name) != opts.suites.end();
  };
  std::vector<SuiteResult> out;
  if (wanted("loss-equivalence")) out.push_back(loss_equivalence());
  if (wanted("gradient-check")) out.push_back(gradient_check());
  if (wanted("hashing")) out.push_back(hashing());
  if (wanted("tito")) out.push_back(tito());
  if (wanted("context")) out.push_back(context());
  if (wanted("dsa-determinism")) out.push_back(dsa_determinism(opts.inject_topk_fault));
  return out;
}

}  // namespace arl
