#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "ctrldec/errors.hpp"
#include "ctrldec/oracle.hpp"
#include "ctrldec/random.hpp"
#include "ctrldec/reward.hpp"
#include "ctrldec/scorer.hpp"
#include "ctrldec/seqmodel.hpp"

namespace ctrldec {

// ---------------------------------------------------------------------------
// Policy specification

struct BasePolicy {};

struct TokenwisePolicy {
  double lambda = 0.0;
  std::shared_ptr<const PrefixScorer> scorer;
};

struct BlockwisePolicy {
  int k = 1;
  int m = 1;
  std::shared_ptr<const PrefixScorer> scorer;
};

struct BestOfKPolicy {
  int k = 1;
  std::shared_ptr<const RewardFn> reward;
};

struct DecodePolicySpec {
  std::variant<BasePolicy, TokenwisePolicy, BlockwisePolicy, BestOfKPolicy> strategy;
  std::uint64_t seed = 0;

  std::string name() const {
    static const char* names[] = {"base", "tokenwise", "blockwise", "best-of-k"};
    return names[strategy.index()];
  }

  void validate() const {
    std::visit(
        [](const auto& s) {
          using S = std::decay_t<decltype(s)>;
          if constexpr (std::is_same_v<S, TokenwisePolicy>) {
            if (!(s.lambda >= 0.0) || !std::isfinite(s.lambda)) throw ValidationError("tokenwise: lambda must be finite and >= 0");
            if (!s.scorer) throw ValidationError("tokenwise: scorer required");
          } else if constexpr (std::is_same_v<S, BlockwisePolicy>) {
            if (s.k < 1 || s.m < 1) throw ValidationError("blockwise: K and M must be >= 1");
            if (!s.scorer) throw ValidationError("blockwise: scorer required");
          } else if constexpr (std::is_same_v<S, BestOfKPolicy>) {
            if (s.k < 1) throw ValidationError("best-of-K: K must be >= 1");
            if (!s.reward) throw ValidationError("best-of-K: reward required");
          }
        },
        strategy);
  }
};

// ---------------------------------------------------------------------------
// Trace

struct TokenStep {
  std::vector<double> policy;  // aligned next-token distribution
  Token token = 0;
  double aligned_logprob = 0.0;
  double base_logprob = 0.0;
  double kl = 0.0;  // tokenwise KL(policy || pi_ref) at this step
};

struct BlockStep {
  std::size_t offset = 0;  // prefix length when the block started
  std::vector<Sequence> candidates;
  std::vector<double> scores;
  std::size_t chosen = 0;
};

struct DecodeTrace {
  std::string strategy;
  Sequence prompt;
  Sequence response;
  std::uint64_t seed = 0;
  std::uint64_t stream_offset = 0;  // uniforms drawn from the stream before decoding began
  std::vector<TokenStep> token_steps;
  std::vector<BlockStep> block_steps;
  std::optional<double> aligned_logprob;  // known for base and tokenwise decoding
  double base_logprob = 0.0;
  bool forced_eos = false;  // EOS appended at the horizon outside candidate selection

  double mean_token_kl() const {
    if (token_steps.empty()) return 0.0;
    double s = 0.0;
    for (const auto& st : token_steps) s += st.kl;
    return s / static_cast<double>(token_steps.size());
  }
};

/// Stream for candidate k of block `step`. Candidate 0 always reads the caller's
/// stream, so K = 1 reproduces base sampling draw for draw; the others get
/// substreams keyed by (root seed, stream offset at decode start, step, k).
class CandidateStreams {
 public:
  explicit CandidateStreams(RandomStream& main) : main_(main), start_(main.draws()) {}
  std::uint64_t start() const noexcept { return start_; }

  template <class F>
  decltype(auto) with(std::size_t step, std::size_t k, F&& f) {
    if (k == 0) return f(main_);
    RandomStream sub = main_.substream(derive_seed(start_, step), k);
    return f(sub);
  }

 private:
  RandomStream& main_;
  std::uint64_t start_;
};

// ---------------------------------------------------------------------------
// Decoders

/// pi_theta(z|ctx) proportional to pi_ref(z|ctx) exp(lambda V_theta(ctx + z)), in log domain.
template <ContextScorer S>
Distribution tokenwise_policy(const BaseModel& model, const S& scorer, double lambda, const Context& ctx) {
  if (ctx.terminated(model.eos())) throw PreconditionError("tokenwise_policy: context terminated");
  Distribution base = model.next_token_dist(ctx);
  return optimal_policy_closed_form(lambda, base, score_all_next(scorer, ctx, model.vocab()));
}

inline DecodeTrace begin_trace(std::string strategy, const Sequence& prompt, const RandomStream& rng) {
  DecodeTrace tr;
  tr.strategy = std::move(strategy);
  tr.prompt = prompt;
  tr.seed = rng.seed();
  tr.stream_offset = rng.draws();
  return tr;
}

inline DecodeTrace decode_base(const BaseModel& model, const Sequence& prompt, RandomStream& rng) {
  DecodeTrace tr = begin_trace("base", prompt, rng);
  tr.response = sample_sequence(model, prompt, rng);
  tr.base_logprob = sequence_logprob(model, prompt, tr.response);
  tr.aligned_logprob = tr.base_logprob;
  return tr;
}

template <ContextScorer S>
DecodeTrace decode_tokenwise(const BaseModel& model, const S& scorer, double lambda, const Sequence& prompt, RandomStream& rng) {
  if (!(lambda >= 0.0)) throw PreconditionError("decode_tokenwise: lambda must be >= 0");
  DecodeTrace tr = begin_trace("tokenwise", prompt, rng);
  Context ctx{prompt, {}};
  model.check_tokens(ctx);
  double aligned = 0.0;
  while (!ctx.terminated(model.eos())) {
    Distribution base = model.next_token_dist(ctx);
    Distribution q = optimal_policy_closed_form(lambda, base, score_all_next(scorer, ctx, model.vocab()));
    const auto z = sample_index(q.probs, rng);
    TokenStep st;
    st.token = static_cast<Token>(z);
    st.aligned_logprob = std::log(q[z]);
    st.base_logprob = std::log(base[z]);
    for (std::size_t i = 0; i < q.size(); ++i)
      if (q[i] > 0.0) st.kl += q[i] * std::log(q[i] / base[i]);
    st.policy = std::move(q.probs);
    aligned += st.aligned_logprob;
    tr.base_logprob += st.base_logprob;
    tr.token_steps.push_back(std::move(st));
    ctx.prefix.push_back(static_cast<Token>(z));
  }
  tr.aligned_logprob = aligned;
  tr.response = std::move(ctx.prefix);
  return tr;
}

namespace detail {

// Roll pi_ref forward from ctx for at most m tokens, stopping at EOS.
inline Sequence sample_block(const BaseModel& model, const Context& ctx, int m, RandomStream& rng) {
  Context c = ctx;
  Sequence block;
  while (static_cast<int>(block.size()) < m && !c.terminated(model.eos())) {
    Distribution d = model.next_token_dist(c);
    const auto z = static_cast<Token>(sample_index(d.probs, rng));
    c.prefix.push_back(z);
    block.push_back(z);
  }
  return block;
}

inline std::size_t argmax_lowest(const std::vector<double>& v) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i)
    if (v[i] > v[best]) best = i;
  return best;
}

}  // namespace detail

/// Blockwise best-of-K: draw K continuations of up to M tokens from pi_ref, keep the
/// one whose final context scores highest (ties to the lowest index), repeat until
/// the kept block carries EOS. At prefix length t_max - 1 EOS is appended directly.
template <ContextScorer S>
DecodeTrace decode_blockwise(const BaseModel& model, const S& scorer, int k, int m, const Sequence& prompt, RandomStream& rng) {
  if (k < 1 || m < 1) throw PreconditionError("decode_blockwise: K and M must be >= 1");
  DecodeTrace tr = begin_trace("blockwise", prompt, rng);
  CandidateStreams streams(rng);
  Context ctx{prompt, {}};
  model.check_tokens(ctx);
  for (std::size_t step = 0; !ctx.terminated(model.eos()); ++step) {
    if (static_cast<int>(ctx.prefix.size()) == model.t_max() - 1) {
      ctx.prefix.push_back(model.eos());
      tr.forced_eos = true;
      break;
    }
    BlockStep bs;
    bs.offset = ctx.prefix.size();
    for (int c = 0; c < k; ++c) {
      Sequence w = streams.with(step, static_cast<std::size_t>(c), [&](RandomStream& s) { return detail::sample_block(model, ctx, m, s); });
      Context full = ctx;
      full.prefix.insert(full.prefix.end(), w.begin(), w.end());
      bs.scores.push_back(scorer.score(full));
      bs.candidates.push_back(std::move(w));
    }
    bs.chosen = detail::argmax_lowest(bs.scores);
    const Sequence& w = bs.candidates[bs.chosen];
    ctx.prefix.insert(ctx.prefix.end(), w.begin(), w.end());
    tr.block_steps.push_back(std::move(bs));
  }
  tr.response = std::move(ctx.prefix);
  tr.base_logprob = sequence_logprob(model, prompt, tr.response);
  return tr;
}

/// K full rollouts, keep the highest terminal reward (ties to the lowest index).
/// Candidate streams match decode_blockwise's first block, so the two agree under
/// common random numbers when M >= t_max and the scorer equals r on complete sequences.
inline DecodeTrace best_of_k(const BaseModel& model, const RewardFn& reward, int k, const Sequence& prompt, RandomStream& rng) {
  if (k < 1) throw PreconditionError("best_of_k: K must be >= 1");
  DecodeTrace tr = begin_trace("best-of-k", prompt, rng);
  CandidateStreams streams(rng);
  BlockStep bs;
  for (int c = 0; c < k; ++c) {
    Sequence y = streams.with(0, static_cast<std::size_t>(c), [&](RandomStream& s) { return sample_sequence(model, prompt, s); });
    bs.scores.push_back(reward.terminal(prompt, y));
    bs.candidates.push_back(std::move(y));
  }
  bs.chosen = detail::argmax_lowest(bs.scores);
  tr.response = bs.candidates[bs.chosen];
  tr.block_steps.push_back(std::move(bs));
  tr.base_logprob = sequence_logprob(model, prompt, tr.response);
  return tr;
}

inline DecodeTrace decode(const DecodePolicySpec& spec, const BaseModel& model, const Sequence& prompt, RandomStream& rng) {
  spec.validate();
  return std::visit(
      [&](const auto& s) -> DecodeTrace {
        using P = std::decay_t<decltype(s)>;
        if constexpr (std::is_same_v<P, BasePolicy>) return decode_base(model, prompt, rng);
        else if constexpr (std::is_same_v<P, TokenwisePolicy>) return decode_tokenwise(model, *s.scorer, s.lambda, prompt, rng);
        else if constexpr (std::is_same_v<P, BlockwisePolicy>) return decode_blockwise(model, *s.scorer, s.k, s.m, prompt, rng);
        else return best_of_k(model, *s.reward, s.k, prompt, rng);
      },
      spec.strategy);
}

/// Replays a trace from its recorded seed and stream offset.
inline DecodeTrace replay(const DecodePolicySpec& spec, const BaseModel& model, const DecodeTrace& trace) {
  RandomStream rng(trace.seed);
  rng.discard(trace.stream_offset);
  return decode(spec, model, trace.prompt, rng);
}

// ---------------------------------------------------------------------------
// Exact output distributions (enumerable fixtures)

struct OutcomeProb {
  Sequence response;
  double prob = 0.0;       // under the decoding policy
  double base_prob = 0.0;  // under pi_ref
};

/// Selection probabilities of best-of-K over a finite candidate law with scores,
/// ties broken toward the lowest draw index:
///   P(i) = p_i / P(s = s_i) * (F(<= s_i)^K - F(< s_i)^K).
inline std::vector<double> best_of_k_selection(const std::vector<double>& probs, const std::vector<double>& scores, int k) {
  std::map<double, double> mass_at;
  for (std::size_t i = 0; i < probs.size(); ++i) mass_at[scores[i]] += probs[i];
  std::map<double, double> below;  // F(< s)
  double run = 0.0;
  for (auto& [s, mass] : mass_at) {
    below[s] = run;
    run += mass;
  }
  std::vector<double> out(probs.size(), 0.0);
  for (std::size_t i = 0; i < probs.size(); ++i) {
    if (probs[i] <= 0.0) continue;
    const double lo = below[scores[i]];
    const double eq = mass_at[scores[i]];
    const double hi = std::min(1.0, lo + eq);
    out[i] = probs[i] / eq * (std::pow(hi, k) - std::pow(lo, k));
  }
  return out;
}

template <ContextScorer S>
std::vector<OutcomeProb> exact_tokenwise_distribution(const BaseModel& model, const S& scorer, double lambda, const Sequence& prompt) {
  std::vector<OutcomeProb> out;
  Context ctx{prompt, {}};
  model.check_tokens(ctx);
  auto rec = [&](auto&& self, double q, double p) -> void {
    if (ctx.terminated(model.eos())) {
      out.push_back({ctx.prefix, q, p});
      return;
    }
    Distribution base = model.next_token_dist(ctx);
    Distribution pol = optimal_policy_closed_form(lambda, base, score_all_next(scorer, ctx, model.vocab()));
    for (std::size_t z = 0; z < pol.size(); ++z) {
      if (pol[z] <= 0.0) continue;
      ctx.prefix.push_back(static_cast<Token>(z));
      self(self, q * pol[z], p * base[z]);
      ctx.prefix.pop_back();
    }
  };
  rec(rec, 1.0, 1.0);
  return out;
}

inline std::vector<OutcomeProb> exact_best_of_k_distribution(const BaseModel& model, const RewardFn& reward, int k, const Sequence& prompt) {
  if (k < 1) throw PreconditionError("best-of-K: K must be >= 1");
  auto seqs = enumerate_sequences(model, prompt);
  std::vector<double> p, s;
  for (const auto& ws : seqs) {
    p.push_back(ws.prob);
    s.push_back(reward.terminal(prompt, ws.response));
  }
  auto sel = best_of_k_selection(p, s, k);
  std::vector<OutcomeProb> out;
  for (std::size_t i = 0; i < seqs.size(); ++i)
    if (sel[i] > 0.0) out.push_back({seqs[i].response, sel[i], seqs[i].prob});
  return out;
}

/// Enumerates the blockwise selection process block by block.
template <ContextScorer S>
std::vector<OutcomeProb> exact_blockwise_distribution(const BaseModel& model, const S& scorer, int k, int m, const Sequence& prompt) {
  if (k < 1 || m < 1) throw PreconditionError("blockwise: K and M must be >= 1");
  std::map<Sequence, double> acc;
  Context root{prompt, {}};
  model.check_tokens(root);

  auto blocks_from = [&](const Context& ctx) {
    std::vector<WeightedSequence> blocks;
    Context c = ctx;
    Sequence w;
    auto rec = [&](auto&& self, double prob) -> void {
      if (static_cast<int>(w.size()) == m || c.terminated(model.eos())) {
        blocks.push_back({w, prob});
        return;
      }
      Distribution d = model.next_token_dist(c);
      for (std::size_t z = 0; z < d.size(); ++z) {
        if (d[z] <= 0.0) continue;
        c.prefix.push_back(static_cast<Token>(z));
        w.push_back(static_cast<Token>(z));
        self(self, prob * d[z]);
        w.pop_back();
        c.prefix.pop_back();
      }
    };
    rec(rec, 1.0);
    return blocks;
  };

  auto rec = [&](auto&& self, const Context& ctx, double prob) -> void {
    if (ctx.terminated(model.eos())) {
      acc[ctx.prefix] += prob;
      return;
    }
    if (static_cast<int>(ctx.prefix.size()) == model.t_max() - 1) {
      acc[ctx.extended(model.eos()).prefix] += prob;
      return;
    }
    auto blocks = blocks_from(ctx);
    std::vector<double> p, s;
    for (const auto& b : blocks) {
      Context full = ctx;
      full.prefix.insert(full.prefix.end(), b.response.begin(), b.response.end());
      p.push_back(b.prob);
      s.push_back(scorer.score(full));
    }
    auto sel = best_of_k_selection(p, s, k);
    for (std::size_t i = 0; i < blocks.size(); ++i) {
      if (sel[i] <= 0.0) continue;
      Context next = ctx;
      next.prefix.insert(next.prefix.end(), blocks[i].response.begin(), blocks[i].response.end());
      self(self, next, prob * sel[i]);
    }
  };
  rec(rec, root, 1.0);

  std::vector<OutcomeProb> out;
  for (const auto& [y, q] : acc) out.push_back({y, q, std::exp(sequence_logprob(model, prompt, y))});
  return out;
}

/// Sequence-level KL(q || pi_ref) and E_q[r] of an exact outcome law.
inline double outcome_kl(const std::vector<OutcomeProb>& law) {
  double kl = 0.0;
  for (const auto& o : law) {
    if (o.prob <= 0.0) continue;
    if (o.base_prob <= 0.0) return kPosInf;
    kl += o.prob * std::log(o.prob / o.base_prob);
  }
  return std::max(kl, 0.0);
}

inline double outcome_expected_reward(const std::vector<OutcomeProb>& law, const RewardFn& reward, const Sequence& prompt) {
  double e = 0.0;
  for (const auto& o : law) e += o.prob * reward.terminal(prompt, o.response);
  return e;
}

}  // namespace ctrldec
