#pragma once

#include <charconv>
#include <chrono>
#include <cmath>
#include <future>
#include <limits>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "ctrldec/decode.hpp"
#include "ctrldec/errors.hpp"
#include "ctrldec/oracle.hpp"
#include "ctrldec/reward.hpp"
#include "ctrldec/scorer.hpp"
#include "ctrldec/seqmodel.hpp"

namespace ctrldec {

inline constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

// ---------------------------------------------------------------------------
// KL bounds

/// Best-of-K KL upper bound: log K - (K - 1) / K.
inline double kl_bound_bon(int k) {
  if (k < 1) throw ValidationError("kl_bound_bon: K must be >= 1");
  const double kk = static_cast<double>(k);
  return std::log(kk) - (kk - 1.0) / kk;
}

/// Blockwise extension: E_x (log K - (K - 1) / K) * ceil(L_x / M), mu-weighted.
inline double kl_bound_blockwise(int k, const PromptSet& prompts, std::span<const int> lengths, int m) {
  if (m < 1) throw ValidationError("kl_bound_blockwise: M must be >= 1");
  if (lengths.size() != prompts.size()) throw ValidationError("kl_bound_blockwise: one length per prompt");
  const double per_block = kl_bound_bon(k);
  double total = 0.0;
  for (std::size_t i = 0; i < lengths.size(); ++i) {
    if (lengths[i] < 1) throw ValidationError("kl_bound_blockwise: lengths must be >= 1");
    const int blocks = (lengths[i] + m - 1) / m;
    total += prompts.weights[i] * per_block * blocks;
  }
  return total;
}

// ---------------------------------------------------------------------------
// Exact laws (enumerable fixtures)

/// Output law of any strategy for one prompt, by enumeration.
inline std::vector<OutcomeProb> exact_policy_law(const DecodePolicySpec& spec, const BaseModel& model, const Sequence& prompt) {
  spec.validate();
  return std::visit(
      [&](const auto& s) -> std::vector<OutcomeProb> {
        using P = std::decay_t<decltype(s)>;
        if constexpr (std::is_same_v<P, BasePolicy>) {
          std::vector<OutcomeProb> out;
          for (auto& ws : enumerate_sequences(model, prompt)) out.push_back({std::move(ws.response), ws.prob, ws.prob});
          return out;
        } else if constexpr (std::is_same_v<P, TokenwisePolicy>) {
          return exact_tokenwise_distribution(model, *s.scorer, s.lambda, prompt);
        } else if constexpr (std::is_same_v<P, BlockwisePolicy>) {
          return exact_blockwise_distribution(model, *s.scorer, s.k, s.m, prompt);
        } else {
          return exact_best_of_k_distribution(model, *s.reward, s.k, prompt);
        }
      },
      spec.strategy);
}

inline double exact_sequence_kl(const DecodePolicySpec& spec, const BaseModel& model, const PromptSet& prompts) {
  double kl = 0.0;
  for (std::size_t i = 0; i < prompts.size(); ++i) kl += prompts.weights[i] * outcome_kl(exact_policy_law(spec, model, prompts.prompts[i]));
  return kl;
}

inline double exact_expected_reward(const DecodePolicySpec& spec, const BaseModel& model, const RewardFn& reward, const PromptSet& prompts) {
  double e = 0.0;
  for (std::size_t i = 0; i < prompts.size(); ++i)
    e += prompts.weights[i] * outcome_expected_reward(exact_policy_law(spec, model, prompts.prompts[i]), reward, prompts.prompts[i]);
  return e;
}

// ---------------------------------------------------------------------------
// Monte Carlo draws with paired seeds
//
// Draw i of a point with seed s uses:
//   prompt        RandomStream(derive_seed(s, i, 1))
//   policy/base   RandomStream(derive_seed(s, i, 0))   (shared: paired normalization)
//   opponent      RandomStream(derive_seed(s, i, 2))   (independent base draw for win rate)

struct Draw {
  Sequence prompt;
  DecodeTrace trace;
};

inline Draw draw_policy(const DecodePolicySpec& spec, const BaseModel& model, const PromptSet& prompts, std::uint64_t seed, std::size_t i) {
  RandomStream prompt_rng(derive_seed(seed, i, 1));
  Sequence x = prompts.draw(prompt_rng);
  RandomStream rng(derive_seed(seed, i, 0));
  DecodeTrace tr = decode(spec, model, x, rng);
  return {std::move(x), std::move(tr)};
}

struct MeanStderr {
  double mean = 0.0;
  double stderr_ = 0.0;
};

inline MeanStderr mean_stderr(const std::vector<double>& xs) {
  MeanStderr out;
  if (xs.empty()) return out;
  const double n = static_cast<double>(xs.size());
  for (double x : xs) out.mean += x;
  out.mean /= n;
  if (xs.size() < 2) return out;
  double ss = 0.0;
  for (double x : xs) ss += (x - out.mean) * (x - out.mean);
  out.stderr_ = std::sqrt(ss / (n - 1.0) / n);
  return out;
}

enum class KlMode { Exact, MonteCarlo };

struct KlEstimate {
  double value = 0.0;
  double stderr_ = 0.0;
  bool exact = false;
};

/// Sequence-level KL(pi || pi_ref) for base and tokenwise policies. Blockwise and
/// best-of-K likelihoods are intractable: use kl_bound_bon / kl_bound_blockwise.
inline KlEstimate estimate_kl(const DecodePolicySpec& spec, const BaseModel& model, const PromptSet& prompts, std::size_t n, KlMode mode) {
  spec.validate();
  if (std::holds_alternative<BlockwisePolicy>(spec.strategy) || std::holds_alternative<BestOfKPolicy>(spec.strategy))
    throw UnsupportedEstimatorError("estimate_kl: " + spec.name() + " has no tractable likelihood; use kl_bound_bon / kl_bound_blockwise");
  if (std::holds_alternative<BasePolicy>(spec.strategy)) return {0.0, 0.0, mode == KlMode::Exact};
  if (mode == KlMode::Exact) return {exact_sequence_kl(spec, model, prompts), 0.0, true};
  if (n < 1) throw ValidationError("estimate_kl: n must be >= 1");
  std::vector<double> xs;
  xs.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    Draw d = draw_policy(spec, model, prompts, spec.seed, i);
    xs.push_back(*d.trace.aligned_logprob - d.trace.base_logprob);
  }
  auto ms = mean_stderr(xs);
  return {ms.mean, ms.stderr_, false};
}

struct RewardEstimate {
  double raw = 0.0;
  double normalized = kNaN;  // raw / paired base mean; NaN when the base mean is 0
  bool normalized_available = false;
  double stderr_ = 0.0;
  double base_mean = 0.0;
};

struct WinRateEstimate {
  double rate = 0.0;  // ties count as losses
  double stderr_ = 0.0;
  std::size_t ties = 0;
  std::size_t n = 0;

  /// Win fraction among non-tied draws.
  double rate_excluding_ties() const {
    const std::size_t decided = n - ties;
    return decided == 0 ? kNaN : rate * static_cast<double>(n) / static_cast<double>(decided);
  }
};

struct PointSamples {
  std::vector<double> rewards;
  std::vector<double> base_rewards;      // paired: same seeds, base policy
  std::vector<double> opponent_rewards;  // independent base draws
  std::vector<double> kl_terms;          // log pi - log pi_ref when known
  std::map<Sequence, int> max_length;    // longest response per prompt
};

inline PointSamples sample_point(const DecodePolicySpec& spec, const BaseModel& model, const RewardFn& reward, const PromptSet& prompts,
                                 std::size_t n, bool want_opponent) {
  if (n < 1) throw ValidationError("evaluation needs n >= 1");
  spec.validate();
  const DecodePolicySpec base{BasePolicy{}, spec.seed};
  const bool is_base = std::holds_alternative<BasePolicy>(spec.strategy);
  PointSamples s;
  for (std::size_t i = 0; i < n; ++i) {
    Draw d = draw_policy(spec, model, prompts, spec.seed, i);
    s.rewards.push_back(reward.terminal(d.prompt, d.trace.response));
    if (d.trace.aligned_logprob) s.kl_terms.push_back(*d.trace.aligned_logprob - d.trace.base_logprob);
    int& len = s.max_length[d.prompt];
    len = std::max(len, static_cast<int>(d.trace.response.size()));
    if (is_base) {
      s.base_rewards.push_back(s.rewards.back());
    } else {
      Draw b = draw_policy(base, model, prompts, spec.seed, i);
      s.base_rewards.push_back(reward.terminal(b.prompt, b.trace.response));
    }
    if (want_opponent) {
      RandomStream opp(derive_seed(spec.seed, i, 2));
      Sequence z = sample_sequence(model, d.prompt, opp);
      s.opponent_rewards.push_back(reward.terminal(d.prompt, z));
    }
  }
  return s;
}

inline RewardEstimate summarize_reward(const PointSamples& s) {
  RewardEstimate e;
  auto ms = mean_stderr(s.rewards);
  e.raw = ms.mean;
  e.stderr_ = ms.stderr_;
  e.base_mean = mean_stderr(s.base_rewards).mean;
  if (e.base_mean != 0.0) {
    e.normalized = e.raw / e.base_mean;
    e.normalized_available = true;
  }
  return e;
}

inline WinRateEstimate summarize_win_rate(const PointSamples& s) {
  WinRateEstimate w;
  w.n = s.rewards.size();
  double wins = 0.0;
  for (std::size_t i = 0; i < w.n; ++i) {
    if (s.rewards[i] > s.opponent_rewards[i]) wins += 1.0;
    else if (s.rewards[i] == s.opponent_rewards[i]) ++w.ties;
  }
  const double n = static_cast<double>(w.n);
  w.rate = wins / n;
  w.stderr_ = std::sqrt(w.rate * (1.0 - w.rate) / n);
  return w;
}

/// Monte Carlo E[r] under the policy, normalized by the base policy's mean on the same seeds.
inline RewardEstimate expected_reward(const DecodePolicySpec& spec, const BaseModel& model, const RewardFn& reward, const PromptSet& prompts,
                                      std::size_t n) {
  return summarize_reward(sample_point(spec, model, reward, prompts, n, false));
}

/// Fraction of paired draws (y ~ policy, z ~ base) with r(y) > r(z).
inline WinRateEstimate win_rate(const DecodePolicySpec& spec, const BaseModel& model, const RewardFn& reward, const PromptSet& prompts,
                                std::size_t n) {
  return summarize_win_rate(sample_point(spec, model, reward, prompts, n, true));
}

// ---------------------------------------------------------------------------
// Sweeps

struct TradeoffPoint {
  std::string strategy;
  double lambda = kNaN;
  int k = 0;  // 0 = not applicable
  int m = 0;
  double kl = 0.0;
  std::string kl_kind;  // exact | mc | bound
  double kl_stderr = 0.0;
  double reward_raw = 0.0;
  double reward_norm = kNaN;
  double reward_stderr = 0.0;
  double win_rate = 0.0;
  double win_rate_stderr = 0.0;
  double mean_token_kl = kNaN;
  std::size_t n = 0;
  std::uint64_t seed = 0;
  double wall_ms = 0.0;
};

enum class KlPolicy { Auto, Exact, MonteCarlo };

/// A fully loaded sweep: everything needed is already in memory.
struct SweepPlan {
  BaseModel model;
  std::shared_ptr<const PrefixScorer> scorer;  // required for lambda / blockwise grids
  RewardFn reward;
  PromptSet prompts;
  std::vector<double> lambdas;
  std::vector<int> block_ks;
  std::vector<int> block_ms;
  std::vector<int> bok_ks;
  bool include_base = false;
  std::size_t n = 1000;
  std::uint64_t seed = 0;
  KlPolicy kl_policy = KlPolicy::Auto;
  bool record_wall_time = false;  // off keeps the CSV a pure function of the plan
  unsigned threads = 1;

  std::vector<DecodePolicySpec> grid() const {
    std::vector<DecodePolicySpec> specs;
    if (include_base) specs.push_back({BasePolicy{}, 0});
    for (double l : lambdas) specs.push_back({TokenwisePolicy{l, scorer}, 0});
    for (int k : block_ks)
      for (int m : block_ms) specs.push_back({BlockwisePolicy{k, m, scorer}, 0});
    for (int k : bok_ks) specs.push_back({BestOfKPolicy{k, std::make_shared<const RewardFn>(reward)}, 0});
    for (std::size_t i = 0; i < specs.size(); ++i) specs[i].seed = derive_seed(seed, i, 0x5eed);
    return specs;
  }

  void validate() const {
    if (n < 1) throw ValidationError("sweep: n must be >= 1");
    if (!include_base && lambdas.empty() && bok_ks.empty() && (block_ks.empty() || block_ms.empty()))
      throw ValidationError("sweep: every strategy grid is empty");
    if ((!lambdas.empty() || !block_ks.empty()) && !scorer) throw ValidationError("sweep: scorer required for tokenwise/blockwise grids");
    if (scorer && !(scorer->vocab() == model.vocab())) throw VocabMismatchError("sweep: scorer and base model vocab differ");
    if (!block_ks.empty() != !block_ms.empty()) throw ValidationError("sweep: blockwise grid needs both K and M lists");
  }

  bool use_exact_kl() const {
    if (kl_policy == KlPolicy::Exact) return true;
    if (kl_policy == KlPolicy::MonteCarlo) return false;
    return std::pow(static_cast<double>(model.vocab().size()), model.t_max()) <= 2e5;
  }
};

inline TradeoffPoint evaluate_point(const SweepPlan& plan, const DecodePolicySpec& spec) {
  const auto t0 = std::chrono::steady_clock::now();
  TradeoffPoint pt;
  pt.strategy = spec.name();
  pt.n = plan.n;
  pt.seed = spec.seed;
  std::visit(
      [&](const auto& s) {
        using P = std::decay_t<decltype(s)>;
        if constexpr (std::is_same_v<P, TokenwisePolicy>) pt.lambda = s.lambda;
        else if constexpr (std::is_same_v<P, BlockwisePolicy>) {
          pt.k = s.k;
          pt.m = s.m;
        } else if constexpr (std::is_same_v<P, BestOfKPolicy>) pt.k = s.k;
      },
      spec.strategy);

  PointSamples samples = sample_point(spec, plan.model, plan.reward, plan.prompts, plan.n, true);
  auto r = summarize_reward(samples);
  auto w = summarize_win_rate(samples);
  pt.reward_raw = r.raw;
  pt.reward_norm = r.normalized;
  pt.reward_stderr = r.stderr_;
  pt.win_rate = w.rate;
  pt.win_rate_stderr = w.stderr_;

  if (std::holds_alternative<BlockwisePolicy>(spec.strategy)) {
    std::vector<int> lengths;
    for (const auto& x : plan.prompts.prompts) {
      auto it = samples.max_length.find(x);
      lengths.push_back(it == samples.max_length.end() ? plan.model.t_max() : it->second);
    }
    pt.kl = kl_bound_blockwise(pt.k, plan.prompts, lengths, pt.m);
    pt.kl_kind = "bound";
  } else if (std::holds_alternative<BestOfKPolicy>(spec.strategy)) {
    pt.kl = kl_bound_bon(pt.k);
    pt.kl_kind = "bound";
  } else if (plan.use_exact_kl()) {
    pt.kl = estimate_kl(spec, plan.model, plan.prompts, plan.n, KlMode::Exact).value;
    pt.kl_kind = "exact";
  } else {
    auto ms = mean_stderr(samples.kl_terms);
    pt.kl = std::max(0.0, ms.mean);
    pt.kl_stderr = ms.stderr_;
    pt.kl_kind = "mc";
  }
  if (plan.record_wall_time)
    pt.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  return pt;
}

struct SweepResult {
  std::vector<TradeoffPoint> rows;
  std::map<std::string, std::string> metadata;
};

inline std::map<std::string, std::string> sweep_metadata(const SweepPlan& plan) {
  std::map<std::string, std::string> meta;
  meta["seed"] = std::to_string(plan.seed);
  meta["n"] = std::to_string(plan.n);
  meta["seed_discipline"] =
      "row i uses derive_seed(seed, i); draw j prompt/policy/opponent streams use derive_seed(row_seed, j, 1/0/2); "
      "normalization pairs policy and base on the same stream";
  meta["kl_columns"] = "tokenwise/base: exact or mc; blockwise and best-of-k: analytic bound";
  meta["model_vocab_hash"] = std::to_string(plan.model.vocab().hash());
  meta["win_rate_ties"] = "count as losses";
  return meta;
}

/// One row per grid point, in grid order; rows may be computed concurrently.
inline SweepResult run_sweep(const SweepPlan& plan) {
  plan.validate();
  auto specs = plan.grid();
  SweepResult res;
  res.metadata = sweep_metadata(plan);
  if (plan.threads <= 1) {
    for (const auto& s : specs) res.rows.push_back(evaluate_point(plan, s));
    return res;
  }
  std::vector<std::future<TradeoffPoint>> futures;
  for (std::size_t start = 0; start < specs.size(); start += plan.threads) {
    const std::size_t stop = std::min(specs.size(), start + plan.threads);
    for (std::size_t i = start; i < stop; ++i)
      futures.push_back(std::async(std::launch::async, [&plan, &specs, i] { return evaluate_point(plan, specs[i]); }));
    for (std::size_t i = start; i < stop; ++i) res.rows.push_back(futures[i].get());
  }
  return res;
}

/// Runs the sweep on `eval_model` with a scorer trained against `trained_on`.
inline SweepResult transfer_eval(SweepPlan plan, const BaseModel& trained_on, const BaseModel& eval_model) {
  if (!(trained_on.vocab() == eval_model.vocab())) throw VocabMismatchError("transfer_eval: models have different vocabularies");
  plan.model = eval_model;
  SweepResult res = run_sweep(plan);
  res.metadata["transfer"] = "true";
  res.metadata["scorer_trained_on"] = trained_on.kind_name();
  res.metadata["eval_model"] = eval_model.kind_name();
  return res;
}

// ---------------------------------------------------------------------------
// Output

inline std::string format_number(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  if (v == 0.0) return "0";  // no "-0" in CSV output
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

inline const char* kCsvHeader = "strategy,lambda,K,M,kl,kl_kind,kl_stderr,reward_raw,reward_norm,win_rate,n,seed,wall_ms";

inline std::string to_csv(const std::vector<TradeoffPoint>& rows) {
  std::ostringstream os;
  os << kCsvHeader << '\n';
  for (const auto& r : rows) {
    os << r.strategy << ',' << (std::isnan(r.lambda) ? "" : format_number(r.lambda)) << ',' << (r.k ? std::to_string(r.k) : "") << ','
       << (r.m ? std::to_string(r.m) : "") << ',' << format_number(r.kl) << ',' << r.kl_kind << ',' << format_number(r.kl_stderr) << ','
       << format_number(r.reward_raw) << ',' << format_number(r.reward_norm) << ',' << format_number(r.win_rate) << ',' << r.n << ','
       << r.seed << ',' << format_number(r.wall_ms) << '\n';
  }
  return os.str();
}

/// Area under the best-reward-within-budget curve over KL in [0, kl_cap]; budgets
/// below every point's KL fall back to `floor_reward`.
inline double frontier_area(std::vector<TradeoffPoint> pts, double kl_cap, double floor_reward) {
  std::sort(pts.begin(), pts.end(), [](const auto& a, const auto& b) { return a.kl < b.kl; });
  double area = 0.0, best = floor_reward, at = 0.0;
  for (const auto& p : pts) {
    if (p.kl > kl_cap) break;
    area += best * (p.kl - at);
    at = p.kl;
    best = std::max(best, p.reward_raw);
  }
  area += best * (kl_cap - at);
  return area;
}

}  // namespace ctrldec
