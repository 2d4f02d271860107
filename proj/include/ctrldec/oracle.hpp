#pragma once

#include <cmath>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "ctrldec/errors.hpp"
#include "ctrldec/reward.hpp"
#include "ctrldec/scorer.hpp"
#include "ctrldec/seqmodel.hpp"

// Exact ground truth over enumerable models. Everything here is computed by
// finite enumeration thanks to the forced-EOS horizon.

namespace ctrldec {

/// V* keyed by Context::key(). Lookups of absent keys through score() return 0,
/// matching a fresh tabular scorer; at() throws instead.
class ValueTable {
 public:
  ValueTable() = default;
  explicit ValueTable(std::map<std::string, double> values) : values_(std::move(values)) {}

  const std::map<std::string, double>& entries() const& noexcept { return values_; }
  std::map<std::string, double> entries() && { return std::move(values_); }
  std::size_t size() const noexcept { return values_.size(); }
  bool contains(const Context& c) const { return values_.contains(c.key()); }
  void set(const Context& c, double v) { values_[c.key()] = v; }

  double at(const Context& c) const {
    auto it = values_.find(c.key());
    if (it == values_.end()) throw MissingEntriesError("value table: no entry for " + c.key(), {c.key()});
    return it->second;
  }

  double score(const Context& c) const {
    auto it = values_.find(c.key());
    return it == values_.end() ? 0.0 : it->second;
  }

  std::vector<Sequence> prompts() const {
    std::set<Sequence> seen;
    for (const auto& [k, v] : values_) seen.insert(Context::from_key(k).prompt);
    return {seen.begin(), seen.end()};
  }

 private:
  std::map<std::string, double> values_;
};

/// V*(ctx) by direct recursion over the continuation tree.
inline double exact_value(const BaseModel& model, const RewardFn& reward, const Context& ctx) {
  model.check_tokens(ctx);
  if (ctx.terminated(model.eos())) return reward.terminal(ctx.prompt, ctx.prefix);
  Distribution d = model.next_token_dist(ctx);
  double v = 0.0;
  for (std::size_t z = 0; z < d.size(); ++z)
    if (d[z] > 0.0) v += d[z] * exact_value(model, reward, ctx.extended(static_cast<Token>(z)));
  return v;
}

/// V* for every reachable context of every prompt: one backward-induction pass,
/// deepest prefix length first.
inline ValueTable build_value_table(const BaseModel& model, const RewardFn& reward, const PromptSet& prompts) {
  ValueTable table;
  for (const Sequence& x : prompts.prompts) {
    auto levels = reachable_contexts(model, x);
    for (std::size_t t = levels.size(); t-- > 0;) {
      for (const Context& c : levels[t]) {
        if (c.terminated(model.eos())) {
          table.set(c, reward.terminal(c.prompt, c.prefix));
          continue;
        }
        Distribution d = model.next_token_dist(c);
        double v = 0.0;
        for (std::size_t z = 0; z < d.size(); ++z)
          if (d[z] > 0.0) v += d[z] * table.at(c.extended(static_cast<Token>(z)));
        table.set(c, v);
      }
    }
  }
  return table;
}

inline ValueTable build_value_table(const BaseModel& model, const RewardFn& reward, const Sequence& prompt = {}) {
  return build_value_table(model, reward, PromptSet({prompt}));
}

inline void check_policy_shape(const Distribution& policy, const BaseModel& model) {
  if (policy.size() != model.vocab().size()) throw PreconditionError("policy size != vocab size");
}

/// A(ctx; policy) = sum_z policy(z) V*(ctx + z) - V*(ctx).
inline double advantage(const BaseModel& model, const RewardFn& reward, const Context& ctx, const Distribution& policy) {
  check_policy_shape(policy, model);
  if (ctx.terminated(model.eos())) throw PreconditionError("advantage: context terminated");
  double a = -exact_value(model, reward, ctx);
  for (std::size_t z = 0; z < policy.size(); ++z)
    if (policy[z] > 0.0) a += policy[z] * exact_value(model, reward, ctx.extended(static_cast<Token>(z)));
  return a;
}

/// KL(policy || pi_ref(.|ctx)) in nats. +inf when the policy puts mass where pi_ref has none.
inline double kl_next(const Distribution& policy, const BaseModel& model, const Context& ctx) {
  check_policy_shape(policy, model);
  Distribution p = model.next_token_dist(ctx);
  double kl = 0.0;
  for (std::size_t z = 0; z < policy.size(); ++z) {
    if (policy[z] <= 0.0) continue;
    if (p[z] <= 0.0) return kPosInf;
    kl += policy[z] * std::log(policy[z] / p[z]);
  }
  return std::max(kl, 0.0);
}

inline bool is_infinite_kl(double kl) noexcept { return kl == kPosInf; }

/// J_lambda = lambda * A - D.
inline double objective_j(double lambda, const BaseModel& model, const RewardFn& reward, const Context& ctx, const Distribution& policy) {
  if (!(lambda >= 0.0)) throw PreconditionError("objective_j: lambda must be >= 0");
  const double kl = kl_next(policy, model, ctx);
  if (is_infinite_kl(kl)) return kNegInf;
  const double a = lambda == 0.0 ? 0.0 : advantage(model, reward, ctx, policy);
  return lambda * a - kl;
}

/// pi(z) proportional to base(z) exp(lambda v(z)); log_normalizer = log Z_lambda.
/// lambda = 0 returns the base distribution unchanged.
inline Distribution optimal_policy_closed_form(double lambda, const Distribution& base, std::span<const double> child_values) {
  if (!(lambda >= 0.0)) throw PreconditionError("closed-form policy: lambda must be >= 0");
  if (child_values.size() != base.size()) throw PreconditionError("closed-form policy: value vector size != vocab size");
  if (lambda == 0.0) return Distribution{base.probs, 0.0};
  std::vector<double> logits(base.size(), kNegInf);
  for (std::size_t z = 0; z < base.size(); ++z) {
    if (base[z] <= 0.0) continue;
    if (!std::isfinite(child_values[z])) throw PreconditionError("closed-form policy: non-finite value");
    logits[z] = std::log(base[z]) + lambda * child_values[z];
  }
  return Distribution::from_logits(logits);
}

template <ContextScorer S>
Distribution optimal_policy_closed_form(double lambda, const BaseModel& model, const S& values, const Context& ctx) {
  Distribution base = model.next_token_dist(ctx);
  return optimal_policy_closed_form(lambda, base, score_all_next(values, ctx, model.vocab()));
}

struct NumericPolicyResult {
  Distribution policy;
  int iterations = 0;
  double gradient_norm = 0.0;
  double objective = 0.0;
};

struct NumericMaximizerConfig {
  double step = 0.5;
  int max_iterations = 100000;
  double tol = 1e-9;
};

/// Maximizes J_lambda over the simplex by exponentiated-gradient ascent, starting
/// from the uniform distribution on the support of pi_ref. Uses only the gradient
/// lambda V*(ctx + z) - log(pi(z) / pi_ref(z)) - 1; the closed form never enters.
/// Stops when the simplex-projected gradient's max-norm is below tol.
inline NumericPolicyResult optimal_policy_numeric(double lambda, const BaseModel& model, const RewardFn& reward, const Context& ctx,
                                                  const NumericMaximizerConfig& cfg = {}) {
  if (!(lambda >= 0.0)) throw PreconditionError("numeric policy: lambda must be >= 0");
  if (ctx.terminated(model.eos())) throw PreconditionError("numeric policy: context terminated");
  const Distribution base = model.next_token_dist(ctx);
  const std::size_t n = base.size();
  std::vector<std::size_t> support;
  std::vector<double> v(n, 0.0);
  for (std::size_t z = 0; z < n; ++z) {
    if (base[z] <= 0.0) continue;
    support.push_back(z);
    if (lambda > 0.0) v[z] = exact_value(model, reward, ctx.extended(static_cast<Token>(z)));
  }

  std::vector<double> logq(n, kNegInf);
  for (std::size_t z : support) logq[z] = -std::log(static_cast<double>(support.size()));
  std::vector<double> grad(n, 0.0);

  auto to_dist = [&] {
    Distribution d;
    d.probs.assign(n, 0.0);
    for (std::size_t z : support) d.probs[z] = std::exp(logq[z]);
    return d;
  };
  auto projected_norm = [&] {
    double mean = 0.0;
    for (std::size_t z : support) {
      grad[z] = lambda * v[z] - (logq[z] - std::log(base[z])) - 1.0;
      mean += std::exp(logq[z]) * grad[z];
    }
    double m = 0.0;
    for (std::size_t z : support) m = std::max(m, std::abs(grad[z] - mean));
    return m;
  };

  double best_norm = kPosInf;
  std::vector<double> best_logq = logq;
  for (int it = 0; it <= cfg.max_iterations; ++it) {
    const double norm = projected_norm();
    if (norm < best_norm) {
      best_norm = norm;
      best_logq = logq;
    }
    if (norm < cfg.tol) {
      NumericPolicyResult res{to_dist(), it, norm, 0.0};
      res.objective = objective_j(lambda, model, reward, ctx, res.policy);
      return res;
    }
    if (it == cfg.max_iterations) break;
    double mx = kNegInf;
    for (std::size_t z : support) {
      logq[z] += cfg.step * grad[z];
      mx = std::max(mx, logq[z]);
    }
    double s = 0.0;
    for (std::size_t z : support) s += std::exp(logq[z] - mx);
    const double lse = mx + std::log(s);
    for (std::size_t z : support) logq[z] -= lse;
  }
  logq = best_logq;
  Distribution best = to_dist();
  throw ConvergenceError("numeric policy: no convergence within max iterations", best.probs, best_norm);
}

struct BellmanReport {
  double max_residual = 0.0;
  std::string worst_key;
  std::size_t checked = 0;
};

/// Max over reachable contexts of |V(ctx) - sum_z pi_ref(z|ctx) V(ctx + z)|
/// (non-terminated) or |V(ctx) - r| (terminated). Prompts are read off the table.
inline BellmanReport check_bellman(const BaseModel& model, const RewardFn& reward, const ValueTable& table) {
  if (table.size() == 0) throw MissingEntriesError("check_bellman: empty table", {});
  std::vector<std::string> missing;
  std::vector<Context> all;
  for (const Sequence& x : table.prompts()) {
    for (auto& level : reachable_contexts(model, x))
      for (auto& c : level) {
        if (!table.contains(c)) missing.push_back(c.key());
        all.push_back(std::move(c));
      }
  }
  if (!missing.empty()) {
    std::string msg = "check_bellman: table is missing " + std::to_string(missing.size()) + " reachable context(s):";
    for (const auto& k : missing) msg += " " + k;
    throw MissingEntriesError(msg, missing);
  }
  BellmanReport rep;
  for (const Context& c : all) {
    double target;
    if (c.terminated(model.eos())) {
      target = reward.terminal(c.prompt, c.prefix);
    } else {
      Distribution d = model.next_token_dist(c);
      target = 0.0;
      for (std::size_t z = 0; z < d.size(); ++z)
        if (d[z] > 0.0) target += d[z] * table.at(c.extended(static_cast<Token>(z)));
    }
    const double r = std::abs(table.at(c) - target);
    ++rep.checked;
    if (r > rep.max_residual || rep.worst_key.empty()) {
      rep.max_residual = r;
      rep.worst_key = c.key();
    }
  }
  return rep;
}

struct FudgeGradientReport {
  ScorerGradient expected_fudge;  // E_{x~mu, y~pi_ref} grad l_F
  ScorerGradient optimal;         // grad L*, built from exact V*
  double gap = 0.0;               // max componentwise |difference|
};

/// Unbiasedness check for CD-FUDGE: both expectations by exhaustive enumeration.
inline FudgeGradientReport fudge_gradient_check(const PrefixScorer& scorer, const BaseModel& model, const RewardFn& reward,
                                                const PromptSet& prompts) {
  if (!scorer.trainable()) throw PreconditionError("fudge_gradient_check: needs a tabular or linear scorer");
  if (!(scorer.vocab() == model.vocab())) throw VocabMismatchError("fudge_gradient_check: scorer and model vocab differ");
  const ValueTable vstar = build_value_table(model, reward, prompts);
  FudgeGradientReport rep;
  for (std::size_t i = 0; i < prompts.size(); ++i) {
    const Sequence& x = prompts.prompts[i];
    for (const auto& [y, py] : enumerate_sequences(model, x)) {
      const double w = prompts.weights[i] * py;
      const double r = reward.terminal(x, y);
      Context c{x, {}};
      for (Token z : y) {
        c.prefix.push_back(z);
        const double v = scorer.score(c);
        scorer.accumulate_gradient(c, w * (v - r), rep.expected_fudge);
        scorer.accumulate_gradient(c, w * (v - vstar.at(c)), rep.optimal);
      }
    }
  }
  rep.gap = max_abs_diff(rep.expected_fudge, rep.optimal);
  return rep;
}

}  // namespace ctrldec
