#pragma once

#include <cmath>
#include <concepts>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <variant>
#include <vector>

#include "ctrldec/errors.hpp"
#include "ctrldec/features.hpp"
#include "ctrldec/random.hpp"
#include "ctrldec/reward.hpp"
#include "ctrldec/seqmodel.hpp"

namespace ctrldec {

/// Anything that maps a context to a scalar value: trained scorers, exact value
/// tables, test doubles.
template <class S>
concept ContextScorer = requires(const S& s, const Context& c) {
  { s.score(c) } -> std::convertible_to<double>;
};

/// Component z is score(ctx + z). One scorer call per vocab entry.
template <ContextScorer S>
std::vector<double> score_all_next(const S& scorer, const Context& ctx, const Vocab& vocab) {
  if (ctx.terminated(vocab.eos())) throw PreconditionError("score_all_next: context already terminated");
  std::vector<double> out(vocab.size());
  Context child = ctx;
  child.prefix.push_back(0);
  for (std::size_t z = 0; z < vocab.size(); ++z) {
    child.prefix.back() = static_cast<Token>(z);
    out[z] = scorer.score(child);
  }
  return out;
}

class PrefixScorer;

struct TabularScorer {
  std::map<std::string, double> table;  // keyed by Context::key()
  double default_value = 0.0;
};

/// V(ctx) = w . phi(response prefix); phi = n-gram counts, length, bias.
struct LinearScorer {
  NgramFeaturizer featurizer;
  std::vector<double> weights;
};

struct CombinedScorer {
  std::vector<std::pair<double, std::shared_ptr<const PrefixScorer>>> terms;
};

/// dV/dtheta accumulated over contexts. Tabular parameters are keyed by context
/// key, linear ones by feature index.
struct ScorerGradient {
  std::map<std::string, double> table;
  std::vector<double> dense;

  double max_abs() const {
    double m = 0.0;
    for (const auto& [k, v] : table) m = std::max(m, std::abs(v));
    for (double v : dense) m = std::max(m, std::abs(v));
    return m;
  }

  /// Largest componentwise gap, treating absent tabular keys as 0.
  friend double max_abs_diff(const ScorerGradient& a, const ScorerGradient& b) {
    double m = 0.0;
    for (const auto& [k, v] : a.table) {
      auto it = b.table.find(k);
      m = std::max(m, std::abs(v - (it == b.table.end() ? 0.0 : it->second)));
    }
    for (const auto& [k, v] : b.table)
      if (!a.table.contains(k)) m = std::max(m, std::abs(v));
    const std::size_t n = std::max(a.dense.size(), b.dense.size());
    for (std::size_t i = 0; i < n; ++i) {
      double x = i < a.dense.size() ? a.dense[i] : 0.0;
      double y = i < b.dense.size() ? b.dense[i] : 0.0;
      m = std::max(m, std::abs(x - y));
    }
    return m;
  }
};

/// Prefix scorer V_theta. Tabular and linear scorers are trainable;
/// combined scorers evaluate sum_i w_i V_i lazily.
class PrefixScorer {
 public:
  using Kind = std::variant<TabularScorer, LinearScorer, CombinedScorer>;

  PrefixScorer(Vocab vocab, Kind kind) : vocab_(std::move(vocab)), kind_(std::move(kind)) {
    if (auto* lin = std::get_if<LinearScorer>(&kind_)) {
      if (lin->featurizer.vocab_size() != vocab_.size()) throw ValidationError("linear scorer: featurizer/vocab size mismatch");
      if (lin->weights.size() != lin->featurizer.dim()) throw ValidationError("linear scorer: weight vector has wrong size");
    }
  }

  static PrefixScorer tabular(Vocab vocab, double default_value = 0.0) {
    return PrefixScorer(std::move(vocab), TabularScorer{{}, default_value});
  }

  static PrefixScorer tabular(Vocab vocab, std::map<std::string, double> table, double default_value = 0.0) {
    return PrefixScorer(std::move(vocab), TabularScorer{std::move(table), default_value});
  }

  static PrefixScorer linear(Vocab vocab) {
    NgramFeaturizer f(vocab.size(), true);
    std::vector<double> w(f.dim(), 0.0);
    return PrefixScorer(std::move(vocab), LinearScorer{f, std::move(w)});
  }

  static PrefixScorer linear(Vocab vocab, std::vector<double> weights) {
    NgramFeaturizer f(vocab.size(), true);
    return PrefixScorer(std::move(vocab), LinearScorer{f, std::move(weights)});
  }

  const Vocab& vocab() const noexcept { return vocab_; }
  const Kind& kind() const noexcept { return kind_; }
  Kind& mutable_kind() noexcept { return kind_; }

  std::string kind_name() const {
    static const char* names[] = {"tabular", "linear", "combined"};
    return names[kind_.index()];
  }

  bool trainable() const noexcept { return !std::holds_alternative<CombinedScorer>(kind_); }

  double score(const Context& ctx) const {
    return std::visit(
        [&](const auto& k) -> double {
          using K = std::decay_t<decltype(k)>;
          if constexpr (std::is_same_v<K, TabularScorer>) {
            auto it = k.table.find(ctx.key());
            return it == k.table.end() ? k.default_value : it->second;
          } else if constexpr (std::is_same_v<K, LinearScorer>) {
            return dot(k.weights, k.featurizer(ctx.prefix));
          } else {
            double s = 0.0;
            for (const auto& [w, sc] : k.terms) s += w * sc->score(ctx);
            return s;
          }
        },
        kind_);
  }

  std::vector<double> score_all_next(const Context& ctx) const { return ctrldec::score_all_next(*this, ctx, vocab_); }

  /// g += coeff * dV(ctx)/dtheta.
  void accumulate_gradient(const Context& ctx, double coeff, ScorerGradient& g) const {
    if (std::holds_alternative<TabularScorer>(kind_)) {
      g.table[ctx.key()] += coeff;
    } else if (auto* lin = std::get_if<LinearScorer>(&kind_)) {
      if (g.dense.size() != lin->weights.size()) g.dense.assign(lin->weights.size(), 0.0);
      auto f = lin->featurizer(ctx.prefix);
      for (std::size_t i = 0; i < f.size(); ++i) g.dense[i] += coeff * f[i];
    } else {
      throw PreconditionError("combined scorer has no trainable parameters");
    }
  }

  /// theta -= step * g.
  void apply_gradient(const ScorerGradient& g, double step) {
    if (auto* tab = std::get_if<TabularScorer>(&kind_)) {
      for (const auto& [key, v] : g.table) {
        auto [it, inserted] = tab->table.try_emplace(key, tab->default_value);
        it->second -= step * v;
      }
    } else if (auto* lin = std::get_if<LinearScorer>(&kind_)) {
      for (std::size_t i = 0; i < g.dense.size(); ++i) lin->weights[i] -= step * g.dense[i];
    } else {
      throw PreconditionError("combined scorer has no trainable parameters");
    }
  }

  friend bool operator==(const PrefixScorer& a, const PrefixScorer& b) {
    if (!(a.vocab_ == b.vocab_) || a.kind_.index() != b.kind_.index()) return false;
    if (auto* t = std::get_if<TabularScorer>(&a.kind_)) {
      const auto& u = std::get<TabularScorer>(b.kind_);
      return t->table == u.table && t->default_value == u.default_value;
    }
    if (auto* l = std::get_if<LinearScorer>(&a.kind_)) return l->weights == std::get<LinearScorer>(b.kind_).weights;
    return false;
  }

 private:
  Vocab vocab_;
  Kind kind_;
};

/// Lazy sum_i w_i V_i over scorers sharing one vocab. No retraining.
inline PrefixScorer combine_scorers(const std::vector<std::pair<double, PrefixScorer>>& terms) {
  if (terms.empty()) throw ValidationError("combine_scorers: empty term list");
  CombinedScorer c;
  const Vocab& vocab = terms.front().second.vocab();
  for (const auto& [w, s] : terms) {
    if (!(s.vocab() == vocab)) throw VocabMismatchError("combine_scorers: scorers have different vocabularies");
    if (!std::isfinite(w)) throw ValidationError("combine_scorers: non-finite weight");
    c.terms.emplace_back(w, std::make_shared<const PrefixScorer>(s));
  }
  return PrefixScorer(vocab, std::move(c));
}

// ---------------------------------------------------------------------------
// Training data and configuration

struct Rollout {
  Sequence prompt;
  Sequence response;
  double reward = 0.0;
};

struct RolloutDataset {
  std::vector<Rollout> records;
  bool on_policy = true;  // false: produced by some other (external) policy

  void validate(Token eos) const {
    for (const auto& r : records) {
      if (r.response.empty() || r.response.back() != eos) throw ValidationError("dataset: response must end in EOS");
      for (std::size_t i = 0; i + 1 < r.response.size(); ++i)
        if (r.response[i] == eos) throw ValidationError("dataset: token after EOS");
      if (!std::isfinite(r.reward)) throw ValidationError("dataset: non-finite reward");
    }
  }
};

/// Samples n rollouts from `behavior` and scores them with `reward`.
inline RolloutDataset sample_dataset(const BaseModel& behavior, const RewardFn& reward, const PromptSet& prompts, std::size_t n,
                                     RandomStream& rng, bool on_policy = true) {
  RolloutDataset ds;
  ds.on_policy = on_policy;
  ds.records.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    Sequence x = prompts.draw(rng);
    Sequence y = sample_sequence(behavior, x, rng);
    double r = reward.terminal(x, y);
    ds.records.push_back({std::move(x), std::move(y), r});
  }
  return ds;
}

enum class QTarget { ExactExpectation, Sampled };

struct TrainConfig {
  double lr = 0.05;
  int epochs = 1;
  std::size_t batch_size = 1;
  std::uint64_t seed = 0;
  int eval_interval = 0;  // call on_eval every this many epochs (0 = never)
  QTarget target = QTarget::ExactExpectation;
  std::function<void(int epoch, const PrefixScorer&)> on_eval;

  void validate() const {
    if (!(lr > 0.0) || !std::isfinite(lr)) throw ValidationError("train config: lr must be > 0");
    if (epochs < 0) throw ValidationError("train config: epochs must be >= 0");
    if (batch_size == 0) throw ValidationError("train config: batch_size must be >= 1");
  }
};

/// Rollouts drawn fresh from the base model every epoch.
struct OnPolicySource {
  const BaseModel& model;
  const RewardFn& reward;
  PromptSet prompts;
  std::size_t rollouts_per_epoch = 1;
};

struct TrainResult {
  PrefixScorer scorer;
  std::vector<double> loss_trace;  // mean per-sequence loss for each epoch
};

namespace detail {

inline void check_trainable(const PrefixScorer& s) {
  if (!s.trainable()) throw PreconditionError("training requires a tabular or linear scorer");
}

// Contexts [x, y^t] for t = 1..|y|, including the EOS-terminated one.
inline std::vector<Context> prefixes_of(const Sequence& prompt, const Sequence& response) {
  std::vector<Context> out;
  out.reserve(response.size());
  Context c{prompt, {}};
  for (Token z : response) {
    c.prefix.push_back(z);
    out.push_back(c);
  }
  return out;
}

// Adds the FUDGE gradient of one sequence to g and returns its loss.
inline double fudge_accumulate(const PrefixScorer& s, const Sequence& x, const Sequence& y, double r, ScorerGradient& g) {
  double loss = 0.0;
  for (const Context& c : prefixes_of(x, y)) {
    const double resid = s.score(c) - r;
    loss += 0.5 * resid * resid;
    s.accumulate_gradient(c, resid, g);
  }
  return loss;
}

inline void maybe_eval(const TrainConfig& cfg, int epoch, const PrefixScorer& s) {
  if (cfg.on_eval && cfg.eval_interval > 0 && epoch % cfg.eval_interval == 0) cfg.on_eval(epoch, s);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// CD-FUDGE: regress every prefix of a rollout onto the rollout's terminal reward.

inline TrainResult train_fudge(PrefixScorer scorer, const OnPolicySource& src, const TrainConfig& cfg) {
  cfg.validate();
  detail::check_trainable(scorer);
  if (!(scorer.vocab() == src.model.vocab())) throw VocabMismatchError("train_fudge: scorer and model vocab differ");
  if (src.rollouts_per_epoch == 0) throw ValidationError("train_fudge: rollouts_per_epoch must be >= 1");
  RandomStream rng(cfg.seed);
  std::vector<double> trace;
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < src.rollouts_per_epoch; start += cfg.batch_size) {
      const std::size_t stop = std::min(src.rollouts_per_epoch, start + cfg.batch_size);
      ScorerGradient g;
      for (std::size_t i = start; i < stop; ++i) {
        Sequence x = src.prompts.draw(rng);
        Sequence y = sample_sequence(src.model, x, rng);
        epoch_loss += detail::fudge_accumulate(scorer, x, y, src.reward.terminal(x, y), g);
      }
      scorer.apply_gradient(g, cfg.lr / static_cast<double>(stop - start));
    }
    trace.push_back(epoch_loss / static_cast<double>(src.rollouts_per_epoch));
    detail::maybe_eval(cfg, epoch, scorer);
  }
  return {std::move(scorer), std::move(trace)};
}

inline TrainResult train_fudge(PrefixScorer scorer, const RolloutDataset& data, const TrainConfig& cfg) {
  cfg.validate();
  detail::check_trainable(scorer);
  if (data.records.empty()) throw ValidationError("train_fudge: empty dataset");
  data.validate(scorer.vocab().eos());
  RandomStream rng(cfg.seed);
  std::vector<std::size_t> order(data.records.size());
  std::iota(order.begin(), order.end(), 0);
  std::vector<double> trace;
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    shuffle_in_place(order, rng);
    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t stop = std::min(order.size(), start + cfg.batch_size);
      ScorerGradient g;
      for (std::size_t i = start; i < stop; ++i) {
        const Rollout& rec = data.records[order[i]];
        epoch_loss += detail::fudge_accumulate(scorer, rec.prompt, rec.response, rec.reward, g);
      }
      scorer.apply_gradient(g, cfg.lr / static_cast<double>(stop - start));
    }
    trace.push_back(epoch_loss / static_cast<double>(order.size()));
    detail::maybe_eval(cfg, epoch, scorer);
  }
  return {std::move(scorer), std::move(trace)};
}

// ---------------------------------------------------------------------------
// CD-Q: Bellman targets. A non-EOS step regresses onto sum_z pi_ref(z|ctx) V(ctx + z)
// (or V at one sampled child); an EOS step onto the terminal reward. Targets are
// computed from the parameters before the step and held fixed during it.

namespace detail {

inline double q_target(const PrefixScorer& s, const BaseModel& model, const Context& c, double terminal, QTarget mode, RandomStream& rng) {
  if (c.terminated(model.eos())) return terminal;
  Distribution p = model.next_token_dist(c);
  if (mode == QTarget::Sampled) return s.score(c.extended(static_cast<Token>(sample_index(p.probs, rng))));
  double v = 0.0;
  Context child = c;
  child.prefix.push_back(0);
  for (std::size_t z = 0; z < p.size(); ++z) {
    if (p[z] <= 0.0) continue;
    child.prefix.back() = static_cast<Token>(z);
    v += p[z] * s.score(child);
  }
  return v;
}

inline double q_accumulate(const PrefixScorer& s, const BaseModel& model, const Sequence& x, const Sequence& y, double r, QTarget mode,
                           RandomStream& rng, ScorerGradient& g) {
  double loss = 0.0;
  for (const Context& c : prefixes_of(x, y)) {
    const double resid = s.score(c) - q_target(s, model, c, r, mode, rng);
    loss += 0.5 * resid * resid;
    s.accumulate_gradient(c, resid, g);
  }
  return loss;
}

}  // namespace detail

/// CD-Q over a (possibly off-policy) dataset. Terminal targets use the stored rewards.
inline TrainResult train_q(PrefixScorer scorer, const RolloutDataset& data, const BaseModel& model, const TrainConfig& cfg) {
  cfg.validate();
  detail::check_trainable(scorer);
  if (data.records.empty()) throw ValidationError("train_q: empty dataset");
  if (!(scorer.vocab() == model.vocab())) throw VocabMismatchError("train_q: scorer and model vocab differ");
  data.validate(model.eos());
  RandomStream rng(cfg.seed);
  std::vector<std::size_t> order(data.records.size());
  std::iota(order.begin(), order.end(), 0);
  std::vector<double> trace;
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    shuffle_in_place(order, rng);
    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t stop = std::min(order.size(), start + cfg.batch_size);
      ScorerGradient g;
      for (std::size_t i = start; i < stop; ++i) {
        const Rollout& rec = data.records[order[i]];
        epoch_loss += detail::q_accumulate(scorer, model, rec.prompt, rec.response, rec.reward, cfg.target, rng, g);
      }
      scorer.apply_gradient(g, cfg.lr / static_cast<double>(stop - start));
    }
    trace.push_back(epoch_loss / static_cast<double>(order.size()));
    detail::maybe_eval(cfg, epoch, scorer);
  }
  return {std::move(scorer), std::move(trace)};
}

/// CD-Q by full sweeps: each epoch computes the target of every reachable
/// non-empty context from the current parameters, then takes one gradient step
/// on the summed loss. Loss trace holds the summed loss per sweep.
inline TrainResult train_q_sweeps(PrefixScorer scorer, const BaseModel& model, const RewardFn& reward, const PromptSet& prompts,
                                  const TrainConfig& cfg) {
  cfg.validate();
  detail::check_trainable(scorer);
  if (!(scorer.vocab() == model.vocab())) throw VocabMismatchError("train_q_sweeps: scorer and model vocab differ");
  std::vector<Context> contexts;
  for (const Sequence& x : prompts.prompts) {
    auto levels = reachable_contexts(model, x);
    for (std::size_t t = 1; t < levels.size(); ++t) contexts.insert(contexts.end(), levels[t].begin(), levels[t].end());
  }
  std::vector<double> terminal(contexts.size(), 0.0);
  for (std::size_t i = 0; i < contexts.size(); ++i)
    if (contexts[i].terminated(model.eos())) terminal[i] = reward.terminal(contexts[i].prompt, contexts[i].prefix);

  RandomStream rng(cfg.seed);
  std::vector<double> trace;
  detail::maybe_eval(cfg, 0, scorer);
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    ScorerGradient g;
    double loss = 0.0;
    for (std::size_t i = 0; i < contexts.size(); ++i) {
      const double resid = scorer.score(contexts[i]) - detail::q_target(scorer, model, contexts[i], terminal[i], cfg.target, rng);
      loss += 0.5 * resid * resid;
      scorer.accumulate_gradient(contexts[i], resid, g);
    }
    scorer.apply_gradient(g, cfg.lr);
    trace.push_back(loss);
    detail::maybe_eval(cfg, epoch, scorer);
  }
  return {std::move(scorer), std::move(trace)};
}

}  // namespace ctrldec
