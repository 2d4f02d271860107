#pragma once

#include <cmath>
#include <memory>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "ctrldec/errors.hpp"
#include "ctrldec/features.hpp"
#include "ctrldec/random.hpp"
#include "ctrldec/seqmodel.hpp"

namespace ctrldec {

class RewardFn;

struct LengthReward {
  int t_max = 1;  // r = log(T / t_max), T counts the EOS token
};

struct LexiconReward {
  std::vector<double> weights;  // per token index
  int t_max = 1;                // sum of weights is divided by this horizon
};

struct PatternReward {
  Sequence target;  // contiguous n-gram; payoff 1 if present in the response
};

struct ConstantReward {
  double value = 0.0;
};

struct LearnedBtReward {
  NgramFeaturizer featurizer;
  std::vector<double> weights;
  int max_length = 1;  // longest response the bound is valid for
};

struct ComboReward {
  std::vector<std::pair<double, std::shared_ptr<const RewardFn>>> terms;
};

/// Terminal reward r([x, y]) on complete responses. Immutable.
class RewardFn {
 public:
  using Kind = std::variant<LengthReward, LexiconReward, PatternReward, ConstantReward, LearnedBtReward, ComboReward>;

  RewardFn(Token eos, Kind kind) : eos_(eos), kind_(std::move(kind)) {}

  Token eos() const noexcept { return eos_; }
  const Kind& kind() const noexcept { return kind_; }

  std::string kind_name() const {
    static const char* names[] = {"length", "lexicon", "pattern", "constant", "learned-bt", "combo"};
    return names[kind_.index()];
  }

  /// r([prompt, response]). The response must end in its only EOS.
  double terminal(const Sequence& prompt, const Sequence& response) const {
    if (response.empty() || response.back() != eos_) throw PreconditionError("terminal_reward: response must end in EOS");
    for (std::size_t i = 0; i + 1 < response.size(); ++i)
      if (response[i] == eos_) throw PreconditionError("terminal_reward: token after EOS");
    return eval(prompt, response);
  }

  double bound() const {
    return std::visit(
        [](const auto& k) -> double {
          using K = std::decay_t<decltype(k)>;
          if constexpr (std::is_same_v<K, LengthReward>) return 0.0;
          else if constexpr (std::is_same_v<K, LexiconReward>) return std::max(0.0, max_of(k.weights));
          else if constexpr (std::is_same_v<K, PatternReward>) return 1.0;
          else if constexpr (std::is_same_v<K, ConstantReward>) return k.value;
          else if constexpr (std::is_same_v<K, LearnedBtReward>) return abs_sum(k.weights) * k.max_length;
          else {
            double b = 0.0;
            for (const auto& [w, r] : k.terms) b += w >= 0.0 ? w * r->bound() : w * r->lower_bound();
            return b;
          }
        },
        kind_);
  }

  double lower_bound() const {
    return std::visit(
        [](const auto& k) -> double {
          using K = std::decay_t<decltype(k)>;
          if constexpr (std::is_same_v<K, LengthReward>) return std::log(1.0 / k.t_max);
          else if constexpr (std::is_same_v<K, LexiconReward>) return std::min(0.0, min_of(k.weights));
          else if constexpr (std::is_same_v<K, PatternReward>) return 0.0;
          else if constexpr (std::is_same_v<K, ConstantReward>) return k.value;
          else if constexpr (std::is_same_v<K, LearnedBtReward>) return -abs_sum(k.weights) * k.max_length;
          else {
            double b = 0.0;
            for (const auto& [w, r] : k.terms) b += w >= 0.0 ? w * r->lower_bound() : w * r->bound();
            return b;
          }
        },
        kind_);
  }

 private:
  static double max_of(const std::vector<double>& v) { return v.empty() ? 0.0 : *std::max_element(v.begin(), v.end()); }
  static double min_of(const std::vector<double>& v) { return v.empty() ? 0.0 : *std::min_element(v.begin(), v.end()); }
  static double abs_sum(const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += std::abs(x);
    return s;
  }

  double eval(const Sequence& prompt, const Sequence& y) const {
    return std::visit(
        [&](const auto& k) -> double {
          using K = std::decay_t<decltype(k)>;
          if constexpr (std::is_same_v<K, LengthReward>) {
            if (static_cast<int>(y.size()) > k.t_max) throw PreconditionError("length reward: response longer than T_max");
            return std::log(static_cast<double>(y.size()) / static_cast<double>(k.t_max));
          } else if constexpr (std::is_same_v<K, LexiconReward>) {
            if (static_cast<int>(y.size()) > k.t_max) throw PreconditionError("lexicon reward: response longer than T_max");
            double s = 0.0;
            for (Token t : y) s += k.weights.at(static_cast<std::size_t>(t));
            return s / static_cast<double>(k.t_max);
          } else if constexpr (std::is_same_v<K, PatternReward>) {
            if (k.target.empty()) return 1.0;
            return std::search(y.begin(), y.end(), k.target.begin(), k.target.end()) != y.end() ? 1.0 : 0.0;
          } else if constexpr (std::is_same_v<K, ConstantReward>) {
            return k.value;
          } else if constexpr (std::is_same_v<K, LearnedBtReward>) {
            return dot(k.weights, k.featurizer(y));
          } else {
            double s = 0.0;
            for (const auto& [w, r] : k.terms) s += w * r->terminal(prompt, y);
            return s;
          }
        },
        kind_);
  }

  Token eos_;
  Kind kind_;
};

// ---------------------------------------------------------------------------
// Constructors

inline RewardFn length_reward(Token eos, int t_max) {
  if (t_max < 1) throw ValidationError("length reward: T_max must be >= 1");
  return RewardFn(eos, LengthReward{t_max});
}

inline RewardFn lexicon_reward(const Vocab& vocab, std::vector<double> weights, int t_max) {
  if (weights.size() != vocab.size()) throw ValidationError("lexicon reward: one weight per vocab symbol");
  if (t_max < 1) throw ValidationError("lexicon reward: T_max must be >= 1");
  return RewardFn(vocab.eos(), LexiconReward{std::move(weights), t_max});
}

inline RewardFn pattern_reward(Token eos, Sequence target) { return RewardFn(eos, PatternReward{std::move(target)}); }

inline RewardFn constant_reward(Token eos, double c) { return RewardFn(eos, ConstantReward{c}); }

/// r = sum_i w_i r_i. The bound uses each term's upper or lower bound by the sign of w_i.
inline RewardFn combine_rewards(const std::vector<std::pair<double, RewardFn>>& terms) {
  if (terms.empty()) throw ValidationError("combine_rewards: empty term list");
  ComboReward combo;
  const Token eos = terms.front().second.eos();
  for (const auto& [w, r] : terms) {
    if (!std::isfinite(w)) throw ValidationError("combine_rewards: non-finite weight");
    if (r.eos() != eos) throw VocabMismatchError("combine_rewards: terms disagree on EOS");
    combo.terms.emplace_back(w, std::make_shared<const RewardFn>(r));
  }
  return RewardFn(eos, std::move(combo));
}

inline double terminal_reward(const RewardFn& r, const Sequence& prompt, const Sequence& response) {
  return r.terminal(prompt, response);
}

/// R([x, y^t]): zero until the prefix ends in EOS, then the terminal reward.
inline double tokenwise_reward(const RewardFn& r, const Context& ctx) {
  if (ctx.prefix.empty()) throw PreconditionError("tokenwise_reward: empty prefix");
  if (ctx.prefix.back() != r.eos()) return 0.0;
  return r.terminal(ctx.prompt, ctx.prefix);
}

// ---------------------------------------------------------------------------
// Bradley-Terry pairwise reward training

struct PreferencePair {
  Sequence prompt;
  Sequence a;
  Sequence b;
  bool a_preferred = true;

  const Sequence& winner() const { return a_preferred ? a : b; }
  const Sequence& loser() const { return a_preferred ? b : a; }
};

struct BtTrainConfig {
  double lr = 0.1;
  int epochs = 200;
  std::uint64_t seed = 0;
  double holdout_fraction = 0.2;
  std::size_t batch_size = 0;  // 0 = full batch
  int max_length = 0;          // 0 = longest response in the data
};

struct BtTrainResult {
  RewardFn reward;
  std::vector<double> weights;
  std::vector<double> loss_trace;  // training loss before epoch 1, then after every epoch
  double train_accuracy = 0.0;
  double heldout_accuracy = 0.0;  // NaN when the held-out split is empty
  std::size_t n_train = 0;
  std::size_t n_heldout = 0;
  std::string warning;
};

namespace detail {

inline double log1p_exp(double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }
inline double sigmoid(double x) { return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); }

inline double bt_loss(const std::vector<std::vector<double>>& diffs, const std::vector<std::size_t>& idx, const std::vector<double>& w) {
  if (idx.empty()) return 0.0;
  double s = 0.0;
  for (std::size_t i : idx) s += log1p_exp(-dot(w, diffs[i]));
  return s / static_cast<double>(idx.size());
}

inline double bt_accuracy(const std::vector<std::vector<double>>& diffs, const std::vector<std::size_t>& idx, const std::vector<double>& w) {
  if (idx.empty()) return std::numeric_limits<double>::quiet_NaN();
  double hits = 0.0;
  for (std::size_t i : idx) {
    double m = dot(w, diffs[i]);
    hits += m > 0 ? 1.0 : (m == 0 ? 0.5 : 0.0);
  }
  return hits / static_cast<double>(idx.size());
}

}  // namespace detail

/// Fits r(y) = w . phi(y) by minimizing -log sigma(r(winner) - r(loser)) with SGD.
/// Weights start at zero; accuracy counts ties as half a hit.
inline BtTrainResult train_reward_bt(const std::vector<PreferencePair>& pairs, const NgramFeaturizer& featurizer, Token eos,
                                     const BtTrainConfig& cfg) {
  if (pairs.empty()) throw ValidationError("train_reward_bt: no preference pairs");
  if (!(cfg.lr > 0.0)) throw ValidationError("train_reward_bt: lr must be > 0");
  if (cfg.epochs < 0) throw ValidationError("train_reward_bt: epochs must be >= 0");
  if (!(cfg.holdout_fraction >= 0.0 && cfg.holdout_fraction < 1.0)) throw ValidationError("train_reward_bt: holdout_fraction in [0,1)");

  int max_len = cfg.max_length;
  std::vector<std::vector<double>> diffs;
  diffs.reserve(pairs.size());
  for (const auto& p : pairs) {
    for (const Sequence* s : {&p.a, &p.b}) {
      if (s->empty() || s->back() != eos) throw PreconditionError("train_reward_bt: responses must end in EOS");
      if (cfg.max_length == 0) max_len = std::max(max_len, static_cast<int>(s->size()));
    }
    auto fw = featurizer(p.winner());
    auto fl = featurizer(p.loser());
    for (std::size_t i = 0; i < fw.size(); ++i) fw[i] -= fl[i];
    diffs.push_back(std::move(fw));
  }

  std::vector<std::size_t> order(pairs.size());
  std::iota(order.begin(), order.end(), 0);
  RandomStream rng(cfg.seed);
  shuffle_in_place(order, rng);
  const auto n_held = static_cast<std::size_t>(std::floor(cfg.holdout_fraction * static_cast<double>(pairs.size())));
  std::vector<std::size_t> train(order.begin(), order.end() - static_cast<std::ptrdiff_t>(n_held));
  std::vector<std::size_t> held(order.end() - static_cast<std::ptrdiff_t>(n_held), order.end());

  std::vector<double> w(featurizer.dim(), 0.0);
  BtTrainResult res{RewardFn(eos, ConstantReward{0.0}), {}, {}, 0.0, 0.0, train.size(), held.size(), {}};

  bool degenerate = std::all_of(diffs.begin(), diffs.end(), [](const auto& d) {
    return std::all_of(d.begin(), d.end(), [](double x) { return x == 0.0; });
  });
  if (degenerate) res.warning = "train_reward_bt: all feature differences are zero; returning zero weights";

  res.loss_trace.push_back(detail::bt_loss(diffs, train, w));
  if (!degenerate && !train.empty()) {
    const std::size_t batch = cfg.batch_size == 0 ? train.size() : cfg.batch_size;
    std::vector<double> grad(w.size());
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
      if (batch < train.size()) shuffle_in_place(train, rng);
      for (std::size_t start = 0; start < train.size(); start += batch) {
        const std::size_t stop = std::min(train.size(), start + batch);
        std::fill(grad.begin(), grad.end(), 0.0);
        for (std::size_t j = start; j < stop; ++j) {
          const auto& d = diffs[train[j]];
          const double g = detail::sigmoid(-dot(w, d));
          for (std::size_t i = 0; i < w.size(); ++i) grad[i] += g * d[i];
        }
        const double scale = cfg.lr / static_cast<double>(stop - start);
        for (std::size_t i = 0; i < w.size(); ++i) w[i] += scale * grad[i];
      }
      res.loss_trace.push_back(detail::bt_loss(diffs, train, w));
    }
  } else {
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) res.loss_trace.push_back(res.loss_trace.front());
  }

  res.train_accuracy = detail::bt_accuracy(diffs, train, w);
  res.heldout_accuracy = detail::bt_accuracy(diffs, held, w);
  res.weights = w;
  res.reward = RewardFn(eos, LearnedBtReward{featurizer, std::move(w), std::max(1, max_len)});
  return res;
}

}  // namespace ctrldec
