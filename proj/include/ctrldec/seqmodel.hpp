#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <numeric>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <variant>
#include <vector>

#include "ctrldec/errors.hpp"
#include "ctrldec/random.hpp"

namespace ctrldec {

using Token = std::int32_t;
using Sequence = std::vector<Token>;

// History slot before the first prompt token in n-gram / logit-table lookups.
inline constexpr Token kSequenceStart = -1;

inline constexpr double kNegInf = -std::numeric_limits<double>::infinity();
inline constexpr double kPosInf = std::numeric_limits<double>::infinity();

// ---------------------------------------------------------------------------
// Vocab

class Vocab {
 public:
  Vocab() = default;

  Vocab(std::vector<std::string> tokens, std::string_view eos) : tokens_(std::move(tokens)) {
    std::size_t hits = 0;
    for (std::size_t i = 0; i < tokens_.size(); ++i) {
      if (tokens_[i] == eos) {
        eos_ = static_cast<Token>(i);
        ++hits;
      }
    }
    if (hits != 1) throw ValidationError("vocab: EOS symbol '" + std::string(eos) + "' must appear exactly once");
    validate();
  }

  Vocab(std::vector<std::string> tokens, Token eos_index) : tokens_(std::move(tokens)), eos_(eos_index) {
    if (eos_ < 0 || static_cast<std::size_t>(eos_) >= tokens_.size()) throw ValidationError("vocab: EOS index out of range");
    validate();
  }

  std::size_t size() const noexcept { return tokens_.size(); }
  Token eos() const noexcept { return eos_; }
  const std::vector<std::string>& tokens() const noexcept { return tokens_; }
  bool contains(Token t) const noexcept { return t >= 0 && static_cast<std::size_t>(t) < tokens_.size(); }

  const std::string& symbol(Token t) const {
    if (!contains(t)) throw DomainError("token index " + std::to_string(t) + " not in vocab");
    return tokens_[static_cast<std::size_t>(t)];
  }

  Token index_of(std::string_view sym) const {
    for (std::size_t i = 0; i < tokens_.size(); ++i)
      if (tokens_[i] == sym) return static_cast<Token>(i);
    throw DomainError("unknown token '" + std::string(sym) + "'");
  }

  /// FNV-1a over the symbols and the EOS position; stable across runs and platforms.
  std::uint64_t hash() const noexcept {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    auto feed = [&h](unsigned char c) {
      h ^= c;
      h *= 0x100000001b3ULL;
    };
    for (const auto& t : tokens_) {
      for (unsigned char c : t) feed(c);
      feed(0);
    }
    for (int shift = 0; shift < 32; shift += 8) feed(static_cast<unsigned char>((eos_ >> shift) & 0xff));
    return h;
  }

  friend bool operator==(const Vocab& a, const Vocab& b) { return a.eos_ == b.eos_ && a.tokens_ == b.tokens_; }

 private:
  void validate() const {
    if (tokens_.size() < 2) throw ValidationError("vocab: need at least two symbols");
    std::vector<std::string> sorted = tokens_;
    std::sort(sorted.begin(), sorted.end());
    if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end()) throw ValidationError("vocab: duplicate symbol");
  }

  std::vector<std::string> tokens_;
  Token eos_ = 0;
};

// ---------------------------------------------------------------------------
// Context

inline std::string join_tokens(std::span<const Token> seq) {
  std::string out;
  for (std::size_t i = 0; i < seq.size(); ++i) {
    if (i) out += ',';
    out += std::to_string(seq[i]);
  }
  return out;
}

inline Sequence split_tokens(std::string_view s) {
  Sequence out;
  while (!s.empty()) {
    auto comma = s.find(',');
    auto part = s.substr(0, comma);
    out.push_back(static_cast<Token>(std::stoi(std::string(part))));
    if (comma == std::string_view::npos) break;
    s.remove_prefix(comma + 1);
  }
  return out;
}

/// Prompt x plus the partially decoded response y^t.
struct Context {
  Sequence prompt;
  Sequence prefix;

  bool terminated(Token eos) const noexcept { return !prefix.empty() && prefix.back() == eos; }

  Context extended(Token z) const {
    Context c{prompt, prefix};
    c.prefix.push_back(z);
    return c;
  }

  /// Canonical key: "x0,x1|y0,y1" (token indices).
  std::string key() const { return join_tokens(prompt) + "|" + join_tokens(prefix); }

  static Context from_key(std::string_view key) {
    auto bar = key.find('|');
    if (bar == std::string_view::npos) throw ValidationError("context key without '|': " + std::string(key));
    return Context{split_tokens(key.substr(0, bar)), split_tokens(key.substr(bar + 1))};
  }

  friend bool operator==(const Context&, const Context&) = default;
};

// ---------------------------------------------------------------------------
// Distribution

/// Probabilities over the vocab plus the log-normalizer of the unnormalized weights
/// they came from (0 for base-model distributions).
struct Distribution {
  std::vector<double> probs;
  double log_normalizer = 0.0;

  std::size_t size() const noexcept { return probs.size(); }
  double operator[](std::size_t i) const { return probs[i]; }
  double total() const { return std::accumulate(probs.begin(), probs.end(), 0.0); }

  /// Normalizes exp(logits) with max-subtraction. -inf logits get probability 0.
  static Distribution from_logits(std::span<const double> logits) {
    Distribution d;
    d.probs.assign(logits.size(), 0.0);
    double mx = kNegInf;
    for (double l : logits) mx = std::max(mx, l);
    if (mx == kNegInf) throw PreconditionError("distribution: all logits are -inf");
    double z = 0.0;
    for (std::size_t i = 0; i < logits.size(); ++i) {
      if (logits[i] == kNegInf) continue;
      d.probs[i] = std::exp(logits[i] - mx);
      z += d.probs[i];
    }
    for (double& p : d.probs) p /= z;
    d.log_normalizer = mx + std::log(z);
    return d;
  }
};

inline double total_variation(const Distribution& a, const Distribution& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += std::abs(a[i] - b[i]);
  return 0.5 * s;
}

// ---------------------------------------------------------------------------
// Base models

struct CategoricalModel {
  std::vector<double> probs;
};

/// Counts are kept for every history suffix length 0..order so that, with
/// alpha = 0, an unseen history can back off to its longest seen suffix.
struct NgramModel {
  int order = 1;
  double alpha = 0.0;
  std::map<Sequence, std::vector<std::uint64_t>> counts;
};

struct LogitTableModel {
  int order = 1;
  std::vector<double> default_logits;
  std::map<Sequence, std::vector<double>> rows;  // longest matching history suffix wins
};

class BaseModel {
 public:
  using Kind = std::variant<CategoricalModel, NgramModel, LogitTableModel>;

  BaseModel(Vocab vocab, Kind kind, int t_max) : vocab_(std::move(vocab)), kind_(std::move(kind)), t_max_(t_max) {
    if (t_max_ < 1) throw ValidationError("model: t_max must be >= 1");
    validate_kind();
  }

  static BaseModel categorical(Vocab vocab, std::vector<double> probs, int t_max) {
    return BaseModel(std::move(vocab), CategoricalModel{std::move(probs)}, t_max);
  }

  const Vocab& vocab() const noexcept { return vocab_; }
  const Kind& kind() const noexcept { return kind_; }
  int t_max() const noexcept { return t_max_; }
  Token eos() const noexcept { return vocab_.eos(); }

  std::string kind_name() const {
    return std::visit(
        [](const auto& k) -> std::string {
          using K = std::decay_t<decltype(k)>;
          if constexpr (std::is_same_v<K, CategoricalModel>) return "categorical";
          else if constexpr (std::is_same_v<K, NgramModel>) return "ngram";
          else return "logit-table";
        },
        kind_);
  }

  /// pi_ref(. | ctx). At prefix length t_max - 1 all mass sits on EOS.
  Distribution next_token_dist(const Context& ctx) const {
    check_tokens(ctx);
    if (ctx.terminated(eos())) throw PreconditionError("next_token_dist: context already terminated");
    if (static_cast<int>(ctx.prefix.size()) >= t_max_) throw PreconditionError("next_token_dist: prefix length >= t_max");
    if (static_cast<int>(ctx.prefix.size()) == t_max_ - 1) {
      Distribution d;
      d.probs.assign(vocab_.size(), 0.0);
      d.probs[static_cast<std::size_t>(eos())] = 1.0;
      return d;
    }
    return std::visit([&](const auto& k) { return dist_for(k, ctx); }, kind_);
  }

  void check_tokens(const Context& ctx) const {
    for (Token t : ctx.prompt)
      if (!vocab_.contains(t)) throw DomainError("prompt token " + std::to_string(t) + " not in vocab");
    for (std::size_t i = 0; i < ctx.prefix.size(); ++i) {
      if (!vocab_.contains(ctx.prefix[i])) throw DomainError("prefix token " + std::to_string(ctx.prefix[i]) + " not in vocab");
      if (ctx.prefix[i] == eos() && i + 1 != ctx.prefix.size()) throw PreconditionError("context has tokens after EOS");
    }
  }

 private:
  Sequence padded_history(const Context& ctx, int order) const {
    Sequence h(static_cast<std::size_t>(order), kSequenceStart);
    Sequence stream = ctx.prompt;
    stream.insert(stream.end(), ctx.prefix.begin(), ctx.prefix.end());
    std::size_t take = std::min(stream.size(), static_cast<std::size_t>(order));
    std::copy(stream.end() - static_cast<std::ptrdiff_t>(take), stream.end(), h.end() - static_cast<std::ptrdiff_t>(take));
    return h;
  }

  Distribution dist_for(const CategoricalModel& m, const Context&) const { return Distribution{m.probs, 0.0}; }

  Distribution dist_for(const NgramModel& m, const Context& ctx) const {
    const Sequence h = padded_history(ctx, m.order);
    const auto n = static_cast<double>(vocab_.size());
    Distribution d;
    d.probs.assign(vocab_.size(), 0.0);
    if (m.alpha > 0.0) {
      auto it = m.counts.find(h);
      double total = 0.0;
      if (it != m.counts.end())
        for (auto c : it->second) total += static_cast<double>(c);
      for (std::size_t z = 0; z < d.probs.size(); ++z) {
        double c = it != m.counts.end() ? static_cast<double>(it->second[z]) : 0.0;
        d.probs[z] = (c + m.alpha) / (total + m.alpha * n);
      }
      return d;
    }
    for (std::size_t drop = 0; drop <= h.size(); ++drop) {
      Sequence suffix(h.begin() + static_cast<std::ptrdiff_t>(drop), h.end());
      auto it = m.counts.find(suffix);
      if (it == m.counts.end()) continue;
      double total = 0.0;
      for (auto c : it->second) total += static_cast<double>(c);
      if (total <= 0.0) continue;
      for (std::size_t z = 0; z < d.probs.size(); ++z) d.probs[z] = static_cast<double>(it->second[z]) / total;
      return d;
    }
    throw ValidationError("ngram: no counts for any history suffix (empty model with alpha = 0)");
  }

  Distribution dist_for(const LogitTableModel& m, const Context& ctx) const {
    const Sequence h = padded_history(ctx, m.order);
    for (std::size_t drop = 0; drop <= h.size(); ++drop) {
      Sequence suffix(h.begin() + static_cast<std::ptrdiff_t>(drop), h.end());
      if (auto it = m.rows.find(suffix); it != m.rows.end()) return with_zero_normalizer(Distribution::from_logits(it->second));
    }
    return with_zero_normalizer(Distribution::from_logits(m.default_logits));
  }

  static Distribution with_zero_normalizer(Distribution d) {
    d.log_normalizer = 0.0;
    return d;
  }

  void validate_kind() const {
    const std::size_t n = vocab_.size();
    std::visit(
        [n](const auto& k) {
          using K = std::decay_t<decltype(k)>;
          if constexpr (std::is_same_v<K, CategoricalModel>) {
            if (k.probs.size() != n) throw ValidationError("categorical model: probs size != vocab size");
            double s = 0.0;
            for (double p : k.probs) {
              if (!(p >= 0.0) || !std::isfinite(p)) throw ValidationError("categorical model: negative or non-finite probability");
              s += p;
            }
            if (std::abs(s - 1.0) > 1e-12) throw ValidationError("categorical model: probabilities must sum to 1");
          } else if constexpr (std::is_same_v<K, NgramModel>) {
            if (k.order < 1) throw ValidationError("ngram model: order must be >= 1");
            if (!(k.alpha >= 0.0) || !std::isfinite(k.alpha)) throw ValidationError("ngram model: alpha must be finite and >= 0");
            for (const auto& [h, c] : k.counts)
              if (c.size() != n) throw ValidationError("ngram model: count row size != vocab size");
          } else {
            if (k.order < 1) throw ValidationError("logit table: order must be >= 1");
            if (k.default_logits.size() != n) throw ValidationError("logit table: default row size != vocab size");
            for (const auto& [h, r] : k.rows)
              if (r.size() != n) throw ValidationError("logit table: row size != vocab size");
          }
        },
        kind_);
  }

  Vocab vocab_;
  Kind kind_;
  int t_max_;
};

// ---------------------------------------------------------------------------
// Prompt distribution mu

struct PromptSet {
  std::vector<Sequence> prompts;
  std::vector<double> weights;

  PromptSet() : prompts{Sequence{}}, weights{1.0} {}

  explicit PromptSet(std::vector<Sequence> ps, std::vector<double> ws = {}) : prompts(std::move(ps)), weights(std::move(ws)) {
    if (prompts.empty()) throw ValidationError("prompt set is empty");
    if (weights.empty()) weights.assign(prompts.size(), 1.0 / static_cast<double>(prompts.size()));
    if (weights.size() != prompts.size()) throw ValidationError("prompt set: weights/prompts size mismatch");
    double s = 0.0;
    for (double w : weights) {
      if (!(w >= 0.0)) throw ValidationError("prompt set: negative weight");
      s += w;
    }
    if (std::abs(s - 1.0) > 1e-9) throw ValidationError("prompt set: weights must sum to 1");
  }

  std::size_t size() const noexcept { return prompts.size(); }

  const Sequence& draw(RandomStream& rng) const {
    if (prompts.size() == 1) return prompts.front();
    return prompts[sample_index(weights, rng)];
  }
};

// ---------------------------------------------------------------------------
// Rollout, likelihood, enumeration

/// Autoregressive rollout from pi_ref; one uniform per emitted token.
inline Sequence sample_sequence(const BaseModel& model, const Sequence& prompt, RandomStream& rng) {
  Context ctx{prompt, {}};
  model.check_tokens(ctx);
  while (!ctx.terminated(model.eos())) {
    Distribution d = model.next_token_dist(ctx);
    ctx.prefix.push_back(static_cast<Token>(sample_index(d.probs, rng)));
  }
  return std::move(ctx.prefix);
}

inline void check_complete_response(const BaseModel& model, const Sequence& response) {
  if (response.empty() || response.back() != model.eos()) throw PreconditionError("response must end in EOS");
  if (static_cast<int>(response.size()) > model.t_max()) throw PreconditionError("response longer than t_max");
}

/// log pi_ref(response | prompt) in nats; -inf when any step has probability 0.
inline double sequence_logprob(const BaseModel& model, const Sequence& prompt, const Sequence& response) {
  check_complete_response(model, response);
  Context ctx{prompt, {}};
  double lp = 0.0;
  for (Token z : response) {
    Distribution d = model.next_token_dist(ctx);
    if (!model.vocab().contains(z)) throw DomainError("response token not in vocab");
    double p = d[static_cast<std::size_t>(z)];
    if (p <= 0.0) return kNegInf;
    lp += std::log(p);
    ctx.prefix.push_back(z);
  }
  return lp;
}

struct WeightedSequence {
  Sequence response;
  double prob = 0.0;
};

/// Every complete response with positive probability, depth-first in token order.
inline std::vector<WeightedSequence> enumerate_sequences(const BaseModel& model, const Sequence& prompt) {
  std::vector<WeightedSequence> out;
  Context ctx{prompt, {}};
  model.check_tokens(ctx);
  auto rec = [&](auto&& self, double prob) -> void {
    if (ctx.terminated(model.eos())) {
      out.push_back({ctx.prefix, prob});
      return;
    }
    Distribution d = model.next_token_dist(ctx);
    for (std::size_t z = 0; z < d.size(); ++z) {
      if (d[z] <= 0.0) continue;
      ctx.prefix.push_back(static_cast<Token>(z));
      self(self, prob * d[z]);
      ctx.prefix.pop_back();
    }
  };
  rec(rec, 1.0);
  return out;
}

/// Reachable (positive-probability) contexts grouped by prefix length 0..t_max.
inline std::vector<std::vector<Context>> reachable_contexts(const BaseModel& model, const Sequence& prompt) {
  std::vector<std::vector<Context>> levels(static_cast<std::size_t>(model.t_max()) + 1);
  levels[0].push_back(Context{prompt, {}});
  model.check_tokens(levels[0][0]);
  for (std::size_t t = 0; t + 1 < levels.size(); ++t) {
    for (const Context& c : levels[t]) {
      if (c.terminated(model.eos())) continue;
      Distribution d = model.next_token_dist(c);
      for (std::size_t z = 0; z < d.size(); ++z)
        if (d[z] > 0.0) levels[t + 1].push_back(c.extended(static_cast<Token>(z)));
    }
  }
  return levels;
}

// ---------------------------------------------------------------------------
// n-gram estimation

/// Count-based n-gram of the given order: P(z | h) = (count(h, z) + alpha) / (count(h) + alpha |V|).
/// Lines that do not end in EOS get one appended.
inline BaseModel fit_ngram(const std::vector<Sequence>& corpus, int order, double alpha, const Vocab& vocab, int t_max) {
  if (order < 1) throw ValidationError("fit_ngram: order must be >= 1");
  if (!(alpha >= 0.0) || !std::isfinite(alpha)) throw ValidationError("fit_ngram: alpha must be finite and >= 0");
  if (alpha == 0.0 && std::all_of(corpus.begin(), corpus.end(), [](const Sequence& s) { return s.empty(); }))
    throw ValidationError("fit_ngram: empty corpus with alpha = 0 leaves the distribution undefined");

  NgramModel m{order, alpha, {}};
  for (Sequence line : corpus) {
    if (line.empty()) continue;
    for (std::size_t i = 0; i < line.size(); ++i) {
      if (!vocab.contains(line[i])) throw DomainError("fit_ngram: corpus token not in vocab");
      if (line[i] == vocab.eos() && i + 1 != line.size()) throw ValidationError("fit_ngram: EOS in the middle of a corpus line");
    }
    if (line.back() != vocab.eos()) line.push_back(vocab.eos());
    Sequence padded(static_cast<std::size_t>(order), kSequenceStart);
    padded.insert(padded.end(), line.begin(), line.end());
    for (std::size_t i = static_cast<std::size_t>(order); i < padded.size(); ++i) {
      const auto z = static_cast<std::size_t>(padded[i]);
      for (int len = 0; len <= order; ++len) {
        Sequence h(padded.begin() + static_cast<std::ptrdiff_t>(i) - len, padded.begin() + static_cast<std::ptrdiff_t>(i));
        auto& row = m.counts[h];
        if (row.empty()) row.assign(vocab.size(), 0);
        ++row[z];
      }
    }
  }
  return BaseModel(vocab, std::move(m), t_max);
}

}  // namespace ctrldec
