#pragma once

// tiny-2 and friends, plus brute-force reference computations that share no code
// with the library: plain recursion over token lists and K-tuple enumeration.

#include <cmath>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "ctrldec/ctrldec.hpp"

namespace fx {

using namespace ctrldec;

inline constexpr Token A = 0, B = 1, E = 2;

inline Vocab tiny_vocab() { return Vocab({"a", "b", "EOS"}, "EOS"); }
inline BaseModel tiny2() { return BaseModel::categorical(tiny_vocab(), {0.5, 0.3, 0.2}, 3); }
inline BaseModel tiny2_perturbed() { return BaseModel::categorical(tiny_vocab(), {0.4, 0.4, 0.2}, 3); }
inline RewardFn count_a() { return lexicon_reward(tiny_vocab(), {1.0, 0.0, 0.0}, 3); }
inline RewardFn length3() { return length_reward(E, 3); }

// ---------------------------------------------------------------------------
// Reference tree for a context-free model with forced EOS at length t_max - 1.

struct Ref {
  std::vector<double> p;  // base probabilities, EOS last
  int t_max;
  std::function<double(const Sequence&)> r;

  std::vector<double> next(const Sequence& prefix) const {
    if (static_cast<int>(prefix.size()) == t_max - 1) {
      std::vector<double> d(p.size(), 0.0);
      d.back() = 1.0;
      return d;
    }
    return p;
  }

  bool done(const Sequence& s) const { return !s.empty() && s.back() == static_cast<Token>(p.size() - 1); }

  // All complete responses extending `prefix`, with conditional probabilities.
  void complete(const Sequence& prefix, double w, std::vector<std::pair<Sequence, double>>& out) const {
    if (done(prefix)) {
      out.emplace_back(prefix, w);
      return;
    }
    auto d = next(prefix);
    for (std::size_t z = 0; z < d.size(); ++z) {
      if (d[z] == 0.0) continue;
      Sequence s = prefix;
      s.push_back(static_cast<Token>(z));
      complete(s, w * d[z], out);
    }
  }

  std::vector<std::pair<Sequence, double>> sequences(const Sequence& prefix = {}) const {
    std::vector<std::pair<Sequence, double>> out;
    complete(prefix, 1.0, out);
    return out;
  }

  double value(const Sequence& prefix) const {
    double v = 0.0;
    for (const auto& [s, w] : sequences(prefix)) v += w * r(s);
    return v;
  }

  // Every prefix reachable from the empty one, including the empty prefix.
  std::vector<Sequence> contexts() const {
    std::vector<Sequence> out{{}};
    for (std::size_t i = 0; i < out.size(); ++i) {
      if (done(out[i])) continue;
      auto d = next(out[i]);
      for (std::size_t z = 0; z < d.size(); ++z)
        if (d[z] > 0.0) {
          Sequence s = out[i];
          s.push_back(static_cast<Token>(z));
          out.push_back(s);
        }
    }
    return out;
  }
};

inline double count_a_ref(const Sequence& s) {
  double n = 0;
  for (Token t : s) n += (t == A);
  return n / 3.0;
}

inline double length_ref(const Sequence& s) { return std::log(static_cast<double>(s.size()) / 3.0); }

inline Ref tiny_ref(std::function<double(const Sequence&)> r = count_a_ref) { return Ref{{0.5, 0.3, 0.2}, 3, std::move(r)}; }

// Calls f(tuple) for every K-tuple of indices in [0, n).
inline void for_each_tuple(std::size_t n, int k, const std::function<void(const std::vector<std::size_t>&)>& f) {
  std::vector<std::size_t> idx(static_cast<std::size_t>(k), 0);
  while (true) {
    f(idx);
    int i = k - 1;
    while (i >= 0 && ++idx[static_cast<std::size_t>(i)] == n) idx[static_cast<std::size_t>(i--)] = 0;
    if (i < 0) return;
  }
}

// Best-of-K output law: enumerate K-tuples of complete sequences, pick the first argmax.
inline std::map<Sequence, double> brute_best_of_k(const Ref& ref, int k) {
  auto seqs = ref.sequences();
  std::map<Sequence, double> law;
  for_each_tuple(seqs.size(), k, [&](const std::vector<std::size_t>& t) {
    double w = 1.0;
    std::size_t best = 0;
    for (std::size_t i = 0; i < t.size(); ++i) {
      w *= seqs[t[i]].second;
      if (ref.r(seqs[t[i]].first) > ref.r(seqs[t[best]].first)) best = i;
    }
    law[seqs[t[best]].first] += w;
  });
  return law;
}

// Blockwise law with block size M = 1 and scorer V: each step draws K next tokens
// and keeps the first one with the highest V(prefix + z).
inline void brute_blockwise_m1(const Ref& ref, int k, const std::function<double(const Sequence&)>& v, const Sequence& prefix, double w,
                               std::map<Sequence, double>& law) {
  if (ref.done(prefix)) {
    law[prefix] += w;
    return;
  }
  auto d = ref.next(prefix);
  std::map<Token, double> pick;
  for_each_tuple(d.size(), k, [&](const std::vector<std::size_t>& t) {
    double pw = 1.0;
    for (std::size_t i : t) pw *= d[i];
    if (pw == 0.0) return;  // never drawn; scoring it would step past the horizon
    std::size_t best = 0;
    for (std::size_t i = 0; i < t.size(); ++i) {
      Sequence a = prefix, b = prefix;
      a.push_back(static_cast<Token>(t[i]));
      b.push_back(static_cast<Token>(t[best]));
      if (v(a) > v(b)) best = i;
    }
    pick[static_cast<Token>(t[best])] += pw;
  });
  for (const auto& [z, pz] : pick) {
    Sequence s = prefix;
    s.push_back(z);
    brute_blockwise_m1(ref, k, v, s, w * pz, law);
  }
}

inline std::map<Sequence, double> brute_blockwise_m1(const Ref& ref, int k, const std::function<double(const Sequence&)>& v) {
  std::map<Sequence, double> law;
  brute_blockwise_m1(ref, k, v, {}, 1.0, law);
  return law;
}

inline double law_kl(const Ref& ref, const std::map<Sequence, double>& law) {
  std::map<Sequence, double> base;
  for (const auto& [s, w] : ref.sequences()) base[s] = w;
  double kl = 0.0;
  for (const auto& [s, q] : law)
    if (q > 0.0) kl += q * std::log(q / base.at(s));
  return kl;
}

inline double law_reward(const Ref& ref, const std::map<Sequence, double>& law) {
  double e = 0.0;
  for (const auto& [s, q] : law) e += q * ref.r(s);
  return e;
}

inline std::map<Sequence, double> to_map(const std::vector<OutcomeProb>& law) {
  std::map<Sequence, double> m;
  for (const auto& o : law) m[o.response] += o.prob;
  return m;
}

// Scorer that returns exact V* from the reference tree (for tiny-2, empty prompt).
inline PrefixScorer oracle_scorer(const BaseModel& model, const RewardFn& reward) {
  return PrefixScorer::tabular(model.vocab(), build_value_table(model, reward).entries());
}

inline Context ctx(Sequence prefix) { return Context{{}, std::move(prefix)}; }

}  // namespace fx
