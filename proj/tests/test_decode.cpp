#include <gtest/gtest.h>

#include <cmath>

#include "fixtures.hpp"

using namespace ctrldec;
using fx::A;
using fx::B;
using fx::E;

namespace {

std::vector<Context> open_contexts(const BaseModel& m) {
  std::vector<Context> out;
  for (const auto& level : reachable_contexts(m, {}))
    for (const auto& c : level)
      if (!c.terminated(m.eos())) out.push_back(c);
  return out;
}

void expect_well_formed(const BaseModel& m, const Sequence& y) {
  ASSERT_FALSE(y.empty());
  EXPECT_EQ(y.back(), m.eos());
  EXPECT_EQ(std::count(y.begin(), y.end(), m.eos()), 1);
  EXPECT_LE(static_cast<int>(y.size()), m.t_max());
}

}  // namespace

TEST(TokenwisePolicy, LambdaZeroAndConstantScorerGiveBase) {
  auto m = fx::tiny2();
  auto oracle = fx::oracle_scorer(m, fx::count_a());
  auto flat = PrefixScorer::tabular(m.vocab(), 3.5);
  for (const auto& c : open_contexts(m)) {
    auto base = m.next_token_dist(c);
    auto q0 = tokenwise_policy(m, oracle, 0.0, c);
    auto qf = tokenwise_policy(m, flat, 4.0, c);
    for (std::size_t z = 0; z < 3; ++z) {
      EXPECT_NEAR(q0[z], base[z], 1e-12);
      EXPECT_NEAR(qf[z], base[z], 1e-12);
    }
  }
}

TEST(TokenwisePolicy, OracleChainMatchesClosedFormAndNumeric) {
  auto m = fx::tiny2();
  auto r = fx::count_a();
  auto oracle = fx::oracle_scorer(m, r);
  for (double lambda : {0.0, 0.5, 1.0, 2.0, 5.0})
    for (const auto& c : open_contexts(m)) {
      auto q = tokenwise_policy(m, oracle, lambda, c);
      EXPECT_NEAR(q.total(), 1.0, 1e-12);
      EXPECT_LT(total_variation(q, optimal_policy_closed_form(lambda, m, oracle, c)), 1e-12);
      if (lambda == 2.0) {
        EXPECT_LT(total_variation(q, optimal_policy_numeric(lambda, m, r, c).policy), 1e-6);
      }
    }
}

TEST(DecodeTokenwise, LambdaZeroIsBitIdenticalToBaseSampling) {
  auto m = fx::tiny2();
  auto oracle = fx::oracle_scorer(m, fx::count_a());
  for (std::uint64_t seed = 0; seed < 500; ++seed) {
    RandomStream r1(seed), r2(seed);
    auto tr = decode_tokenwise(m, oracle, 0.0, {}, r1);
    EXPECT_EQ(tr.response, sample_sequence(m, {}, r2));
    EXPECT_EQ(r1.draws(), r2.draws());
    EXPECT_EQ(*tr.aligned_logprob, tr.base_logprob);
    EXPECT_EQ(tr.mean_token_kl(), 0.0);
  }
}

TEST(DecodeTokenwise, TraceLogprobsAndNormalization) {
  auto m = fx::tiny2();
  auto oracle = fx::oracle_scorer(m, fx::count_a());
  auto law = fx::to_map(exact_tokenwise_distribution(m, oracle, 1.5, {}));
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    RandomStream rng(seed);
    auto tr = decode_tokenwise(m, oracle, 1.5, {}, rng);
    expect_well_formed(m, tr.response);
    EXPECT_NEAR(*tr.aligned_logprob, std::log(law.at(tr.response)), 1e-12);
    EXPECT_NEAR(tr.base_logprob, sequence_logprob(m, {}, tr.response), 1e-12);
    for (const auto& st : tr.token_steps) {
      double s = 0.0;
      for (double q : st.policy) s += q;
      EXPECT_NEAR(s, 1.0, 1e-12);
      EXPECT_GE(st.kl, 0.0);
    }
  }
}

// Counts scorer calls: |vocab| per emitted token.
TEST(DecodeTokenwise, ScorerCalledVocabTimesPerToken) {
  struct Counting {
    mutable int calls = 0;
    double score(const Context&) const {
      ++calls;
      return 0.0;
    }
  } counting;
  auto m = fx::tiny2();
  RandomStream rng(3);
  auto tr = decode_tokenwise(m, counting, 1.0, {}, rng);
  EXPECT_EQ(counting.calls, 3 * static_cast<int>(tr.response.size()));
}

TEST(DecodeTokenwise, LargeLambdaFollowsRewardGreedyPath) {
  auto m = fx::tiny2();
  auto oracle = fx::oracle_scorer(m, fx::count_a());
  int hits = 0;
  const int n = 10000;
  for (int seed = 0; seed < n; ++seed) {
    RandomStream rng(static_cast<std::uint64_t>(seed));
    hits += decode_tokenwise(m, oracle, 1e3, {}, rng).response == Sequence{A, A, E};
  }
  EXPECT_GE(hits / static_cast<double>(n), 0.99);
}

TEST(Decode, ReplayReproducesTraces) {
  auto m = fx::tiny2();
  auto r = std::make_shared<const RewardFn>(fx::count_a());
  auto s = std::make_shared<const PrefixScorer>(fx::oracle_scorer(m, *r));
  for (const DecodePolicySpec& spec : {DecodePolicySpec{BasePolicy{}, 0}, DecodePolicySpec{TokenwisePolicy{2.0, s}, 0},
                                       DecodePolicySpec{BlockwisePolicy{3, 1, s}, 0}, DecodePolicySpec{BestOfKPolicy{4, r}, 0}}) {
    for (std::uint64_t seed = 0; seed < 50; ++seed) {
      RandomStream rng(seed);
      rng.discard(seed % 3);  // decode from a stream that has already been used
      auto tr = decode(spec, m, {}, rng);
      auto again = replay(spec, m, tr);
      EXPECT_EQ(again.response, tr.response) << spec.name();
      EXPECT_EQ(again.block_steps.size(), tr.block_steps.size());
    }
  }
}

TEST(DecodeBlockwise, KOneIsBaseSampling) {
  auto m = fx::tiny2();
  auto oracle = fx::oracle_scorer(m, fx::count_a());
  for (int mblock : {1, 2, 5})
    for (std::uint64_t seed = 0; seed < 300; ++seed) {
      RandomStream r1(seed), r2(seed);
      EXPECT_EQ(decode_blockwise(m, oracle, 1, mblock, {}, r1).response, sample_sequence(m, {}, r2));
    }
}

TEST(DecodeBlockwise, CollapsesToBestOfKWhenBlockCoversHorizon) {
  auto m = fx::tiny2();
  auto r = fx::count_a();
  auto oracle = fx::oracle_scorer(m, r);
  for (int k : {2, 4, 8})
    for (std::uint64_t seed = 0; seed < 1000; ++seed) {
      RandomStream r1(seed), r2(seed);
      auto bw = decode_blockwise(m, oracle, k, m.t_max(), {}, r1);
      auto bk = best_of_k(m, r, k, {}, r2);
      ASSERT_EQ(bw.response, bk.response) << "seed " << seed;
      EXPECT_EQ(bw.block_steps.front().chosen, bk.block_steps.front().chosen);
    }
}

TEST(DecodeBlockwise, WellFormedAndForcedEos) {
  auto m = fx::tiny2();
  auto oracle = fx::oracle_scorer(m, fx::count_a());
  bool saw_forced = false;
  for (std::uint64_t seed = 0; seed < 300; ++seed) {
    RandomStream rng(seed);
    auto tr = decode_blockwise(m, oracle, 4, 1, {}, rng);
    expect_well_formed(m, tr.response);
    saw_forced = saw_forced || tr.forced_eos;
    for (const auto& b : tr.block_steps) {
      EXPECT_EQ(b.candidates.size(), 4u);
      EXPECT_EQ(b.scores[b.chosen], *std::max_element(b.scores.begin(), b.scores.end()));
      for (std::size_t i = 0; i < b.chosen; ++i) EXPECT_LT(b.scores[i], b.scores[b.chosen]);
    }
  }
  EXPECT_TRUE(saw_forced);
}

// Blockwise K = 4, M = 1 with the oracle scorer beats base in exact expected reward;
// the library's enumeration matches an independent K-tuple enumeration.
TEST(DecodeBlockwise, ExactLawMatchesBruteForceAndImprovesReward) {
  auto m = fx::tiny2();
  auto r = fx::count_a();
  auto oracle = fx::oracle_scorer(m, r);
  auto ref = fx::tiny_ref();
  for (int k : {1, 2, 4, 8}) {
    auto lib = fx::to_map(exact_blockwise_distribution(m, oracle, k, 1, {}));
    auto brute = fx::brute_blockwise_m1(ref, k, [&](const Sequence& p) { return ref.value(p); });
    ASSERT_EQ(lib.size(), brute.size());
    for (const auto& [y, q] : brute) EXPECT_NEAR(lib.at(y), q, 1e-12);
  }
  const double base = exact_value(m, r, {});
  const double bw = outcome_expected_reward(exact_blockwise_distribution(m, oracle, 4, 1, {}), r, {});
  EXPECT_GT(bw, base);
}

TEST(DecodeBlockwise, MonteCarloMatchesExactLaw) {
  auto m = fx::tiny2();
  auto oracle = fx::oracle_scorer(m, fx::count_a());
  auto law = fx::to_map(exact_blockwise_distribution(m, oracle, 3, 2, {}));
  std::map<Sequence, int> counts;
  const int n = 40000;
  for (int i = 0; i < n; ++i) {
    RandomStream rng(derive_seed(555, static_cast<std::uint64_t>(i)));
    ++counts[decode_blockwise(m, oracle, 3, 2, {}, rng).response];
  }
  for (const auto& [y, q] : law) {
    const double se = std::sqrt(q * (1 - q) / n);
    EXPECT_NEAR(counts[y] / static_cast<double>(n), q, 4 * se + 1e-12);
  }
}

TEST(BestOfK, KOneAndConstantRewardAreBase) {
  auto m = fx::tiny2();
  auto c = constant_reward(E, 1.0);
  for (std::uint64_t seed = 0; seed < 300; ++seed) {
    RandomStream r1(seed), r2(seed), r3(seed);
    const Sequence base = sample_sequence(m, {}, r1);
    EXPECT_EQ(best_of_k(m, fx::count_a(), 1, {}, r2).response, base);
    auto tr = best_of_k(m, c, 5, {}, r3);
    EXPECT_EQ(tr.block_steps.front().chosen, 0u);
    EXPECT_EQ(tr.response, base);
  }
  auto law = fx::to_map(exact_best_of_k_distribution(m, c, 5, {}));
  for (const auto& ws : enumerate_sequences(m, {})) EXPECT_NEAR(law.at(ws.response), ws.prob, 1e-15);
}

// Order-statistics law vs enumeration of all K-tuples of complete sequences.
TEST(BestOfK, OrderStatisticsMatchTupleEnumeration) {
  auto m = fx::tiny2();
  for (auto [reward, ref] : {std::pair{fx::count_a(), fx::tiny_ref()}, std::pair{fx::length3(), fx::tiny_ref(fx::length_ref)}})
    for (int k : {1, 2, 4, 8}) {
      auto lib = fx::to_map(exact_best_of_k_distribution(m, reward, k, {}));
      auto brute = fx::brute_best_of_k(ref, k);
      for (const auto& [y, q] : brute) EXPECT_NEAR(lib[y], q, 1e-12) << "K=" << k;
    }
}

TEST(BestOfK, ExpectedRewardNonDecreasingInK) {
  auto m = fx::tiny2();
  auto r = fx::count_a();
  double prev = kNegInf;
  for (int k : {1, 2, 4, 8}) {
    const double e = outcome_expected_reward(exact_best_of_k_distribution(m, r, k, {}), r, {});
    EXPECT_GE(e, prev);
    prev = e;
  }
  // K = 1 is the base mean.
  EXPECT_NEAR(outcome_expected_reward(exact_best_of_k_distribution(m, r, 1, {}), r, {}), 0.3, 1e-15);
}

TEST(BestOfK, MonteCarloWithinThreeSigmaOfOrderStatistics) {
  auto m = fx::tiny2();
  auto r = fx::count_a();
  const double exact = outcome_expected_reward(exact_best_of_k_distribution(m, r, 4, {}), r, {});
  const int n = 100000;
  double sum = 0.0, sq = 0.0;
  for (int i = 0; i < n; ++i) {
    RandomStream rng(derive_seed(4, static_cast<std::uint64_t>(i)));
    const double v = r.terminal({}, best_of_k(m, r, 4, {}, rng).response);
    sum += v;
    sq += v * v;
  }
  const double mean = sum / n;
  const double se = std::sqrt((sq / n - mean * mean) / n);
  EXPECT_NEAR(mean, exact, 3 * se);
}

TEST(DecodePolicySpec, Validation) {
  auto s = std::make_shared<const PrefixScorer>(PrefixScorer::tabular(fx::tiny_vocab()));
  EXPECT_THROW((DecodePolicySpec{TokenwisePolicy{-1.0, s}, 0}).validate(), ValidationError);
  EXPECT_THROW((DecodePolicySpec{TokenwisePolicy{1.0, nullptr}, 0}).validate(), ValidationError);
  EXPECT_THROW((DecodePolicySpec{BlockwisePolicy{0, 1, s}, 0}).validate(), ValidationError);
  EXPECT_THROW((DecodePolicySpec{BlockwisePolicy{1, 0, s}, 0}).validate(), ValidationError);
  EXPECT_THROW((DecodePolicySpec{BestOfKPolicy{0, nullptr}, 0}).validate(), ValidationError);
  EXPECT_EQ((DecodePolicySpec{BestOfKPolicy{}, 0}).name(), "best-of-k");
}
