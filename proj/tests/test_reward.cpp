#include <gtest/gtest.h>

#include <cmath>

#include "fixtures.hpp"

using namespace ctrldec;
using fx::A;
using fx::B;
using fx::E;

TEST(TerminalReward, LengthReward) {
  // 1024-step horizon over a 2-symbol alphabet: only the length matters.
  Vocab v({"x", "EOS"}, "EOS");
  auto r = length_reward(v.eos(), 1024);
  Sequence full(1023, 0);
  full.push_back(v.eos());
  EXPECT_DOUBLE_EQ(r.terminal({}, full), 0.0);
  Sequence half(511, 0);
  half.push_back(v.eos());
  EXPECT_NEAR(r.terminal({}, half), -0.6931471805599453, 1e-15);
  EXPECT_LE(r.terminal({}, half), r.bound());
}

TEST(TerminalReward, PatternReward) {
  auto r = pattern_reward(E, {A, A});
  EXPECT_EQ(r.terminal({}, {A, A, E}), 1.0);
  EXPECT_EQ(r.terminal({}, {A, B, E}), 0.0);
  EXPECT_EQ(r.terminal({}, {E}), 0.0);
}

TEST(TerminalReward, RejectsUnterminated) {
  for (const auto& r : {fx::count_a(), fx::length3(), constant_reward(E, 2.0), pattern_reward(E, {A})}) {
    EXPECT_THROW(r.terminal({}, {A, B}), PreconditionError);
    EXPECT_THROW(r.terminal({}, {}), PreconditionError);
    EXPECT_THROW(r.terminal({}, {E, A, E}), PreconditionError);
  }
}

TEST(TokenwiseReward, ZeroBeforeEosTerminalAtEos) {
  auto r = fx::count_a();
  EXPECT_EQ(tokenwise_reward(r, fx::ctx({A, B})), 0.0);
  EXPECT_NEAR(tokenwise_reward(r, fx::ctx({A, E})), 1.0 / 3, 1e-15);
  EXPECT_EQ(tokenwise_reward(constant_reward(E, -1.5), fx::ctx({B, E})), -1.5);
}

TEST(TokenwiseReward, ZeroOnEveryOpenContextAndTelescopes) {
  auto m = fx::tiny2();
  for (const auto& r : {fx::count_a(), fx::length3(), pattern_reward(E, {A, B}), constant_reward(E, 0.7)}) {
    for (const auto& level : reachable_contexts(m, {}))
      for (const auto& c : level)
        if (!c.prefix.empty() && !c.terminated(E)) {
          EXPECT_EQ(tokenwise_reward(r, c), 0.0);
        }
    for (const auto& ws : enumerate_sequences(m, {})) {
      double sum = 0.0;
      for (std::size_t t = 1; t <= ws.response.size(); ++t) sum += tokenwise_reward(r, fx::ctx(Sequence(ws.response.begin(), ws.response.begin() + t)));
      EXPECT_EQ(sum, r.terminal({}, ws.response));
    }
  }
}

TEST(Rewards, BoundedAboveOnTiny2) {
  auto m = fx::tiny2();
  auto combo = combine_rewards({{1.0, fx::length3()}, {-2.0, pattern_reward(E, {A, A})}, {0.5, fx::count_a()}});
  for (const auto& r : {fx::count_a(), fx::length3(), pattern_reward(E, {A}), constant_reward(E, 3.0), combo})
    for (const auto& ws : enumerate_sequences(m, {})) {
      EXPECT_LE(r.terminal({}, ws.response), r.bound() + 1e-15);
      EXPECT_GE(r.terminal({}, ws.response), r.lower_bound() - 1e-15);
    }
}

TEST(CombineRewards, IdentityCancellationAndSum) {
  auto m = fx::tiny2();
  auto r = fx::count_a();
  auto id = combine_rewards({{1.0, r}});
  auto zero = combine_rewards({{1.0, r}, {-1.0, r}});
  for (const auto& ws : enumerate_sequences(m, {})) {
    EXPECT_EQ(id.terminal({}, ws.response), r.terminal({}, ws.response));
    EXPECT_EQ(zero.terminal({}, ws.response), 0.0);
  }
  auto sum = combine_rewards({{1.0, fx::length3()}, {2.0, pattern_reward(E, {A, A})}});
  EXPECT_DOUBLE_EQ(sum.terminal({}, {A, A, E}), 2.0);
  EXPECT_THROW(combine_rewards({}), ValidationError);
  EXPECT_THROW(combine_rewards({{kPosInf, r}}), ValidationError);
}

TEST(LexiconReward, CountOverHorizon) {
  auto r = fx::count_a();
  EXPECT_NEAR(r.terminal({}, {A, E}), 1.0 / 3, 1e-15);
  EXPECT_NEAR(r.terminal({}, {A, A, E}), 2.0 / 3, 1e-15);
  EXPECT_THROW(lexicon_reward(fx::tiny_vocab(), {1.0}, 3), ValidationError);
}

namespace {

// Preferred response contains "a"; the other never does.
std::vector<PreferencePair> separable_pairs(int n, std::uint64_t seed) {
  RandomStream rng(seed);
  std::vector<PreferencePair> out;
  for (int i = 0; i < n; ++i) {
    Sequence with{B}, without{B};
    const auto len = 1 + rng.uniform_index(3);
    for (std::size_t j = 0; j < len; ++j) {
      with.push_back(rng.uniform() < 0.5 ? A : B);
      without.push_back(B);
    }
    with[rng.uniform_index(with.size())] = A;
    with.push_back(E);
    without.push_back(E);
    const bool a_first = rng.uniform() < 0.5;
    out.push_back(a_first ? PreferencePair{{}, with, without, true} : PreferencePair{{}, without, with, false});
  }
  return out;
}

}  // namespace

TEST(TrainRewardBt, SeparableConstructionReachesFullHeldOutAccuracy) {
  auto pairs = separable_pairs(200, 5);
  NgramFeaturizer f(3, false);
  BtTrainConfig cfg;
  cfg.lr = 0.5;
  cfg.epochs = 300;
  cfg.seed = 11;
  auto res = train_reward_bt(pairs, f, E, cfg);
  EXPECT_EQ(res.n_heldout, 40u);
  EXPECT_DOUBLE_EQ(res.heldout_accuracy, 1.0);
  EXPECT_DOUBLE_EQ(res.train_accuracy, 1.0);
  EXPECT_GT(res.weights[A], 0.0);
  EXPECT_TRUE(res.warning.empty());
  for (const auto& p : pairs) EXPECT_GT(res.reward.terminal(p.prompt, p.winner()), res.reward.terminal(p.prompt, p.loser()));
}

TEST(TrainRewardBt, LossNonIncreasingAtSmallLr) {
  auto pairs = separable_pairs(100, 7);
  BtTrainConfig cfg;
  cfg.lr = 1e-2;
  cfg.epochs = 200;
  auto res = train_reward_bt(pairs, NgramFeaturizer(3, false), E, cfg);
  ASSERT_EQ(res.loss_trace.size(), 201u);
  for (std::size_t i = 1; i < res.loss_trace.size(); ++i) EXPECT_LE(res.loss_trace[i], res.loss_trace[i - 1] + 1e-15);
}

TEST(TrainRewardBt, LabelSymmetricPairsGiveZeroWeights) {
  auto base = separable_pairs(50, 3);
  std::vector<PreferencePair> sym;
  for (const auto& p : base) {
    sym.push_back(p);
    sym.push_back({p.prompt, p.a, p.b, !p.a_preferred});
  }
  BtTrainConfig cfg;
  cfg.holdout_fraction = 0.0;
  cfg.epochs = 100;
  auto res = train_reward_bt(sym, NgramFeaturizer(3, true), E, cfg);
  for (double w : res.weights) EXPECT_NEAR(w, 0.0, 1e-6);
}

TEST(TrainRewardBt, ZeroEpochsKeepsInitialization) {
  auto pairs = separable_pairs(40, 9);
  BtTrainConfig cfg;
  cfg.epochs = 0;
  auto res = train_reward_bt(pairs, NgramFeaturizer(3, false), E, cfg);
  for (double w : res.weights) EXPECT_EQ(w, 0.0);
  EXPECT_DOUBLE_EQ(res.train_accuracy, 0.5);
  EXPECT_DOUBLE_EQ(res.heldout_accuracy, 0.5);
}

TEST(TrainRewardBt, DegenerateFeaturesWarn) {
  std::vector<PreferencePair> pairs{{{}, {A, E}, {A, E}, true}, {{}, {B, E}, {B, E}, false}};
  auto res = train_reward_bt(pairs, NgramFeaturizer(3, false), E, BtTrainConfig{});
  EXPECT_FALSE(res.warning.empty());
  for (double w : res.weights) EXPECT_EQ(w, 0.0);
  EXPECT_THROW(train_reward_bt({}, NgramFeaturizer(3, false), E, BtTrainConfig{}), ValidationError);
}
