#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "fixtures.hpp"

using namespace ctrldec;
using fx::A;
using fx::B;
using fx::E;

namespace {

// Sup-norm gap to V* over non-empty prefixes (the losses never touch the empty one).
double sup_error(const PrefixScorer& s, const ValueTable& vstar) {
  double m = 0.0;
  for (const auto& [key, v] : vstar.entries()) {
    Context c = Context::from_key(key);
    if (c.prefix.empty()) continue;
    m = std::max(m, std::abs(s.score(c) - v));
  }
  return m;
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  return v[v.size() / 2];
}

}  // namespace

TEST(Score, Initialization) {
  auto t = PrefixScorer::tabular(fx::tiny_vocab());
  auto l = PrefixScorer::linear(fx::tiny_vocab());
  for (Sequence p : {Sequence{}, Sequence{A}, Sequence{B, A, E}}) {
    EXPECT_EQ(t.score(fx::ctx(p)), 0.0);
    EXPECT_EQ(l.score(fx::ctx(p)), 0.0);
  }
  auto& w = std::get<LinearScorer>(l.mutable_kind());
  w.weights[w.featurizer.bias_index()] = 0.75;
  for (Sequence p : {Sequence{}, Sequence{A}, Sequence{B, A, E}}) EXPECT_EQ(l.score(fx::ctx(p)), 0.75);
}

TEST(Score, AllNextMatchesScore) {
  auto m = fx::tiny2();
  auto oracle = fx::oracle_scorer(m, fx::count_a());
  RandomStream rng(5);
  auto lin = PrefixScorer::linear(m.vocab());
  for (double& x : std::get<LinearScorer>(lin.mutable_kind()).weights) x = rng.uniform() - 0.5;
  for (const auto& s : {oracle, lin, PrefixScorer::tabular(m.vocab())})
    for (Sequence p : {Sequence{}, Sequence{A}, Sequence{B}, Sequence{A, B}}) {
      auto v = s.score_all_next(fx::ctx(p));
      ASSERT_EQ(v.size(), 3u);
      for (Token z = 0; z < 3; ++z) EXPECT_EQ(v[static_cast<std::size_t>(z)], s.score(fx::ctx(p).extended(z)));
    }
  auto v = oracle.score_all_next({});
  EXPECT_NEAR(v[0], 0.5, 1e-15);
  EXPECT_NEAR(v[1], 1.0 / 6, 1e-15);
  EXPECT_NEAR(v[2], 0.0, 1e-15);
  EXPECT_THROW(oracle.score_all_next(fx::ctx({A, E})), PreconditionError);
}

TEST(TrainFudge, SingleResponseRegressesToItsReward) {
  RolloutDataset ds{{{{}, {A, B, E}, 0.4}}, false};
  TrainConfig cfg;
  cfg.lr = 0.1;
  cfg.epochs = 400;
  auto res = train_fudge(PrefixScorer::tabular(fx::tiny_vocab()), ds, cfg);
  for (Sequence p : {Sequence{A}, Sequence{A, B}, Sequence{A, B, E}}) EXPECT_NEAR(res.scorer.score(fx::ctx(p)), 0.4, 1e-6);
  EXPECT_EQ(res.scorer.score({}), 0.0);
  EXPECT_EQ(res.loss_trace.size(), 400u);
}

TEST(TrainFudge, ZeroEpochsIsNoOp) {
  auto m = fx::tiny2();
  auto r = fx::count_a();
  auto init = fx::oracle_scorer(m, fx::length3());
  TrainConfig cfg;
  cfg.epochs = 0;
  EXPECT_EQ(train_fudge(init, OnPolicySource{m, r, PromptSet{}, 10}, cfg).scorer, init);
  RolloutDataset ds{{{{}, {A, E}, 1.0}}, true};
  EXPECT_EQ(train_fudge(init, ds, cfg).scorer, init);
  EXPECT_EQ(train_q(init, ds, m, cfg).scorer, init);
}

TEST(TrainFudge, Errors) {
  auto m = fx::tiny2();
  TrainConfig cfg;
  EXPECT_THROW(train_fudge(PrefixScorer::tabular(m.vocab()), RolloutDataset{}, cfg), ValidationError);
  EXPECT_THROW(train_q(PrefixScorer::tabular(m.vocab()), RolloutDataset{}, m, cfg), ValidationError);
  cfg.lr = 0.0;
  RolloutDataset ds{{{{}, {A, E}, 1.0}}, true};
  EXPECT_THROW(train_fudge(PrefixScorer::tabular(m.vocab()), ds, cfg), ValidationError);
  RolloutDataset bad{{{{}, {A, B}, 1.0}}, true};
  EXPECT_THROW(train_fudge(PrefixScorer::tabular(m.vocab()), bad, TrainConfig{}), ValidationError);
  Vocab other({"x", "y", "z", "EOS"}, "EOS");
  EXPECT_THROW(train_q(PrefixScorer::tabular(other), ds, m, TrainConfig{}), VocabMismatchError);
}

// On-policy CD-FUDGE: 2e4 rollouts at lr 0.05 land within 0.05 of V*.
TEST(TrainFudge, OnPolicyConvergesToVStar) {
  auto m = fx::tiny2();
  auto r = fx::count_a();
  TrainConfig cfg;
  cfg.lr = 0.05;
  cfg.epochs = 20;
  cfg.batch_size = 10;
  cfg.seed = 2024;
  auto res = train_fudge(PrefixScorer::tabular(m.vocab()), OnPolicySource{m, r, PromptSet{}, 1000}, cfg);
  EXPECT_LT(sup_error(res.scorer, build_value_table(m, r)), 0.05);
}

TEST(TrainFudge, LossTraceDecreasesAndIsReproducible) {
  auto m = fx::tiny2();
  auto r = fx::count_a();
  TrainConfig cfg;
  cfg.lr = 0.05;
  cfg.epochs = 200;
  cfg.seed = 17;
  auto res = train_fudge(PrefixScorer::tabular(m.vocab()), OnPolicySource{m, r, PromptSet{}, 20}, cfg);
  const std::size_t k = res.loss_trace.size() / 10;
  std::vector<double> head(res.loss_trace.begin(), res.loss_trace.begin() + static_cast<std::ptrdiff_t>(k));
  std::vector<double> tail(res.loss_trace.end() - static_cast<std::ptrdiff_t>(k), res.loss_trace.end());
  EXPECT_LT(median(tail), median(head));
  auto again = train_fudge(PrefixScorer::tabular(m.vocab()), OnPolicySource{m, r, PromptSet{}, 20}, cfg);
  EXPECT_EQ(again.scorer, res.scorer);
  EXPECT_EQ(again.loss_trace, res.loss_trace);
}

// CD-Q with exact-expectation targets: contraction toward V*, checked every sweep.
TEST(TrainQ, SweepsConvergeMonotonically) {
  auto m = fx::tiny2();
  for (const auto& r : {fx::count_a(), fx::length3()}) {
    const auto vstar = build_value_table(m, r);
    std::vector<double> errors;
    TrainConfig cfg;
    cfg.lr = 0.5;
    cfg.epochs = 500;
    cfg.eval_interval = 1;
    cfg.on_eval = [&](int, const PrefixScorer& s) { errors.push_back(sup_error(s, vstar)); };
    auto res = train_q_sweeps(PrefixScorer::tabular(m.vocab()), m, r, PromptSet{}, cfg);
    ASSERT_EQ(errors.size(), 501u);
    for (std::size_t i = 1; i < errors.size(); ++i) EXPECT_LE(errors[i], errors[i - 1]) << "sweep " << i;
    EXPECT_LT(errors.back(), 1e-3);
    EXPECT_LT(sup_error(res.scorer, vstar), 1e-3);
  }
}

TEST(TrainQ, EosOnlyDataTouchesOnlyTheTerminalContext) {
  auto m = fx::tiny2();
  RolloutDataset ds{std::vector<Rollout>(5, Rollout{{}, {E}, 0.8}), true};
  TrainConfig cfg;
  cfg.lr = 1.0;
  auto res = train_q(PrefixScorer::tabular(m.vocab()), ds, m, cfg);
  EXPECT_EQ(res.scorer.score(fx::ctx({E})), 0.8);
  const auto& table = std::get<TabularScorer>(res.scorer.kind()).table;
  EXPECT_EQ(table.size(), 1u);
  EXPECT_EQ(res.scorer.score(fx::ctx({A})), 0.0);
}

// Off-policy data from a uniform behavior model, targets from tiny-2's pi_ref.
TEST(TrainQ, OffPolicyDataConvergesOnVisitedContexts) {
  auto m = fx::tiny2();
  auto r = fx::count_a();
  auto behavior = BaseModel::categorical(m.vocab(), {1.0 / 3, 1.0 / 3, 1.0 / 3}, 3);
  RandomStream rng(31);
  auto ds = sample_dataset(behavior, r, PromptSet{}, 2000, rng, false);
  TrainConfig cfg;
  cfg.lr = 0.05;
  cfg.epochs = 30;
  cfg.seed = 4;
  auto res = train_q(PrefixScorer::tabular(m.vocab()), ds, m, cfg);
  const auto vstar = build_value_table(m, r);
  const auto& learned = std::get<TabularScorer>(res.scorer.kind()).table;
  EXPECT_EQ(learned.size(), 13u);
  for (const auto& [key, v] : learned) EXPECT_NEAR(v, vstar.at(Context::from_key(key)), 0.05) << key;
}

TEST(TrainQ, SampledTargetsAreReproducible) {
  auto m = fx::tiny2();
  RandomStream rng(1);
  auto ds = sample_dataset(m, fx::count_a(), PromptSet{}, 300, rng);
  TrainConfig cfg;
  cfg.target = QTarget::Sampled;
  cfg.epochs = 5;
  cfg.seed = 12;
  auto a = train_q(PrefixScorer::linear(m.vocab()), ds, m, cfg);
  auto b = train_q(PrefixScorer::linear(m.vocab()), ds, m, cfg);
  EXPECT_EQ(a.scorer, b.scorer);
  cfg.seed = 13;
  EXPECT_FALSE(train_q(PrefixScorer::linear(m.vocab()), ds, m, cfg).scorer == a.scorer);
}

TEST(CombineScorers, IdentityCancellationLinearity) {
  auto m = fx::tiny2();
  auto len = fx::length3();
  auto pat = pattern_reward(E, {A, B});
  auto s_len = fx::oracle_scorer(m, len);
  auto s_pat = fx::oracle_scorer(m, pat);
  auto id = combine_scorers({{1.0, s_len}});
  auto zero = combine_scorers({{1.0, s_len}, {-1.0, s_len}});
  auto both = combine_scorers({{1.0, s_len}, {1.0, s_pat}});
  const auto joint = build_value_table(m, combine_rewards({{1.0, len}, {1.0, pat}}));
  for (const auto& [key, v] : joint.entries()) {
    Context c = Context::from_key(key);
    EXPECT_EQ(id.score(c), s_len.score(c));
    EXPECT_EQ(zero.score(c), 0.0);
    EXPECT_NEAR(both.score(c), v, 1e-10) << key;
  }
  EXPECT_FALSE(both.trainable());
  EXPECT_THROW(combine_scorers({}), ValidationError);
  Vocab other({"x", "EOS"}, "EOS");
  EXPECT_THROW(combine_scorers({{1.0, s_len}, {1.0, PrefixScorer::tabular(other)}}), VocabMismatchError);
}
