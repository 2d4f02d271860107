// Reward/KL trade-off on a three-token toy model.
//
// Trains a CD-Q scorer for a length reward, then compares tokenwise decoding,
// blockwise best-of-K and plain best-of-K at a few settings. Prints a CSV and
// how much area each strategy's frontier gains over base up to 2 nats.

#include <iostream>

#include "ctrldec/ctrldec.hpp"

using namespace ctrldec;

int main() {
  Vocab vocab({"a", "b", "EOS"}, "EOS");
  auto model = BaseModel::categorical(vocab, {0.5, 0.3, 0.2}, 3);
  auto reward = length_reward(vocab.eos(), 3);

  TrainConfig cfg;
  cfg.lr = 0.5;
  cfg.epochs = 300;
  auto trained = train_q_sweeps(PrefixScorer::tabular(vocab), model, reward, PromptSet{}, cfg);
  std::cout << "# CD-Q scorer, V(root) = " << trained.scorer.score({}) << " (exact " << exact_value(model, reward, {}) << ")\n";

  SweepPlan plan{model, std::make_shared<const PrefixScorer>(trained.scorer), reward, PromptSet{}, {0.5, 1, 2, 5, 10}, {2, 4, 8}, {1, 2}, {2, 4, 8}};
  plan.include_base = true;
  plan.n = 4000;
  plan.seed = 11;
  plan.threads = 4;
  auto res = run_sweep(plan);
  std::cout << to_csv(res.rows);

  const double floor = res.rows.front().reward_raw;  // base policy
  for (const char* s : {"tokenwise", "blockwise", "best-of-k"}) {
    std::vector<TradeoffPoint> pts;
    for (const auto& r : res.rows)
      if (r.strategy == s) pts.push_back(r);
    std::cout << "# area gained over base (KL <= 2) " << s << ": " << frontier_area(pts, 2.0, floor) - 2.0 * floor << "\n";
  }
}
