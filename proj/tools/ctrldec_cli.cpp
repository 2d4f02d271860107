// ctrldec: command-line front end over the header library.
//
// Exit codes: 0 ok, 2 validation error (bad flags, files, shapes), 3 numerical
// non-convergence, 1 anything else (including a failed oracle-check).

#include <cstdio>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "ctrldec/ctrldec.hpp"
#include "ctrldec/io.hpp"

using namespace ctrldec;
using io::json;
namespace fs = std::filesystem;

namespace {

constexpr int kExitValidation = 2;
constexpr int kExitConvergence = 3;

struct Globals {
  std::string config;
  std::uint64_t seed = 0;
  bool seed_set = false;
  std::string out;
};

void emit(const Globals& g, const std::string& text) {
  if (g.out.empty()) std::cout << text;
  else io::write_text(g.out, text);
}

Sequence parse_prompt(const std::string& s, const Vocab& v) {
  if (s.empty()) return {};
  json arr = json::array();
  std::stringstream ss(s);
  std::string tok;
  while (std::getline(ss, tok, ',')) arr.push_back(tok);
  return io::to_tokens(arr, v);
}

std::shared_ptr<const PrefixScorer> scorer_or_null(const std::string& path, const Vocab& v) {
  if (path.empty()) return nullptr;
  return std::make_shared<const PrefixScorer>(io::load_scorer(path, v));
}

RewardFn load_reward(const std::string& path, const Vocab& v) {
  return io::reward_from_json(io::read_json(path), v, fs::path(path).parent_path());
}

// `--config` for the non-sweep subcommands supplies defaults: every key becomes
// `--key value` unless that flag is already on the command line.
std::vector<std::string> expand_config(std::vector<std::string> args) {
  if (args.empty()) return args;
  const std::string sub = args.front();
  if (sub == "sweep" || sub == "transfer-eval") return args;
  std::string cfg;
  for (std::size_t i = 0; i + 1 < args.size(); ++i)
    if (args[i] == "--config") cfg = args[i + 1];
  if (cfg.empty()) return args;
  json j = io::read_json(cfg);
  if (!j.is_object()) throw ValidationError("--config must hold a JSON object");
  for (const auto& [key, val] : j.items()) {
    const std::string flag = "--" + key;
    if (std::find(args.begin(), args.end(), flag) != args.end()) continue;
    if (val.is_boolean()) {
      if (val.get<bool>()) args.push_back(flag);
    } else if (val.is_array()) {
      for (const auto& x : val) {
        args.push_back(flag);
        args.push_back(x.is_string() ? x.get<std::string>() : x.dump());
      }
    } else {
      args.push_back(flag);
      args.push_back(val.is_string() ? val.get<std::string>() : val.dump());
    }
  }
  return args;
}

void require_out(const Globals& g, const char* what) {
  if (g.out.empty()) throw ValidationError(std::string(what) + ": --out is required");
}

}  // namespace

int run(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  args = expand_config(args);

  CLI::App app{"Controlled decoding toolkit: value-guided decoding, scorer training, and reward/KL evaluation"};
  app.require_subcommand(1);
  Globals g;
  app.add_option("--config", g.config, "JSON config (sweep/transfer-eval: the sweep plan; otherwise flag defaults)");
  auto* seed_opt = app.add_option("--seed", g.seed, "RNG seed");
  app.add_option("--out", g.out, "output path (stdout when omitted, where allowed)");

  auto sub = [&](const char* name, const char* desc) {
    auto* s = app.add_subcommand(name, desc);
    s->fallthrough();
    return s;
  };

  // fit-ngram
  std::string corpus, eos = "EOS", vocab_from;
  int order = 1, t_max = 0;
  double alpha = 0.0;
  auto* fit = sub("fit-ngram", "fit an n-gram base model from a whitespace-tokenized corpus");
  fit->add_option("--corpus", corpus)->required();
  fit->add_option("--order", order);
  fit->add_option("--alpha", alpha);
  fit->add_option("--t-max", t_max)->required();
  fit->add_option("--eos", eos);
  fit->add_option("--vocab-from", vocab_from, "take the vocabulary from this model/vocab JSON");

  // train-reward-bt
  std::string pairs_path;
  BtTrainConfig bt;
  bool bt_bias = false;
  auto* tbt = sub("train-reward-bt", "fit a Bradley-Terry reward on n-gram features");
  tbt->add_option("--pairs", pairs_path)->required();
  tbt->add_option("--vocab-from", vocab_from)->required();
  tbt->add_option("--epochs", bt.epochs);
  tbt->add_option("--lr", bt.lr);
  tbt->add_option("--holdout", bt.holdout_fraction);
  tbt->add_option("--batch", bt.batch_size);
  tbt->add_option("--max-length", bt.max_length);
  tbt->add_flag("--bias", bt_bias);

  // shared by the scorer trainers and decode
  std::string model_path, reward_path, dataset_path, scorer_kind = "tabular", init_path;
  TrainConfig tc;
  std::size_t rollouts = 100;
  int sweeps = 0;
  std::string target = "exact";

  auto* tf = sub("train-fudge", "CD-FUDGE: regress the prefix scorer on terminal rewards");
  tf->add_option("--model", model_path)->required();
  tf->add_option("--reward", reward_path);
  tf->add_option("--dataset", dataset_path, "rollout JSONL; on-policy sampling when omitted");
  tf->add_option("--scorer-kind", scorer_kind)->check(CLI::IsMember({"tabular", "linear"}));
  tf->add_option("--init", init_path);
  tf->add_option("--epochs", tc.epochs);
  tf->add_option("--rollouts", rollouts, "on-policy rollouts per epoch");
  tf->add_option("--lr", tc.lr);
  tf->add_option("--batch", tc.batch_size);

  auto* tq = sub("train-q", "CD-Q: regress the prefix scorer on bootstrapped targets");
  tq->add_option("--model", model_path)->required();
  tq->add_option("--reward", reward_path);
  tq->add_option("--dataset", dataset_path, "rollout JSONL (behavior policy arbitrary)");
  tq->add_option("--sweeps", sweeps, "full sweeps over every reachable context (exact targets, needs --reward)");
  tq->add_option("--scorer-kind", scorer_kind)->check(CLI::IsMember({"tabular", "linear"}));
  tq->add_option("--init", init_path);
  tq->add_option("--epochs", tc.epochs);
  tq->add_option("--lr", tc.lr);
  tq->add_option("--batch", tc.batch_size);
  tq->add_option("--target", target)->check(CLI::IsMember({"exact", "sampled"}));

  // decode
  std::string strategy = "base", prompt_str, scorer_path;
  double lambda = 1.0;
  int k = 1, m = 1;
  std::size_t n_decode = 1;
  auto* dec = sub("decode", "decode responses and write traces");
  dec->add_option("--model", model_path)->required();
  dec->add_option("--strategy", strategy)->check(CLI::IsMember({"base", "tokenwise", "blockwise", "best-of-k"}));
  dec->add_option("--scorer", scorer_path);
  dec->add_option("--reward", reward_path, "best-of-k selection reward");
  dec->add_option("--lambda", lambda);
  dec->add_option("--k", k);
  dec->add_option("--m", m);
  dec->add_option("--prompt", prompt_str, "comma-separated symbols");
  dec->add_option("--n", n_decode, "number of responses (JSONL when > 1)");

  // sweep / transfer-eval
  std::size_t sweep_n = 0;
  unsigned threads = 0;
  std::string eval_model_path, trained_on_path;
  auto* sw = sub("sweep", "reward/KL trade-off sweep to CSV");
  sw->add_option("--n", sweep_n, "override samples per point");
  sw->add_option("--threads", threads);
  auto* te = sub("transfer-eval", "evaluate a scorer trained on one base model under another");
  te->add_option("--eval-model", eval_model_path);
  te->add_option("--trained-on", trained_on_path, "defaults to the config's model");
  te->add_option("--n", sweep_n);
  te->add_option("--threads", threads);

  // oracle-check
  std::vector<double> lambdas{0.5, 1.0, 2.0};
  std::string export_scorer, export_values;
  auto* oc = sub("oracle-check", "exact V*, Bellman residuals and closed-form vs numeric policies");
  oc->add_option("--model", model_path)->required();
  oc->add_option("--reward", reward_path)->required();
  oc->add_option("--lambda", lambdas);
  oc->add_option("--prompt", prompt_str);
  oc->add_option("--export-scorer", export_scorer, "write V* as a tabular scorer checkpoint");
  oc->add_option("--export-values", export_values);

  // kl-bound
  std::vector<int> lengths;
  std::vector<double> weights;
  int bm = 0;
  auto* kb = sub("kl-bound", "analytic KL bound for best-of-K (no --m) or blockwise");
  kb->add_option("--k", k)->required();
  kb->add_option("--m", bm, "block length; blockwise bound when given");
  kb->add_option("--length", lengths, "per-prompt response lengths");
  kb->add_option("--weights", weights, "prompt weights (uniform by default)");

  try {
    std::reverse(args.begin(), args.end());
    app.parse(args);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitValidation;
  }
  g.seed_set = seed_opt->count() > 0;
  tc.seed = g.seed;
  bt.seed = g.seed;

  if (*fit) {
    auto lines = io::read_corpus(corpus);
    Vocab v = vocab_from.empty() ? io::corpus_vocab(lines, eos) : io::vocab_from_json(io::read_json(vocab_from));
    auto model = fit_ngram(io::encode_corpus(lines, v), order, alpha, v, t_max);
    emit(g, io::model_to_json(model).dump(2) + "\n");
    std::cerr << "fit-ngram: " << lines.size() << " sequences, vocab " << v.size() << ", order " << order << "\n";
    return 0;
  }

  if (*tbt) {
    require_out(g, "train-reward-bt");
    Vocab v = io::vocab_from_json(io::read_json(vocab_from));
    auto pairs = io::read_pairs(pairs_path, v);
    auto res = train_reward_bt(pairs, NgramFeaturizer(v.size(), bt_bias), v.eos(), bt);
    const auto& lr = std::get<LearnedBtReward>(res.reward.kind());
    io::write_text(g.out, io::learned_reward_to_json(lr, v).dump(2) + "\n");
    std::cout << "train_accuracy " << res.train_accuracy << "\nheldout_accuracy " << res.heldout_accuracy << "\nfinal_loss " << res.loss_trace.back()
              << "\n";
    if (!res.warning.empty()) std::cerr << "warning: " << res.warning << "\n";
    return 0;
  }

  if (*tf || *tq) {
    require_out(g, tf->parsed() ? "train-fudge" : "train-q");
    auto model = io::load_model(model_path);
    const Vocab& v = model.vocab();
    PrefixScorer init = !init_path.empty()                ? io::load_scorer(init_path, v)
                        : scorer_kind == "linear"         ? PrefixScorer::linear(v)
                                                          : PrefixScorer::tabular(v);
    std::optional<RewardFn> reward;
    if (!reward_path.empty()) reward = load_reward(reward_path, v);
    TrainResult res{init, {}};
    if (*tf) {
      if (!dataset_path.empty()) res = train_fudge(init, io::read_dataset(dataset_path, v), tc);
      else if (reward) res = train_fudge(init, OnPolicySource{model, *reward, PromptSet{}, rollouts}, tc);
      else throw ValidationError("train-fudge: need --dataset or --reward");
    } else {
      tc.target = target == "sampled" ? QTarget::Sampled : QTarget::ExactExpectation;
      if (sweeps > 0) {
        if (!reward) throw ValidationError("train-q --sweeps needs --reward");
        tc.epochs = sweeps;
        res = train_q_sweeps(init, model, *reward, PromptSet{}, tc);
      } else if (!dataset_path.empty()) {
        res = train_q(init, io::read_dataset(dataset_path, v), model, tc);
      } else {
        throw ValidationError("train-q: need --dataset or --sweeps");
      }
    }
    io::write_text(g.out, io::scorer_to_json(res.scorer).dump(2) + "\n");
    if (!res.loss_trace.empty()) std::cout << "final_loss " << res.loss_trace.back() << "\n";
    if (reward) {
      double sup = 0.0;
      for (const auto& [key, val] : build_value_table(model, *reward).entries()) {
        Context c = Context::from_key(key);
        if (!c.prefix.empty()) sup = std::max(sup, std::abs(res.scorer.score(c) - val));
      }
      std::cout << "sup_error_vs_vstar " << sup << "\n";
    }
    return 0;
  }

  if (*dec) {
    auto model = io::load_model(model_path);
    const Vocab& v = model.vocab();
    DecodePolicySpec spec;
    spec.seed = g.seed;
    if (strategy == "base") spec.strategy = BasePolicy{};
    else if (strategy == "tokenwise") spec.strategy = TokenwisePolicy{lambda, scorer_or_null(scorer_path, v)};
    else if (strategy == "blockwise") spec.strategy = BlockwisePolicy{k, m, scorer_or_null(scorer_path, v)};
    else {
      if (reward_path.empty()) throw ValidationError("decode: best-of-k needs --reward");
      spec.strategy = BestOfKPolicy{k, std::make_shared<const RewardFn>(load_reward(reward_path, v))};
    }
    spec.validate();
    const Sequence prompt = parse_prompt(prompt_str, v);
    RandomStream rng(g.seed);
    std::string text;
    for (std::size_t i = 0; i < n_decode; ++i) {
      auto tr = decode(spec, model, prompt, rng);
      text += n_decode == 1 ? io::trace_to_json(tr, v).dump(2) + "\n" : io::trace_to_json(tr, v).dump() + "\n";
    }
    emit(g, text);
    return 0;
  }

  if (*sw || *te) {
    if (g.config.empty()) throw ValidationError("--config is required");
    auto loaded = io::load_sweep_file(g.config);
    if (g.seed_set) loaded.plan.seed = g.seed;
    if (sweep_n > 0) loaded.plan.n = sweep_n;
    if (threads > 0) loaded.plan.threads = threads;
    SweepResult res;
    if (*sw) {
      res = run_sweep(loaded.plan);
    } else {
      std::optional<BaseModel> eval = loaded.eval_model;
      if (!eval_model_path.empty()) eval = io::load_model(eval_model_path);
      if (!eval) throw ValidationError("transfer-eval: --eval-model (or eval_model in the config) is required");
      BaseModel trained_on = trained_on_path.empty() ? loaded.plan.model : io::load_model(trained_on_path);
      res = transfer_eval(loaded.plan, trained_on, *eval);
    }
    if (g.out.empty()) std::cout << to_csv(res.rows);
    else io::write_sweep(res, g.out);
    return 0;
  }

  if (*oc) {
    auto model = io::load_model(model_path);
    const Vocab& v = model.vocab();
    auto reward = load_reward(reward_path, v);
    const Sequence prompt = parse_prompt(prompt_str, v);
    auto table = build_value_table(model, reward, prompt);
    auto rep = check_bellman(model, reward, table);
    std::cout << "contexts " << rep.checked << "\nV*(root) " << table.at(Context{prompt, {}}) << "\nbellman_max_residual " << rep.max_residual
              << " at \"" << rep.worst_key << "\"\n";
    bool ok = rep.max_residual <= 1e-12;
    for (double lam : lambdas) {
      double worst = 0.0;
      for (const auto& level : reachable_contexts(model, prompt))
        for (const auto& c : level) {
          if (c.terminated(v.eos())) continue;
          auto closed = optimal_policy_closed_form(lam, model, table, c);
          auto num = optimal_policy_numeric(lam, model, reward, c);
          worst = std::max(worst, total_variation(closed, num.policy));
        }
      std::cout << "lambda " << lam << " closed_vs_numeric_tv " << worst << "\n";
      ok = ok && worst <= 1e-6;
    }
    if (!export_scorer.empty()) io::write_text(export_scorer, io::scorer_to_json(PrefixScorer::tabular(v, table.entries(), 0.0)).dump(2) + "\n");
    if (!export_values.empty()) io::write_text(export_values, io::value_table_to_json(table).dump(2) + "\n");
    std::cout << (ok ? "ok\n" : "FAILED\n");
    return ok ? 0 : 1;
  }

  if (*kb) {
    double b;
    if (bm == 0) {
      b = kl_bound_bon(k);
    } else {
      if (lengths.empty()) throw ValidationError("kl-bound: blockwise needs --length");
      std::vector<Sequence> ps(lengths.size());
      for (std::size_t i = 0; i < ps.size(); ++i) ps[i] = Sequence{static_cast<Token>(i)};
      PromptSet prompts(ps, weights);
      b = kl_bound_blockwise(k, prompts, lengths, bm);
    }
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.10g\n", b);
    emit(g, buf);
    return 0;
  }
  return kExitValidation;
}

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const ConvergenceError& e) {
    std::cerr << "did not converge: " << e.what() << " (residual " << e.residual() << ")\n";
    return kExitConvergence;
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "error: malformed JSON: " << e.what() << "\n";
    return kExitValidation;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
