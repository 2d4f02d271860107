#pragma once

// JSON / JSONL / text formats. Tokens are written as vocabulary symbols; context
// keys use comma-joined token indices ("prompt|prefix").

#include <charconv>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "ctrldec/decode.hpp"
#include "ctrldec/errors.hpp"
#include "ctrldec/harness.hpp"
#include "ctrldec/oracle.hpp"
#include "ctrldec/reward.hpp"
#include "ctrldec/scorer.hpp"
#include "ctrldec/seqmodel.hpp"

namespace ctrldec::io {

using json = nlohmann::json;
namespace fs = std::filesystem;

inline constexpr const char* kStartSymbol = "<s>";  // left padding in n-gram histories

// ---------------------------------------------------------------------------
// Files

inline std::string read_text(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw ValidationError("cannot read " + p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_text(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw ValidationError("cannot write " + p.string());
  out << text;
  if (!out) throw ValidationError("write failed: " + p.string());
}

inline json parse_json(const std::string& text, const std::string& where) {
  try {
    return json::parse(text);
  } catch (const json::exception& e) {
    throw ValidationError(where + ": " + e.what());
  }
}

inline json read_json(const fs::path& p) { return parse_json(read_text(p), p.string()); }

inline std::vector<json> read_jsonl(const fs::path& p) {
  std::vector<json> out;
  std::istringstream in(read_text(p));
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    out.push_back(parse_json(line, p.string() + ":" + std::to_string(lineno)));
  }
  return out;
}

/// Field access that reports schema problems as validation errors.
template <class T>
T get(const json& j, const char* key) {
  if (!j.is_object() || !j.contains(key)) throw ValidationError(std::string("missing field '") + key + "'");
  try {
    return j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ValidationError(std::string("field '") + key + "': " + e.what());
  }
}

template <class T>
T get_or(const json& j, const char* key, T fallback) {
  if (!j.is_object() || !j.contains(key) || j.at(key).is_null()) return fallback;
  return get<T>(j, key);
}

// ---------------------------------------------------------------------------
// Vocab and token sequences

inline Sequence to_tokens(const json& arr, const Vocab& vocab) {
  if (!arr.is_array()) throw ValidationError("token list must be an array");
  Sequence s;
  for (const auto& t : arr) {
    if (t.is_string()) s.push_back(vocab.index_of(t.get<std::string>()));
    else if (t.is_number_integer()) {
      const auto v = t.get<long long>();
      if (v < 0 || static_cast<std::size_t>(v) >= vocab.size()) throw DomainError("token index out of range");
      s.push_back(static_cast<Token>(v));
    } else throw ValidationError("tokens must be strings or indices");
  }
  return s;
}

inline json from_tokens(const Sequence& s, const Vocab& vocab) {
  json arr = json::array();
  for (Token t : s) arr.push_back(t == kSequenceStart ? std::string(kStartSymbol) : vocab.symbol(t));
  return arr;
}

inline Sequence to_history(const json& arr, const Vocab& vocab) {
  Sequence s;
  for (const auto& t : arr) {
    if (t.is_string() && t.get<std::string>() == kStartSymbol) s.push_back(kSequenceStart);
    else s.push_back(to_tokens(json::array({t}), vocab).front());
  }
  return s;
}

inline std::string hash_hex(std::uint64_t h) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

inline Vocab vocab_from_json(const json& j) {
  return Vocab(get<std::vector<std::string>>(j, "vocab"), get<std::string>(j, "eos"));
}

// ---------------------------------------------------------------------------
// Base model checkpoint
//   {vocab, eos, kind: categorical|ngram|logit-table, t_max,
//    probs | order, alpha, counts: [{history, counts}] | order, logits: {default, rows: [{history, logits}]}}

inline json model_to_json(const BaseModel& m) {
  const Vocab& v = m.vocab();
  json j;
  j["vocab"] = v.tokens();
  j["eos"] = v.symbol(v.eos());
  j["kind"] = m.kind_name();
  j["t_max"] = m.t_max();
  std::visit(
      [&](const auto& k) {
        using K = std::decay_t<decltype(k)>;
        if constexpr (std::is_same_v<K, CategoricalModel>) {
          j["probs"] = k.probs;
        } else if constexpr (std::is_same_v<K, NgramModel>) {
          j["order"] = k.order;
          j["alpha"] = k.alpha;
          json rows = json::array();
          for (const auto& [h, c] : k.counts) rows.push_back({{"history", from_tokens(h, v)}, {"counts", c}});
          j["counts"] = rows;
        } else {
          j["order"] = k.order;
          json rows = json::array();
          for (const auto& [h, l] : k.rows) rows.push_back({{"history", from_tokens(h, v)}, {"logits", l}});
          j["logits"] = {{"default", k.default_logits}, {"rows", rows}};
        }
      },
      m.kind());
  return j;
}

inline BaseModel model_from_json(const json& j) {
  Vocab v = vocab_from_json(j);
  const auto kind = get<std::string>(j, "kind");
  const int t_max = get<int>(j, "t_max");
  if (kind == "categorical") return BaseModel(v, CategoricalModel{get<std::vector<double>>(j, "probs")}, t_max);
  if (kind == "ngram") {
    NgramModel m;
    m.order = get<int>(j, "order");
    m.alpha = get_or<double>(j, "alpha", 0.0);
    for (const auto& row : get<json>(j, "counts")) m.counts[to_history(get<json>(row, "history"), v)] = get<std::vector<std::uint64_t>>(row, "counts");
    return BaseModel(v, std::move(m), t_max);
  }
  if (kind == "logit-table") {
    LogitTableModel m;
    m.order = get<int>(j, "order");
    const json& lg = get<json>(j, "logits");
    m.default_logits = get<std::vector<double>>(lg, "default");
    for (const auto& row : get_or<json>(lg, "rows", json::array()))
      m.rows[to_history(get<json>(row, "history"), v)] = get<std::vector<double>>(row, "logits");
    return BaseModel(v, std::move(m), t_max);
  }
  throw ValidationError("model: unknown kind '" + kind + "'");
}

inline BaseModel load_model(const fs::path& p) { return model_from_json(read_json(p)); }

// ---------------------------------------------------------------------------
// Corpus: one whitespace-tokenized sequence per line

inline std::vector<std::vector<std::string>> read_corpus(const fs::path& p) {
  std::vector<std::vector<std::string>> lines;
  std::istringstream in(read_text(p));
  std::string line;
  while (std::getline(in, line)) {
    std::istringstream ls(line);
    std::vector<std::string> toks;
    for (std::string t; ls >> t;) toks.push_back(t);
    if (!toks.empty()) lines.push_back(std::move(toks));
  }
  return lines;
}

/// Vocabulary of a corpus: symbols in order of first appearance, EOS last.
inline Vocab corpus_vocab(const std::vector<std::vector<std::string>>& lines, const std::string& eos) {
  std::vector<std::string> syms;
  std::set<std::string> seen;
  for (const auto& l : lines)
    for (const auto& t : l)
      if (t != eos && seen.insert(t).second) syms.push_back(t);
  syms.push_back(eos);
  return Vocab(syms, eos);
}

inline std::vector<Sequence> encode_corpus(const std::vector<std::vector<std::string>>& lines, const Vocab& v) {
  std::vector<Sequence> out;
  for (const auto& l : lines) {
    Sequence s;
    for (const auto& t : l) s.push_back(v.index_of(t));
    out.push_back(std::move(s));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Preference pairs (JSONL): {prompt, a, b, label: "a"|"b"}

inline std::vector<PreferencePair> read_pairs(const fs::path& p, const Vocab& v) {
  std::vector<PreferencePair> out;
  for (const auto& j : read_jsonl(p)) {
    const auto label = get<std::string>(j, "label");
    if (label != "a" && label != "b") throw ValidationError("pair label must be \"a\" or \"b\"");
    out.push_back({to_tokens(get_or<json>(j, "prompt", json::array()), v), to_tokens(get<json>(j, "a"), v), to_tokens(get<json>(j, "b"), v),
                   label == "a"});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Rollout dataset (JSONL): {prompt, response, reward, policy: "base"|"external"}

inline RolloutDataset read_dataset(const fs::path& p, const Vocab& v) {
  RolloutDataset ds;
  bool any_external = false;
  for (const auto& j : read_jsonl(p)) {
    const auto pol = get_or<std::string>(j, "policy", "base");
    if (pol != "base" && pol != "external") throw ValidationError("dataset policy must be \"base\" or \"external\"");
    any_external = any_external || pol == "external";
    ds.records.push_back({to_tokens(get_or<json>(j, "prompt", json::array()), v), to_tokens(get<json>(j, "response"), v), get<double>(j, "reward")});
  }
  ds.on_policy = !any_external;
  ds.validate(v.eos());
  return ds;
}

inline std::string dataset_to_jsonl(const RolloutDataset& ds, const Vocab& v) {
  std::string out;
  for (const auto& r : ds.records) {
    json j{{"prompt", from_tokens(r.prompt, v)}, {"response", from_tokens(r.response, v)}, {"reward", r.reward},
           {"policy", ds.on_policy ? "base" : "external"}};
    out += j.dump() + "\n";
  }
  return out;
}

// ---------------------------------------------------------------------------
// Rewards
//   {kind: length, t_max} | {kind: lexicon, weights: {sym: w}, t_max} | {kind: pattern, target: [syms]}
//   {kind: constant, value} | {kind: combo, terms: [{weight, reward}]}
//   {kind: learned-bt, max_length, bias, weights: {feature name: w}} | {path: "file.json"}

inline json learned_reward_to_json(const LearnedBtReward& r, const Vocab& v) {
  json w = json::object();
  for (std::size_t i = 0; i < r.weights.size(); ++i)
    if (r.weights[i] != 0.0) w[r.featurizer.name(i, v)] = r.weights[i];
  return {{"kind", "learned-bt"}, {"vocab_hash", hash_hex(v.hash())}, {"max_length", r.max_length}, {"bias", r.featurizer.has_bias()}, {"weights", w}};
}

inline RewardFn reward_from_json(const json& j, const Vocab& v, const fs::path& base_dir = {}) {
  if (j.is_object() && j.contains("path") && !j.contains("kind")) return reward_from_json(read_json(base_dir / get<std::string>(j, "path")), v, base_dir);
  const auto kind = get<std::string>(j, "kind");
  if (kind == "length") return length_reward(v.eos(), get<int>(j, "t_max"));
  if (kind == "lexicon") {
    std::vector<double> w(v.size(), 0.0);
    const json wj = get<json>(j, "weights");
    for (const auto& [sym, val] : wj.items()) w[static_cast<std::size_t>(v.index_of(sym))] = val.get<double>();
    return lexicon_reward(v, std::move(w), get<int>(j, "t_max"));
  }
  if (kind == "pattern") return pattern_reward(v.eos(), to_tokens(get<json>(j, "target"), v));
  if (kind == "constant") return constant_reward(v.eos(), get<double>(j, "value"));
  if (kind == "combo") {
    std::vector<std::pair<double, RewardFn>> terms;
    for (const auto& t : get<json>(j, "terms")) terms.emplace_back(get<double>(t, "weight"), reward_from_json(get<json>(t, "reward"), v, base_dir));
    return combine_rewards(terms);
  }
  if (kind == "learned-bt") {
    if (j.contains("vocab_hash") && get<std::string>(j, "vocab_hash") != hash_hex(v.hash()))
      throw VocabMismatchError("learned reward: vocab hash mismatch");
    NgramFeaturizer f(v.size(), get_or<bool>(j, "bias", false));
    std::map<std::string, std::size_t> index;
    for (std::size_t i = 0; i < f.dim(); ++i) index[f.name(i, v)] = i;
    std::vector<double> w(f.dim(), 0.0);
    const json wj = get<json>(j, "weights");
    for (const auto& [name, val] : wj.items()) {
      auto it = index.find(name);
      if (it == index.end()) throw ValidationError("learned reward: unknown feature '" + name + "'");
      w[it->second] = val.get<double>();
    }
    return RewardFn(v.eos(), LearnedBtReward{f, std::move(w), get<int>(j, "max_length")});
  }
  throw ValidationError("reward: unknown kind '" + kind + "'");
}

// ---------------------------------------------------------------------------
// Scorer checkpoint: {kind: tabular|linear, vocab_hash, default?, table? | weights?}

inline json scorer_to_json(const PrefixScorer& s) {
  json j{{"kind", s.kind_name()}, {"vocab_hash", hash_hex(s.vocab().hash())}};
  if (const auto* t = std::get_if<TabularScorer>(&s.kind())) {
    j["default"] = t->default_value;
    j["table"] = t->table;
  } else if (const auto* l = std::get_if<LinearScorer>(&s.kind())) {
    j["weights"] = l->weights;
  } else {
    throw ValidationError("scorer checkpoint: combined scorers are not serializable");
  }
  return j;
}

inline PrefixScorer scorer_from_json(const json& j, const Vocab& v) {
  if (get<std::string>(j, "vocab_hash") != hash_hex(v.hash())) throw VocabMismatchError("scorer checkpoint: vocab hash mismatch");
  const auto kind = get<std::string>(j, "kind");
  if (kind == "tabular") return PrefixScorer::tabular(v, get_or<std::map<std::string, double>>(j, "table", {}), get_or<double>(j, "default", 0.0));
  if (kind == "linear") return PrefixScorer::linear(v, get<std::vector<double>>(j, "weights"));
  throw ValidationError("scorer: unknown kind '" + kind + "'");
}

inline PrefixScorer load_scorer(const fs::path& p, const Vocab& v) { return scorer_from_json(read_json(p), v); }

// ---------------------------------------------------------------------------
// Value table: {context key: value}

inline json value_table_to_json(const ValueTable& t) { return json(t.entries()); }

inline ValueTable value_table_from_json(const json& j) { return ValueTable(j.get<std::map<std::string, double>>()); }

// ---------------------------------------------------------------------------
// Decode trace

inline json trace_to_json(const DecodeTrace& t, const Vocab& v) {
  json steps = json::array();
  for (const auto& s : t.token_steps)
    steps.push_back({{"token", v.symbol(s.token)}, {"policy", s.policy}, {"aligned_logprob", s.aligned_logprob}, {"base_logprob", s.base_logprob}, {"kl", s.kl}});
  json blocks = json::array();
  for (const auto& b : t.block_steps) {
    json cands = json::array();
    for (const auto& c : b.candidates) cands.push_back(from_tokens(c, v));
    blocks.push_back({{"offset", b.offset}, {"candidates", cands}, {"scores", b.scores}, {"chosen", b.chosen}});
  }
  json j{{"strategy", t.strategy},       {"prompt", from_tokens(t.prompt, v)}, {"response", from_tokens(t.response, v)},
         {"seed", t.seed},               {"stream_offset", t.stream_offset},  {"token_steps", steps},
         {"block_steps", blocks},        {"base_logprob", t.base_logprob},    {"forced_eos", t.forced_eos},
         {"mean_token_kl", t.mean_token_kl()}};
  j["aligned_logprob"] = t.aligned_logprob ? json(*t.aligned_logprob) : json(nullptr);
  return j;
}

inline DecodeTrace trace_from_json(const json& j, const Vocab& v) {
  DecodeTrace t;
  t.strategy = get<std::string>(j, "strategy");
  t.prompt = to_tokens(get<json>(j, "prompt"), v);
  t.response = to_tokens(get<json>(j, "response"), v);
  t.seed = get<std::uint64_t>(j, "seed");
  t.stream_offset = get_or<std::uint64_t>(j, "stream_offset", 0);
  t.base_logprob = get_or<double>(j, "base_logprob", 0.0);
  t.forced_eos = get_or<bool>(j, "forced_eos", false);
  if (j.contains("aligned_logprob") && !j.at("aligned_logprob").is_null()) t.aligned_logprob = j.at("aligned_logprob").get<double>();
  for (const auto& s : get_or<json>(j, "token_steps", json::array()))
    t.token_steps.push_back({get<std::vector<double>>(s, "policy"), v.index_of(get<std::string>(s, "token")), get<double>(s, "aligned_logprob"),
                             get<double>(s, "base_logprob"), get<double>(s, "kl")});
  for (const auto& b : get_or<json>(j, "block_steps", json::array())) {
    BlockStep bs;
    bs.offset = get<std::size_t>(b, "offset");
    for (const auto& c : get<json>(b, "candidates")) bs.candidates.push_back(to_tokens(c, v));
    bs.scores = get<std::vector<double>>(b, "scores");
    bs.chosen = get<std::size_t>(b, "chosen");
    t.block_steps.push_back(std::move(bs));
  }
  return t;
}

// ---------------------------------------------------------------------------
// Sweep configuration
//   {model, scorer?, reward, prompts?: [[syms]], prompt_weights?, lambdas?, block_ks?, block_ms?,
//    bok_ks?, include_base?, n, seed, kl_mode?: auto|exact|mc, threads?, record_wall_time?,
//    eval_model? (transfer-eval only)}
// Relative paths resolve against the config file's directory.

struct LoadedSweep {
  SweepPlan plan;
  std::optional<BaseModel> eval_model;
};

inline fs::path resolve(const fs::path& base, const std::string& p) {
  fs::path q(p);
  return q.is_absolute() ? q : base / q;
}

/// Checks every referenced path before anything is parsed or computed.
inline void check_paths(const json& cfg, const fs::path& base) {
  std::vector<fs::path> paths;
  for (const char* key : {"model", "scorer", "eval_model"})
    if (cfg.contains(key) && cfg.at(key).is_string()) paths.push_back(resolve(base, cfg.at(key).get<std::string>()));
  if (cfg.contains("reward") && cfg.at("reward").is_string()) paths.push_back(resolve(base, cfg.at("reward").get<std::string>()));
  for (const auto& p : paths) {
    std::ifstream in(p);
    if (!in) throw ValidationError("sweep config: cannot read " + p.string());
  }
}

inline LoadedSweep load_sweep(const json& cfg, const fs::path& base_dir) {
  if (!cfg.is_object()) throw ValidationError("sweep config must be a JSON object");
  check_paths(cfg, base_dir);
  BaseModel model = cfg.at("model").is_string() ? load_model(resolve(base_dir, cfg.at("model").get<std::string>())) : model_from_json(cfg.at("model"));
  const Vocab& v = model.vocab();

  const json& rj = get<json>(cfg, "reward");
  RewardFn reward = rj.is_string() ? reward_from_json(read_json(resolve(base_dir, rj.get<std::string>())), v, base_dir) : reward_from_json(rj, v, base_dir);

  std::shared_ptr<const PrefixScorer> scorer;
  if (cfg.contains("scorer") && !cfg.at("scorer").is_null()) {
    const json& sj = cfg.at("scorer");
    scorer = std::make_shared<const PrefixScorer>(sj.is_string() ? load_scorer(resolve(base_dir, sj.get<std::string>()), v) : scorer_from_json(sj, v));
  }

  PromptSet prompts;
  if (cfg.contains("prompts")) {
    std::vector<Sequence> ps;
    for (const auto& p : cfg.at("prompts")) ps.push_back(to_tokens(p, v));
    prompts = PromptSet(std::move(ps), get_or<std::vector<double>>(cfg, "prompt_weights", {}));
  }

  SweepPlan plan{std::move(model), scorer, std::move(reward), std::move(prompts), {}, {}, {}, {}};
  plan.lambdas = get_or<std::vector<double>>(cfg, "lambdas", {});
  plan.block_ks = get_or<std::vector<int>>(cfg, "block_ks", {});
  plan.block_ms = get_or<std::vector<int>>(cfg, "block_ms", {});
  plan.bok_ks = get_or<std::vector<int>>(cfg, "bok_ks", {});
  plan.include_base = get_or<bool>(cfg, "include_base", false);
  plan.n = get_or<std::size_t>(cfg, "n", 1000);
  plan.seed = get_or<std::uint64_t>(cfg, "seed", 0);
  plan.threads = get_or<unsigned>(cfg, "threads", 1);
  plan.record_wall_time = get_or<bool>(cfg, "record_wall_time", false);
  const auto mode = get_or<std::string>(cfg, "kl_mode", "auto");
  if (mode == "auto") plan.kl_policy = KlPolicy::Auto;
  else if (mode == "exact") plan.kl_policy = KlPolicy::Exact;
  else if (mode == "mc") plan.kl_policy = KlPolicy::MonteCarlo;
  else throw ValidationError("sweep config: kl_mode must be auto, exact or mc");

  LoadedSweep out{std::move(plan), std::nullopt};
  if (cfg.contains("eval_model")) {
    const json& ej = cfg.at("eval_model");
    out.eval_model = ej.is_string() ? load_model(resolve(base_dir, ej.get<std::string>())) : model_from_json(ej);
  }
  out.plan.validate();
  return out;
}

inline LoadedSweep load_sweep_file(const fs::path& p) {
  json cfg = read_json(p);
  return load_sweep(cfg, p.parent_path());
}

inline json metadata_to_json(const std::map<std::string, std::string>& meta) { return json(meta); }

/// Writes `<out>` (CSV) and `<out>.meta.json`.
inline void write_sweep(const SweepResult& res, const fs::path& out) {
  write_text(out, to_csv(res.rows));
  write_text(fs::path(out.string() + ".meta.json"), metadata_to_json(res.metadata).dump(2) + "\n");
}

}  // namespace ctrldec::io
