#pragma once

#include <optional>
#include <string>

#include <json.hpp>

#include "pke/checkpoint.hpp"
#include "pke/editor.hpp"
#include "pke/model.hpp"

namespace pke {

/// Synthetic-task generation knobs; the vocab always matches the model's.
struct SyntheticConfig {
  std::size_t n_triggers = 6;
  std::size_t n_benign = 8;
  std::uint64_t seed = 0;
};

/// Everything a run needs, loadable from one JSON file with flag overrides.
/// The resolved form is echoed into every artifact via hash().
struct RunConfig {
  std::uint64_t seed = 7;
  std::string out_dir = "out";

  ModelConfig model;
  EditConfig edit;
  TrainOptions train;

  std::optional<SyntheticConfig> synthetic = SyntheticConfig{};
  std::string dataset_path;  // overrides synthetic instances when set
  std::string lexicon_path;  // overrides synthetic lexicon when set
  std::string corpus_path;   // JSONL of token arrays; overrides synthetic corpus

  std::size_t eval_horizon = 8;
  std::size_t eval_jobs = 1;
  std::string judge_kind = "rule";  // "rule" | "external"

  nlohmann::json to_json() const {
    nlohmann::json j{
        {"seed", seed},
        {"out_dir", out_dir},
        {"model", config_to_json(model)},
        {"edit",
         {{"eta", edit.eta},
          {"max_iterations", edit.max_iterations},
          {"toxicity_threshold", edit.toxicity_threshold},
          {"neurons_per_iteration", edit.neurons_per_iteration},
          {"use_layer_toxicity_tiebreak", edit.use_layer_toxicity_tiebreak},
          {"dinm_inner_steps", edit.dinm_inner_steps},
          {"eval_horizon", edit.eval_horizon},
          {"seed", edit.seed}}},
        {"loss", {{"alpha", edit.loss_weights.alpha}, {"beta", edit.loss_weights.beta}}},
        {"train",
         {{"steps", train.steps}, {"lr", train.lr}, {"clip_norm", train.clip_norm}}},
        {"data",
         {{"dataset", dataset_path}, {"lexicon", lexicon_path}, {"corpus", corpus_path}}},
        {"eval",
         {{"horizon", eval_horizon}, {"jobs", eval_jobs}, {"judge", judge_kind}}}};
    if (synthetic) {
      j["synthetic"] = {{"n_triggers", synthetic->n_triggers},
                        {"n_benign", synthetic->n_benign},
                        {"seed", synthetic->seed}};
    }
    return j;
  }

  std::string hash() const { return to_hex(fnv1a64(to_json().dump())); }
};

namespace detail {
template <class T>
void maybe_get(const nlohmann::json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}
}  // namespace detail

inline RunConfig run_config_from_json(const nlohmann::json& j) {
  RunConfig cfg;
  try {
    detail::maybe_get(j, "seed", cfg.seed);
    detail::maybe_get(j, "out_dir", cfg.out_dir);

    cfg.model.seed = cfg.seed;
    if (j.contains("model")) {
      const auto& m = j.at("model");
      detail::maybe_get(m, "vocab_size", cfg.model.vocab_size);
      detail::maybe_get(m, "d_model", cfg.model.d_model);
      detail::maybe_get(m, "n_layers", cfg.model.n_layers);
      detail::maybe_get(m, "n_heads", cfg.model.n_heads);
      detail::maybe_get(m, "d_ff", cfg.model.d_ff);
      detail::maybe_get(m, "max_seq", cfg.model.max_seq);
      detail::maybe_get(m, "seed", cfg.model.seed);
    }

    cfg.edit.seed = cfg.seed;
    if (j.contains("edit")) {
      const auto& e = j.at("edit");
      detail::maybe_get(e, "eta", cfg.edit.eta);
      detail::maybe_get(e, "max_iterations", cfg.edit.max_iterations);
      detail::maybe_get(e, "toxicity_threshold", cfg.edit.toxicity_threshold);
      detail::maybe_get(e, "neurons_per_iteration", cfg.edit.neurons_per_iteration);
      detail::maybe_get(e, "use_layer_toxicity_tiebreak",
                        cfg.edit.use_layer_toxicity_tiebreak);
      detail::maybe_get(e, "dinm_inner_steps", cfg.edit.dinm_inner_steps);
      detail::maybe_get(e, "eval_horizon", cfg.edit.eval_horizon);
      detail::maybe_get(e, "seed", cfg.edit.seed);
    }
    if (j.contains("loss")) {
      detail::maybe_get(j.at("loss"), "alpha", cfg.edit.loss_weights.alpha);
      detail::maybe_get(j.at("loss"), "beta", cfg.edit.loss_weights.beta);
    }
    if (j.contains("train")) {
      detail::maybe_get(j.at("train"), "steps", cfg.train.steps);
      detail::maybe_get(j.at("train"), "lr", cfg.train.lr);
      detail::maybe_get(j.at("train"), "clip_norm", cfg.train.clip_norm);
    }
    if (j.contains("synthetic")) {
      if (j.at("synthetic").is_null()) {
        cfg.synthetic.reset();
      } else {
        SyntheticConfig s;
        s.seed = cfg.seed;
        detail::maybe_get(j.at("synthetic"), "n_triggers", s.n_triggers);
        detail::maybe_get(j.at("synthetic"), "n_benign", s.n_benign);
        detail::maybe_get(j.at("synthetic"), "seed", s.seed);
        cfg.synthetic = s;
      }
    } else if (cfg.synthetic) {
      cfg.synthetic->seed = cfg.seed;
    }
    if (j.contains("data")) {
      detail::maybe_get(j.at("data"), "dataset", cfg.dataset_path);
      detail::maybe_get(j.at("data"), "lexicon", cfg.lexicon_path);
      detail::maybe_get(j.at("data"), "corpus", cfg.corpus_path);
    }
    if (j.contains("eval")) {
      detail::maybe_get(j.at("eval"), "horizon", cfg.eval_horizon);
      detail::maybe_get(j.at("eval"), "jobs", cfg.eval_jobs);
      detail::maybe_get(j.at("eval"), "judge", cfg.judge_kind);
    }
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError(std::string("config: ") + e.what());
  }
  cfg.model.validate();
  cfg.edit.validate();
  if (cfg.judge_kind != "rule" && cfg.judge_kind != "external")
    throw SchemaError("config: eval.judge must be 'rule' or 'external'");
  return cfg;
}

inline RunConfig load_run_config(const std::string& path) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_file(path));
  } catch (const nlohmann::json::exception& e) {
    // e.what() carries the byte offset; recover a line number for the message
    std::string msg = e.what();
    throw SchemaError("config " + path + ": parse error: " + msg);
  }
  return run_config_from_json(j);
}

/// Token-array corpus: JSONL, each line an array of ints.
inline std::vector<std::vector<int>> load_corpus(const std::string& path,
                                                 std::size_t vocab_size) {
  const std::string content = read_file(path);
  std::istringstream ss(content);
  std::string line;
  std::vector<std::vector<int>> corpus;
  std::size_t line_no = 0;
  while (std::getline(ss, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto seq = nlohmann::json::parse(line).get<std::vector<int>>();
      for (int t : seq)
        if (t < 0 || static_cast<std::size_t>(t) >= vocab_size)
          throw SchemaError("token id out of range");
      corpus.push_back(seq);
    } catch (const std::exception& e) {
      throw SchemaError("corpus " + path + ":" + std::to_string(line_no) + ": " +
                        e.what());
    }
  }
  if (corpus.empty()) throw SchemaError("corpus " + path + ": empty");
  return corpus;
}

}  // namespace pke
