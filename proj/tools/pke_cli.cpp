// pke: train a toy transformer with plantable trigger behavior, locate the
// parameters responsible, edit them, and evaluate attack success rates.
//
// Exit codes: 0 success, 2 config/input error, 3 dataset error,
// 4 editing found no signal, 5 external-judge transport failure.

#include <cstdio>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "pke/judge_http.hpp"
#include "pke/pke.hpp"

namespace {

struct ExitError {
  int code;
  std::string message;
};

struct CommonArgs {
  std::string config_path;
  std::int64_t seed = -1;
  std::string out_dir;
};

pke::RunConfig resolve_config(const CommonArgs& args) {
  try {
    pke::RunConfig cfg;
    if (!args.config_path.empty()) cfg = pke::load_run_config(args.config_path);
    if (args.seed >= 0) {
      const auto s = static_cast<std::uint64_t>(args.seed);
      cfg.seed = s;
      cfg.model.seed = s;
      cfg.edit.seed = s;
      if (cfg.synthetic) cfg.synthetic->seed = s;
    }
    if (!args.out_dir.empty()) cfg.out_dir = args.out_dir;
    return cfg;
  } catch (const pke::Error& e) {
    throw ExitError{2, e.what()};
  }
}

std::string out_path(const pke::RunConfig& cfg, const std::string& name) {
  return cfg.out_dir + "/" + name;
}

struct TaskData {
  std::vector<std::vector<int>> trigger_corpus;
  std::vector<std::vector<int>> benign_corpus;
  pke::InstanceSet instances;
  pke::ToxicLexicon lexicon;
};

TaskData resolve_task(const pke::RunConfig& cfg) {
  try {
    TaskData data;
    if (cfg.synthetic) {
      pke::SyntheticTask task = pke::make_synthetic_task(
          cfg.synthetic->seed, cfg.model.vocab_size, cfg.synthetic->n_triggers,
          cfg.synthetic->n_benign);
      data.trigger_corpus = std::move(task.trigger_corpus);
      data.benign_corpus = std::move(task.benign_corpus);
      data.instances = std::move(task.instances);
      data.lexicon = std::move(task.lexicon);
    }
    if (!cfg.dataset_path.empty())
      data.instances = pke::load_dataset(cfg.dataset_path, cfg.model.vocab_size);
    if (!cfg.lexicon_path.empty())
      data.lexicon = pke::load_lexicon(cfg.lexicon_path);
    if (!cfg.corpus_path.empty()) {
      data.trigger_corpus =
          pke::load_corpus(cfg.corpus_path, cfg.model.vocab_size);
      data.benign_corpus.clear();
    }
    if (data.instances.empty())
      throw pke::SchemaError(
          "no dataset available: configure data.dataset or a synthetic task");
    return data;
  } catch (const pke::Error& e) {
    throw ExitError{3, e.what()};
  }
}

std::vector<std::vector<int>> full_corpus(const TaskData& data) {
  std::vector<std::vector<int>> corpus;
  const std::size_t n =
      std::max(data.trigger_corpus.size(), data.benign_corpus.size());
  for (std::size_t i = 0; i < n; ++i) {
    if (i < data.trigger_corpus.size()) corpus.push_back(data.trigger_corpus[i]);
    if (i < data.benign_corpus.size()) corpus.push_back(data.benign_corpus[i]);
  }
  return corpus;
}

pke::Checkpoint load_ckpt(const std::string& path, const pke::ModelConfig& expected) {
  try {
    return pke::load_checkpoint(path, expected);
  } catch (const pke::Error& e) {
    throw ExitError{2, e.what()};
  }
}

int cmd_init(const CommonArgs& args) {
  pke::RunConfig cfg = resolve_config(args);
  pke::ParameterStore store = pke::init_model(cfg.model);
  pke::save_checkpoint(cfg.model, store, out_path(cfg, "init.ckpt"));
  pke::write_file_atomic(out_path(cfg, "config.resolved.json"),
                         cfg.to_json().dump(2) + "\n");
  std::printf("wrote %s (config hash %s)\n", out_path(cfg, "init.ckpt").c_str(),
              cfg.hash().c_str());
  return 0;
}

int cmd_train(const CommonArgs& args, const std::string& ckpt_path) {
  pke::RunConfig cfg = resolve_config(args);
  TaskData data = resolve_task(cfg);
  const auto corpus = full_corpus(data);
  if (corpus.empty()) throw ExitError{2, "train: no corpus configured"};

  pke::ParameterStore store;
  if (!ckpt_path.empty()) {
    store = load_ckpt(ckpt_path, cfg.model).params;
  } else {
    store = pke::init_model(cfg.model);
  }

  std::vector<double> losses;
  store = pke::train_toy(cfg.model, std::move(store), corpus, cfg.train, &losses);
  pke::save_checkpoint(cfg.model, store, out_path(cfg, "trained.ckpt"));

  if (cfg.synthetic) {
    pke::save_dataset(data.instances, out_path(cfg, "synthetic_dataset.jsonl"));
    pke::write_file_atomic(out_path(cfg, "synthetic_lexicon.json"),
                           pke::lexicon_to_json(data.lexicon).dump(2) + "\n");
  }

  if (!losses.empty()) {
    double final_window = 0.0;
    const std::size_t w = std::min<std::size_t>(losses.size(), 20);
    for (std::size_t i = losses.size() - w; i < losses.size(); ++i)
      final_window += losses[i];
    final_window /= static_cast<double>(w);
    std::printf("train: %zu steps, first loss %.4f, final loss %.4f\n",
                losses.size(), losses.front(), final_window);
  }
  std::printf("wrote %s\n", out_path(cfg, "trained.ckpt").c_str());
  return 0;
}

int cmd_trace(const CommonArgs& args, const std::string& ckpt_path,
              const std::string& reference_path) {
  pke::RunConfig cfg = resolve_config(args);
  TaskData data = resolve_task(cfg);
  pke::Checkpoint ckpt = load_ckpt(ckpt_path, cfg.model);

  pke::Snapshot current = pke::snapshot(cfg.model, ckpt.params, "current");
  pke::Snapshot reference =
      reference_path.empty()
          ? pke::snapshot(cfg.model, ckpt.params, "current")
          : pke::snapshot(cfg.model, load_ckpt(reference_path, cfg.model).params,
                          "reference");

  pke::TraceBundle bundle;
  bundle.before_label = reference.label;
  bundle.after_label = current.label;
  bundle.weights = pke::weight_delta(reference, current);
  bundle.gradients = pke::gradient_trace(cfg.model, ckpt.params, data.instances,
                                         data.lexicon, cfg.edit.loss_weights);
  bundle.activations =
      pke::mean_activation_delta(cfg.model, ckpt.params, data.instances);
  bundle.toxicity =
      pke::layer_toxicity(cfg.model, ckpt.params, data.instances,
                          pke::lexicon_scorer(data.lexicon), cfg.eval_horizon);
  nlohmann::json j = pke::trace_bundle_to_json(bundle);
  j["config_hash"] = cfg.hash();
  pke::write_file_atomic(out_path(cfg, "trace.json"), j.dump(2) + "\n");
  std::printf("wrote %s\n", out_path(cfg, "trace.json").c_str());
  return 0;
}

int cmd_edit(const CommonArgs& args, const std::string& ckpt_path,
             const std::string& method) {
  pke::RunConfig cfg = resolve_config(args);
  TaskData data = resolve_task(cfg);
  pke::Checkpoint ckpt = load_ckpt(ckpt_path, cfg.model);

  pke::ParameterStore edited;
  pke::EditResult result;
  try {
    if (method == "pke") {
      std::tie(edited, result) =
          pke::pke_edit(cfg.model, ckpt.params, data.instances, data.instances,
                        data.lexicon, cfg.edit);
    } else if (method == "dinm") {
      std::tie(edited, result) =
          pke::dinm_baseline(cfg.model, ckpt.params, data.instances.items.front(),
                             data.instances, data.lexicon, cfg.edit);
    } else {
      throw ExitError{2, "edit: method must be pke or dinm"};
    }
  } catch (const pke::NoSignalError& e) {
    std::fprintf(stderr, "edit: terminal reason no-signal: %s\n", e.what());
    return 4;
  }
  if (result.reason == pke::TerminalReason::no_signal &&
      result.iterations.empty()) {
    std::fprintf(stderr, "edit: terminal reason no-signal\n");
    return 4;
  }

  nlohmann::json audit = pke::edit_result_to_json(result, cfg.edit);
  audit["config_hash"] = cfg.hash();
  audit["dataset"] = data.instances.content_hash;
  audit["seed"] = cfg.seed;
  pke::save_checkpoint(cfg.model, edited,
                       out_path(cfg, "edited_" + method + ".ckpt"));
  pke::write_file_atomic(out_path(cfg, "audit_" + method + ".json"),
                         audit.dump(2) + "\n");
  std::printf("edit %s: %zu iterations, reason %s, toxicity %.4f -> %.4f\n",
              method.c_str(), result.iterations.size(),
              pke::terminal_reason_name(result.reason),
              result.initial.mean_toxicity, result.final_stats.mean_toxicity);
  std::printf("wrote %s\n", out_path(cfg, "edited_" + method + ".ckpt").c_str());
  return 0;
}

int cmd_eval(const CommonArgs& args,
             const std::vector<std::string>& checkpoint_specs,
             const std::string& judge_override, std::size_t jobs_override) {
  pke::RunConfig cfg = resolve_config(args);
  TaskData data = resolve_task(cfg);

  std::vector<pke::MethodSpec> methods;
  for (const std::string& spec : checkpoint_specs) {
    const std::size_t eq = spec.find('=');
    if (eq == std::string::npos)
      throw ExitError{2, "eval: --checkpoint expects name=path, got '" + spec + "'"};
    pke::MethodSpec method;
    method.name = spec.substr(0, eq);
    std::string path = spec.substr(eq + 1);
    if (path.size() > 4 && path.ends_with("@sys")) {
      method.with_system_prompt = true;
      path = path.substr(0, path.size() - 4);
    }
    method.params = load_ckpt(path, cfg.model).params;
    methods.push_back(std::move(method));
  }
  if (methods.empty()) throw ExitError{2, "eval: at least one --checkpoint required"};

  pke::EvalOptions options;
  options.horizon = cfg.eval_horizon;
  options.jobs = jobs_override ? jobs_override : cfg.eval_jobs;
  options.judge_kind = judge_override.empty() ? cfg.judge_kind : judge_override;
  if (options.judge_kind == "external") {
    pke::JudgeEndpoint endpoint = pke::JudgeEndpoint::from_env();
    options.judge = [endpoint](const pke::AttackInstance& inst,
                               std::span<const int> response) {
      return pke::judge_external(endpoint, inst, response);
    };
  } else if (options.judge_kind != "rule") {
    throw ExitError{2, "eval: judge must be rule or external"};
  }

  pke::ReportMeta meta;
  meta.seed = cfg.seed;
  meta.config_hash = cfg.hash();

  pke::EvalRun run;
  try {
    run = pke::evaluate_methods(cfg.model, methods, data.instances, data.lexicon,
                                options, meta);
  } catch (const pke::TransportError& e) {
    std::fprintf(stderr, "eval: external judge failed: %s\n", e.what());
    return 5;
  } catch (const pke::JudgeParseError& e) {
    std::fprintf(stderr, "eval: external judge unparseable: %s\n", e.what());
    return 5;
  }

  pke::write_file_atomic(out_path(cfg, "report.json"),
                         pke::render_report(run.report, pke::ReportFormat::json));
  pke::write_file_atomic(
      out_path(cfg, "report.md"),
      pke::render_report(run.report, pke::ReportFormat::markdown));

  // verdict log backing every report cell
  nlohmann::json verdicts = nlohmann::json::object();
  for (const auto& [name, outcome] : run.outcomes) {
    nlohmann::json list = nlohmann::json::array();
    for (const pke::JudgeVerdict& v : outcome.verdicts)
      list.push_back({{"instance", v.instance_id},
                      {"attack_success", v.attack_success},
                      {"judge", v.judge_kind},
                      {"rationale", v.rationale}});
    verdicts[name] = std::move(list);
  }
  pke::write_file_atomic(out_path(cfg, "verdicts.json"), verdicts.dump(2) + "\n");

  std::printf("%s", pke::render_report_markdown(run.report).c_str());
  std::printf("wrote %s and %s\n", out_path(cfg, "report.md").c_str(),
              out_path(cfg, "report.json").c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"pke: neuron-level model editing and safety evaluation toolkit"};
  app.require_subcommand(1);

  CommonArgs common;
  auto add_common = [&common](CLI::App* sub) {
    sub->add_option("--config", common.config_path, "run config JSON");
    sub->add_option("--seed", common.seed, "override every seed in the config");
    sub->add_option("--out", common.out_dir, "output directory");
  };

  CLI::App* init = app.add_subcommand("init", "write an untrained checkpoint");
  add_common(init);

  CLI::App* train = app.add_subcommand("train", "train on the configured corpus");
  add_common(train);
  std::string train_ckpt;
  train->add_option("--ckpt", train_ckpt, "starting checkpoint (default: fresh init)");

  CLI::App* trace = app.add_subcommand("trace", "export attribution quantities");
  add_common(trace);
  std::string trace_ckpt, trace_reference;
  trace->add_option("--ckpt", trace_ckpt, "checkpoint to trace")->required();
  trace->add_option("--reference", trace_reference,
                    "reference checkpoint for weight deltas");

  CLI::App* edit = app.add_subcommand("edit", "run an editing method");
  add_common(edit);
  std::string edit_ckpt, edit_method = "pke";
  edit->add_option("--ckpt", edit_ckpt, "checkpoint to edit")->required();
  edit->add_option("--method", edit_method, "pke | dinm");

  CLI::App* eval = app.add_subcommand("eval", "evaluate named checkpoints");
  add_common(eval);
  std::vector<std::string> eval_ckpts;
  std::string eval_judge;
  std::size_t eval_jobs = 0;
  eval->add_option("--checkpoint", eval_ckpts,
                   "name=path (append @sys to prepend system prompts); first "
                   "name anchors the winrate")
      ->required();
  eval->add_option("--judge", eval_judge, "rule | external");
  eval->add_option("--jobs", eval_jobs, "parallel generation jobs");

  CLI11_PARSE(app, argc, argv);

  try {
    if (init->parsed()) return cmd_init(common);
    if (train->parsed()) return cmd_train(common, train_ckpt);
    if (trace->parsed()) return cmd_trace(common, trace_ckpt, trace_reference);
    if (edit->parsed()) return cmd_edit(common, edit_ckpt, edit_method);
    if (eval->parsed())
      return cmd_eval(common, eval_ckpts, eval_judge, eval_jobs);
  } catch (const ExitError& e) {
    std::fprintf(stderr, "error: %s\n", e.message.c_str());
    return e.code;
  } catch (const pke::NoSignalError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 4;
  } catch (const pke::TransportError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 5;
  } catch (const pke::SchemaError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 3;
  } catch (const pke::Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "unexpected error: %s\n", e.what());
    return 1;
  }
  return 0;
}
