#pragma once

#include <cmath>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "pke/tracer.hpp"

namespace pke {

struct EditConfig {
  double eta = 0.5;  // edit learning rate
  LossWeights loss_weights;
  std::size_t max_iterations = 20;
  double toxicity_threshold = 0.05;
  std::size_t neurons_per_iteration = 1;
  bool use_layer_toxicity_tiebreak = false;
  std::size_t dinm_inner_steps = 10;
  std::size_t eval_horizon = 8;
  std::uint64_t seed = 0;

  void validate() const {
    if (eta <= 0.0) throw ValueError("edit config: eta must be positive");
    if (max_iterations == 0)
      throw ValueError("edit config: max_iterations must be at least 1");
    if (toxicity_threshold < 0.0 || toxicity_threshold > 1.0)
      throw ValueError("edit config: toxicity_threshold must lie in [0,1]");
    if (neurons_per_iteration == 0)
      throw ValueError("edit config: neurons_per_iteration must be at least 1");
    loss_weights.validate_for_edit();
  }
};

/// argmax_l of the gradient trace; ties resolve to the lowest layer. The
/// optional toxicity profile only breaks exact ties. All-zero signals would
/// make editing blind, so they are an error.
inline std::size_t select_layer(const GradientTrace& trace,
                                const LayerToxicityProfile* tiebreak = nullptr) {
  const std::vector<double>& g = trace.norms.per_layer;
  if (g.empty()) throw ContractError("select_layer: empty trace");
  bool any_nonzero = false;
  std::size_t best = 0;
  for (std::size_t l = 0; l < g.size(); ++l) {
    if (g[l] > 0.0) any_nonzero = true;
    if (g[l] > g[best]) best = l;
  }
  if (!any_nonzero)
    throw NoSignalError("select_layer: all per-layer gradient norms are zero");
  if (tiebreak && tiebreak->mean_toxicity.size() == g.size()) {
    for (std::size_t l = 0; l < g.size(); ++l)
      if (g[l] == g[best] &&
          tiebreak->mean_toxicity[l] > tiebreak->mean_toxicity[best])
        best = l;
  }
  return best;
}

/// argmax_j of the activation delta in a layer; ties resolve to the lowest
/// neuron. An all-zero row selects neuron 0 and sets the warning flag.
inline std::size_t select_neuron(const ActivationDelta& delta, std::size_t layer,
                                 bool* zero_signal_warning = nullptr) {
  if (layer >= delta.per_neuron.size())
    throw ContractError("select_neuron: layer " + std::to_string(layer) +
                        " absent from activation delta");
  const std::vector<double>& row = delta.per_neuron[layer];
  std::size_t best = 0;
  bool any_nonzero = false;
  for (std::size_t j = 0; j < row.size(); ++j) {
    if (row[j] > 0.0) any_nonzero = true;
    if (row[j] > row[best]) best = j;
  }
  if (zero_signal_warning) *zero_signal_warning = !any_nonzero;
  return best;
}

/// Top-k neuron indices by activation delta, descending; ties by index.
inline std::vector<std::size_t> select_neurons(const ActivationDelta& delta,
                                               std::size_t layer, std::size_t k,
                                               bool* zero_signal_warning = nullptr) {
  if (layer >= delta.per_neuron.size())
    throw ContractError("select_neuron: layer " + std::to_string(layer) +
                        " absent from activation delta");
  const std::vector<double>& row = delta.per_neuron[layer];
  std::vector<std::size_t> order(row.size());
  for (std::size_t j = 0; j < order.size(); ++j) order[j] = j;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (row[a] != row[b]) return row[a] > row[b];
    return a < b;
  });
  if (zero_signal_warning)
    *zero_signal_warning = row.empty() || row[order[0]] == 0.0;
  order.resize(std::min(k, order.size()));
  return order;
}

/// One planned row edit: the update vector is eta * dL/d(row j* of mlp.w2),
/// to be subtracted from that row.
struct EditPlan {
  std::size_t layer = 0;
  std::size_t neuron = 0;
  Tensor update;  // shape [d_model]
  double eta_used = 0.0;
  bool zero_gradient = false;
  bool zero_signal_warning = false;
  std::vector<double> layer_evidence;   // gradient norm per layer
  std::vector<double> neuron_evidence;  // activation delta per neuron in layer
};

/// Gradient of the surrogate loss restricted to the selected neuron's
/// write-out row, scaled by eta.
inline EditPlan compute_update(const ModelConfig& cfg, const ParameterStore& store,
                               std::size_t layer, std::size_t neuron,
                               const InstanceSet& instances,
                               const ToxicLexicon& lexicon,
                               const EditConfig& config,
                               double eta_override = -1.0) {
  if (layer >= cfg.n_layers)
    throw ContractError("compute_update: layer out of range");
  if (neuron >= cfg.d_ff)
    throw ContractError("compute_update: neuron out of range");
  const double eta = eta_override > 0.0 ? eta_override : config.eta;

  SurrogateLoss loss =
      build_surrogate_loss(cfg, store, instances, lexicon, config.loss_weights);
  loss.graph.backward(loss.root);
  const std::string w2_name = "layer." + std::to_string(layer) + ".mlp.w2";
  const Tensor& grad = loss.graph.grad_by_name(w2_name);

  EditPlan plan;
  plan.layer = layer;
  plan.neuron = neuron;
  plan.eta_used = eta;
  plan.update = Tensor::zeros({cfg.d_model});
  bool all_zero = true;
  for (std::size_t c = 0; c < cfg.d_model; ++c) {
    const double g = grad.at(neuron, c);
    if (g != 0.0) all_zero = false;
    plan.update.at(c) = eta * g;
  }
  plan.zero_gradient = all_zero;
  return plan;
}

/// Subtracts the planned update from row j* of the selected layer's mlp.w2.
/// Every other coordinate of the returned store is bit-identical.
inline ParameterStore apply_edit(const ParameterStore& store, const EditPlan& plan) {
  const std::string w2_name = "layer." + std::to_string(plan.layer) + ".mlp.w2";
  auto it = store.find(w2_name);
  if (it == store.end())
    throw ShapeError("apply_edit: store has no " + w2_name);
  const Tensor& w2 = it->second;
  if (plan.neuron >= w2.shape()[0] || plan.update.numel() != w2.shape()[1])
    throw ShapeError("apply_edit: plan does not match " + w2_name + " of shape " +
                     w2.shape_str());
  ParameterStore out = store;
  Tensor& target = out[w2_name];
  for (std::size_t c = 0; c < plan.update.numel(); ++c)
    target.at(plan.neuron, c) -= plan.update.at(c);
  return out;
}

enum class TerminalReason { threshold_met, max_iterations, no_improvement, no_signal };

inline const char* terminal_reason_name(TerminalReason r) {
  switch (r) {
    case TerminalReason::threshold_met: return "threshold_met";
    case TerminalReason::max_iterations: return "max_iterations";
    case TerminalReason::no_improvement: return "no_improvement";
    case TerminalReason::no_signal: return "no_signal";
  }
  return "unknown";
}

/// Mean hard toxicity of greedy continuations plus teacher-forced safe
/// correctness over an instance set.
struct EditEvalStats {
  double mean_toxicity = 0.0;
  double mean_safe_nll = 0.0;
  double mean_correctness = 0.0;  // exp(-mean_safe_nll)
};

inline EditEvalStats edit_eval(const ModelConfig& cfg, const ParameterStore& store,
                               const InstanceSet& instances,
                               const ToxicLexicon& lexicon, std::size_t horizon) {
  if (instances.empty()) throw ValueError("edit_eval: empty instance set");
  EditEvalStats stats;
  for (const AttackInstance& inst : instances.items) {
    std::vector<int> full = generate(cfg, store, inst.prompt, horizon);
    std::span<const int> continuation(full.data() + inst.prompt.size(),
                                      full.size() - inst.prompt.size());
    stats.mean_toxicity += score_toxicity(continuation, lexicon);

    ContextPair pair = ContextPair::from_instance(inst);
    std::span<const int> inputs(pair.safe_context.data(),
                                pair.safe_context.size() - 1);
    Tensor logits = forward(cfg, store, inputs);
    Tensor rows = gather_rows(
        logits,
        detail::generated_rows(inst.prompt.size(), pair.safe_context.size()));
    stats.mean_safe_nll += nll_loss(rows, inst.safe_response);
  }
  const double n = static_cast<double>(instances.size());
  stats.mean_toxicity /= n;
  stats.mean_safe_nll /= n;
  stats.mean_correctness = correctness_score(stats.mean_safe_nll);
  return stats;
}

struct EditIteration {
  std::size_t index = 0;
  std::size_t layer = 0;
  std::vector<std::size_t> neurons;  // one entry unless neurons_per_iteration > 1
  double eta_used = 0.0;
  std::size_t halvings = 0;
  double pre_toxicity = 0.0;
  double post_toxicity = 0.0;
  double pre_correctness = 0.0;
  double post_correctness = 0.0;
  double update_norm = 0.0;          // Frobenius norm of the applied update
  std::vector<double> weight_delta_per_layer;
  bool whole_layer = false;          // DINM fine-tunes the full MLP
};

struct EditResult {
  std::vector<EditIteration> iterations;
  TerminalReason reason = TerminalReason::max_iterations;
  std::string before_label = "before";
  std::string after_label = "after";
  EditEvalStats initial;
  EditEvalStats final_stats;
  std::string method;
};

inline nlohmann::json edit_result_to_json(const EditResult& r,
                                          const EditConfig& config) {
  nlohmann::json iterations = nlohmann::json::array();
  for (const EditIteration& it : r.iterations) {
    iterations.push_back({{"iteration", it.index},
                          {"layer", it.layer},
                          {"neurons", it.neurons},
                          {"whole_layer", it.whole_layer},
                          {"eta_used", it.eta_used},
                          {"halvings", it.halvings},
                          {"pre_toxicity", it.pre_toxicity},
                          {"post_toxicity", it.post_toxicity},
                          {"pre_correctness", it.pre_correctness},
                          {"post_correctness", it.post_correctness},
                          {"update_norm", it.update_norm},
                          {"weight_delta_per_layer", it.weight_delta_per_layer}});
  }
  return nlohmann::json{
      {"method", r.method},
      {"terminal_reason", terminal_reason_name(r.reason)},
      {"snapshots", {{"before", r.before_label}, {"after", r.after_label}}},
      {"initial",
       {{"toxicity", r.initial.mean_toxicity},
        {"correctness", r.initial.mean_correctness}}},
      {"final",
       {{"toxicity", r.final_stats.mean_toxicity},
        {"correctness", r.final_stats.mean_correctness}}},
      {"config",
       {{"eta", config.eta},
        {"alpha", config.loss_weights.alpha},
        {"beta", config.loss_weights.beta},
        {"max_iterations", config.max_iterations},
        {"toxicity_threshold", config.toxicity_threshold},
        {"neurons_per_iteration", config.neurons_per_iteration},
        {"eval_horizon", config.eval_horizon},
        {"seed", config.seed}}},
      {"iterations", iterations}};
}

/// The full iterative edit loop: rank layers by gradient norm, rank neurons
/// by harm/safe activation gap, apply the row update, and keep an iteration
/// only if mean eval toxicity strictly decreased (halving eta up to 5 times
/// otherwise). Stops at the toxicity threshold or the iteration cap.
inline std::pair<ParameterStore, EditResult> pke_edit(
    const ModelConfig& cfg, const ParameterStore& store,
    const InstanceSet& edit_instances, const InstanceSet& eval_instances,
    const ToxicLexicon& lexicon, const EditConfig& config) {
  config.validate();
  if (edit_instances.empty() || eval_instances.empty())
    throw ValueError("pke_edit: instance sets must be nonempty");

  ParameterStore params = store;
  EditResult result;
  result.method = "pke";
  Snapshot before = snapshot(cfg, params, result.before_label);

  EditEvalStats current =
      edit_eval(cfg, params, eval_instances, lexicon, config.eval_horizon);
  result.initial = current;
  result.reason = TerminalReason::max_iterations;

  if (current.mean_toxicity <= config.toxicity_threshold) {
    result.reason = TerminalReason::threshold_met;
    result.final_stats = current;
    return {params, result};
  }

  // Editing row j* leaves the layer's own activations (and so its delta
  // ranking) untouched. When the top neuron's update is rejected at every
  // eta, re-running the selection would pick it again forever, so rejected
  // neurons sit out until an edit lands and reshapes the landscape.
  std::set<std::pair<std::size_t, std::size_t>> rejected;
  std::size_t accepted_count = 0;
  while (accepted_count < config.max_iterations) {
    GradientTrace trace;
    std::size_t layer = 0;
    try {
      trace = gradient_trace(cfg, params, edit_instances, lexicon,
                             config.loss_weights);
      if (config.use_layer_toxicity_tiebreak) {
        LayerToxicityProfile profile =
            layer_toxicity(cfg, params, edit_instances, lexicon_scorer(lexicon),
                           config.eval_horizon);
        layer = select_layer(trace, &profile);
      } else {
        layer = select_layer(trace);
      }
    } catch (const NoSignalError&) {
      result.reason = TerminalReason::no_signal;
      break;
    }

    ActivationDelta delta = mean_activation_delta(cfg, params, edit_instances);
    bool zero_warn = false;
    std::vector<std::size_t> ranking =
        select_neurons(delta, layer, cfg.d_ff, &zero_warn);
    std::vector<std::size_t> neurons;
    for (std::size_t j : ranking) {
      if (rejected.count({layer, j})) continue;
      neurons.push_back(j);
      if (neurons.size() == config.neurons_per_iteration) break;
    }
    if (neurons.empty()) {
      result.reason = TerminalReason::no_improvement;
      break;
    }

    // The update is linear in eta, so the gradient is computed once per
    // iteration and rescaled across halving attempts.
    std::vector<EditPlan> base_plans;
    bool all_zero = true;
    for (std::size_t j : neurons) {
      EditPlan plan = compute_update(cfg, params, layer, j, edit_instances,
                                     lexicon, config, config.eta);
      plan.zero_signal_warning = zero_warn;
      plan.layer_evidence = trace.norms.per_layer;
      plan.neuron_evidence = delta.per_neuron[layer];
      if (!plan.zero_gradient) all_zero = false;
      base_plans.push_back(std::move(plan));
    }
    if (all_zero) {
      for (std::size_t j : neurons) rejected.insert({layer, j});
      continue;
    }

    bool accepted = false;
    Snapshot iter_before = snapshot(cfg, params, "iter");
    for (std::size_t attempt = 0; attempt <= 5; ++attempt) {
      const double factor = 1.0 / static_cast<double>(1ull << attempt);
      const double eta = config.eta * factor;
      ParameterStore candidate = params;
      double update_norm_sq = 0.0;
      for (const EditPlan& base : base_plans) {
        EditPlan plan = base;
        plan.update = scale(base.update, factor);
        plan.eta_used = eta;
        const double nrm = frobenius_norm(plan.update);
        update_norm_sq += nrm * nrm;
        candidate = apply_edit(candidate, plan);
      }

      EditEvalStats cand_stats =
          edit_eval(cfg, candidate, eval_instances, lexicon, config.eval_horizon);
      if (cand_stats.mean_toxicity < current.mean_toxicity) {
        EditIteration record;
        record.index = result.iterations.size();
        record.layer = layer;
        record.neurons = neurons;
        record.eta_used = eta;
        record.halvings = attempt;
        record.pre_toxicity = current.mean_toxicity;
        record.post_toxicity = cand_stats.mean_toxicity;
        record.pre_correctness = current.mean_correctness;
        record.post_correctness = cand_stats.mean_correctness;
        record.update_norm = std::sqrt(update_norm_sq);
        params = std::move(candidate);
        Snapshot iter_after = snapshot(cfg, params, "iter");
        record.weight_delta_per_layer =
            weight_delta(iter_before, iter_after).per_layer;
        result.iterations.push_back(std::move(record));
        current = cand_stats;
        accepted = true;
        break;
      }
    }
    if (!accepted) {
      for (std::size_t j : neurons) rejected.insert({layer, j});
      continue;
    }
    ++accepted_count;
    rejected.clear();  // an accepted edit changes the landscape
    if (current.mean_toxicity <= config.toxicity_threshold) {
      result.reason = TerminalReason::threshold_met;
      break;
    }
  }

  result.final_stats = current;
  return {params, result};
}

/// Baseline in the DINM style: rank layers by the L2 gap between the harmful
/// and safe residual streams of one instance, then fine-tune that single
/// layer's full MLP on the custom loss. Zero gap everywhere is an error: the
/// signal this method relies on is absent.
inline std::pair<ParameterStore, EditResult> dinm_baseline(
    const ModelConfig& cfg, const ParameterStore& store,
    const AttackInstance& instance, const InstanceSet& eval_instances,
    const ToxicLexicon& lexicon, const EditConfig& config) {
  config.validate();
  if (eval_instances.empty())
    throw ValueError("dinm_baseline: eval instance set must be nonempty");

  const ContextPair pair = ContextPair::from_instance(instance);
  ForwardRecord harm = forward_record(cfg, store, pair.harmful_context);
  ForwardRecord safe = forward_record(cfg, store, pair.safe_context);

  auto mean_rows = [&](const Tensor& t) {
    std::vector<double> m(cfg.d_model, 0.0);
    for (std::size_t p = 0; p < t.shape()[0]; ++p)
      for (std::size_t j = 0; j < cfg.d_model; ++j) m[j] += t.at(p, j);
    for (double& v : m) v /= static_cast<double>(t.shape()[0]);
    return m;
  };

  std::size_t best_layer = 0;
  double best_gap = 0.0;
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    const auto h = mean_rows(harm.hidden_per_layer[l]);
    const auto s = mean_rows(safe.hidden_per_layer[l]);
    double gap_sq = 0.0;
    for (std::size_t j = 0; j < cfg.d_model; ++j) {
      const double d = h[j] - s[j];
      gap_sq += d * d;
    }
    const double gap = std::sqrt(gap_sq);
    if (gap > best_gap) {
      best_gap = gap;
      best_layer = l;
    }
  }
  if (best_gap == 0.0)
    throw NoSignalError(
        "dinm_baseline: harmful/safe residual gap is zero in every layer");

  ParameterStore params = store;
  EditResult result;
  result.method = "dinm";
  result.initial =
      edit_eval(cfg, params, eval_instances, lexicon, config.eval_horizon);

  InstanceSet single;
  single.items.push_back(instance);
  single.content_hash = "dinm:" + instance.id;

  Snapshot before = snapshot(cfg, params, "iter");
  const std::string w1_name = "layer." + std::to_string(best_layer) + ".mlp.w1";
  const std::string w2_name = "layer." + std::to_string(best_layer) + ".mlp.w2";
  for (std::size_t step = 0; step < config.dinm_inner_steps; ++step) {
    SurrogateLoss loss =
        build_surrogate_loss(cfg, params, single, lexicon, config.loss_weights);
    loss.graph.backward(loss.root);
    for (const std::string& name : {w1_name, w2_name}) {
      const Tensor& grad = loss.graph.grad_by_name(name);
      Tensor& target = params[name];
      for (std::size_t i = 0; i < target.numel(); ++i)
        target.at(i) -= config.eta * grad.at(i);
    }
  }
  Snapshot after = snapshot(cfg, params, "iter");

  EditEvalStats post =
      edit_eval(cfg, params, eval_instances, lexicon, config.eval_horizon);

  EditIteration record;
  record.index = 0;
  record.layer = best_layer;
  record.whole_layer = true;
  record.eta_used = config.eta;
  record.pre_toxicity = result.initial.mean_toxicity;
  record.post_toxicity = post.mean_toxicity;
  record.pre_correctness = result.initial.mean_correctness;
  record.post_correctness = post.mean_correctness;
  record.weight_delta_per_layer = weight_delta(before, after).per_layer;
  record.update_norm = record.weight_delta_per_layer[best_layer];
  result.iterations.push_back(std::move(record));

  result.reason = TerminalReason::max_iterations;
  result.final_stats = post;
  return {params, result};
}

}  // namespace pke
