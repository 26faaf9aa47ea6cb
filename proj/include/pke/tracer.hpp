#pragma once

#include <chrono>
#include <cmath>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "pke/dataset.hpp"
#include "pke/model.hpp"
#include "pke/scoring.hpp"

namespace pke {

/// Frozen, deeply copied view of a parameter store.
struct Snapshot {
  std::string label;
  ModelConfig config;
  ParameterStore params;
  std::int64_t taken_at_ms = 0;
};

inline Snapshot snapshot(const ModelConfig& cfg, const ParameterStore& store,
                         std::string label) {
  Snapshot s;
  s.label = std::move(label);
  s.config = cfg;
  s.params = store;  // deep copy by value semantics
  s.taken_at_ms = std::chrono::duration_cast<std::chrono::milliseconds>(
                      std::chrono::system_clock::now().time_since_epoch())
                      .count();
  return s;
}

/// Per-layer Frobenius norms. A transformer block owns several tensors; the
/// layer value aggregates them in quadrature so it equals the Frobenius norm
/// of the concatenated block.
struct PerLayerNorms {
  std::vector<double> per_layer;
  double non_block = 0.0;  // embed / final_ln / unembed tensors
  std::map<std::string, double> per_name;

  double layer(std::size_t l) const { return per_layer.at(l); }
  std::size_t n_layers() const { return per_layer.size(); }
};

using WeightDelta = PerLayerNorms;

namespace detail {
inline PerLayerNorms aggregate_norms(
    const ModelConfig& cfg,
    const std::function<Tensor(const std::string&)>& tensor_for) {
  PerLayerNorms out;
  out.per_layer.assign(cfg.n_layers, 0.0);
  double non_block_sq = 0.0;
  std::vector<double> layer_sq(cfg.n_layers, 0.0);
  for (const auto& [name, shape] : expected_param_shapes(cfg)) {
    const Tensor t = tensor_for(name);
    const double norm = frobenius_norm(t);
    out.per_name[name] = norm;
    if (auto l = param_layer_index(name))
      layer_sq[*l] += norm * norm;
    else
      non_block_sq += norm * norm;
  }
  for (std::size_t l = 0; l < cfg.n_layers; ++l)
    out.per_layer[l] = std::sqrt(layer_sq[l]);
  out.non_block = std::sqrt(non_block_sq);
  return out;
}
}  // namespace detail

/// ||W_after - W_before||_F per layer.
inline WeightDelta weight_delta(const Snapshot& before, const Snapshot& after) {
  if (before.config != after.config)
    throw ShapeError("weight_delta: snapshots come from different configs");
  for (const auto& [name, t] : before.params) {
    auto it = after.params.find(name);
    if (it == after.params.end())
      throw ShapeError("weight_delta: parameter " + name + " missing in after");
    if (!it->second.same_shape(t))
      throw ShapeError("weight_delta: shape mismatch for " + name);
  }
  if (before.params.size() != after.params.size())
    throw ShapeError("weight_delta: parameter sets differ");
  return detail::aggregate_norms(before.config, [&](const std::string& name) {
    return sub(after.params.at(name), before.params.at(name));
  });
}

/// Prompt + harmful response vs prompt + safe response, sharing the prompt.
struct ContextPair {
  std::vector<int> harmful_context;
  std::vector<int> safe_context;
  std::string id;

  ContextPair(std::vector<int> harmful, std::vector<int> safe, std::string id_)
      : harmful_context(std::move(harmful)),
        safe_context(std::move(safe)),
        id(std::move(id_)) {
    if (harmful_context.empty() || safe_context.empty())
      throw ValueError("context pair: contexts must be nonempty");
    if (harmful_context[0] != safe_context[0])
      throw ValueError("context pair: contexts must share a prompt prefix");
  }

  static ContextPair from_instance(const AttackInstance& inst) {
    std::vector<int> harm = inst.prompt;
    harm.insert(harm.end(), inst.harmful_response.begin(),
                inst.harmful_response.end());
    std::vector<int> safe = inst.prompt;
    safe.insert(safe.end(), inst.safe_response.begin(), inst.safe_response.end());
    return ContextPair(std::move(harm), std::move(safe), inst.id);
  }
};

/// Differentiable surrogate for the edit objective, averaged over instances:
/// the toxic-probability-mass term is measured on the harmful continuation's
/// teacher-forced positions, the correctness term is the NLL of the safe
/// reference on its own positions.
struct SurrogateLoss {
  Graph graph;
  std::map<std::string, NodeId> leaves;
  NodeId root = 0;
  double value = 0.0;
};

namespace detail {
inline std::vector<int> generated_rows(std::size_t prompt_len,
                                       std::size_t total_len) {
  // row p-1 of teacher-forced logits predicts token p
  std::vector<int> rows;
  for (std::size_t p = prompt_len; p < total_len; ++p)
    rows.push_back(static_cast<int>(p - 1));
  return rows;
}
}  // namespace detail

inline SurrogateLoss build_surrogate_loss(const ModelConfig& cfg,
                                          const ParameterStore& store,
                                          const InstanceSet& instances,
                                          const ToxicLexicon& lexicon,
                                          const LossWeights& weights) {
  if (instances.empty())
    throw ValueError("surrogate loss: empty instance set");
  SurrogateLoss out;
  TapeContext cx(out.graph);
  out.leaves = detail::register_leaves(out.graph, store);

  NodeId total = cx.constant(Tensor::scalar(0.0));
  for (const AttackInstance& inst : instances.items) {
    const ContextPair pair = ContextPair::from_instance(inst);

    // teacher-forced inputs drop the final token
    std::span<const int> harm_inputs(pair.harmful_context.data(),
                                     pair.harmful_context.size() - 1);
    NodeId harm_logits = detail::model_logits(cx, cfg, out.leaves, harm_inputs);
    NodeId harm_rows = cx.gather_rows(
        harm_logits,
        detail::generated_rows(inst.prompt.size(), pair.harmful_context.size()));
    NodeId tox = soft_toxicity(cx, harm_rows, lexicon, cfg.vocab_size);

    std::span<const int> safe_inputs(pair.safe_context.data(),
                                     pair.safe_context.size() - 1);
    NodeId safe_logits = detail::model_logits(cx, cfg, out.leaves, safe_inputs);
    NodeId safe_rows = cx.gather_rows(
        safe_logits,
        detail::generated_rows(inst.prompt.size(), pair.safe_context.size()));
    NodeId corr = soft_correctness_nll(cx, safe_rows, inst.safe_response);

    total = cx.add(total, custom_loss_node(cx, weights, tox, corr));
  }
  out.root = cx.scale(total, 1.0 / static_cast<double>(instances.size()));
  out.value = out.graph.value(out.root).item();
  return out;
}

/// Per-layer gradient Frobenius norms of the surrogate loss.
struct GradientTrace {
  PerLayerNorms norms;
  double loss_value = 0.0;
  std::string instance_set_id;

  const std::vector<double>& per_layer() const { return norms.per_layer; }
};

inline GradientTrace gradient_trace(const ModelConfig& cfg,
                                    const ParameterStore& store,
                                    const InstanceSet& instances,
                                    const ToxicLexicon& lexicon,
                                    const LossWeights& weights) {
  SurrogateLoss loss = build_surrogate_loss(cfg, store, instances, lexicon, weights);
  loss.graph.backward(loss.root);
  GradientTrace trace;
  trace.loss_value = loss.value;
  trace.instance_set_id = instances.content_hash;
  trace.norms = detail::aggregate_norms(cfg, [&](const std::string& name) {
    return loss.graph.grad(loss.leaves.at(name));
  });
  return trace;
}

/// |h_harm - h_safe| per neuron, where h is the mean post-gelu MLP activation
/// over the positions of the recorded forward pass.
struct ActivationDelta {
  std::vector<std::vector<double>> per_neuron;  // [layer][neuron]
  std::vector<double> per_layer_total;          // sum over neurons
  std::string harmful_id;
  std::string safe_id;

  std::size_t n_layers() const { return per_neuron.size(); }
};

namespace detail {
inline std::vector<std::vector<double>> mean_mlp_activations(
    const ModelConfig& cfg, const ParameterStore& store,
    std::span<const int> context) {
  ForwardRecord rec = forward_record(cfg, store, context);
  std::vector<std::vector<double>> out(cfg.n_layers,
                                       std::vector<double>(cfg.d_ff, 0.0));
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    const Tensor& h = rec.mlp_hidden_per_layer[l];
    const std::size_t seq = h.shape()[0];
    for (std::size_t j = 0; j < cfg.d_ff; ++j) {
      double sum = 0.0;
      for (std::size_t p = 0; p < seq; ++p) sum += h.at(p, j);
      out[l][j] = sum / static_cast<double>(seq);
    }
  }
  return out;
}
}  // namespace detail

inline ActivationDelta activation_delta(const ModelConfig& cfg,
                                        const ParameterStore& store,
                                        const ContextPair& pair) {
  const auto harm = detail::mean_mlp_activations(cfg, store, pair.harmful_context);
  const auto safe = detail::mean_mlp_activations(cfg, store, pair.safe_context);
  ActivationDelta delta;
  delta.harmful_id = pair.id + "/harmful";
  delta.safe_id = pair.id + "/safe";
  delta.per_neuron.assign(cfg.n_layers, std::vector<double>(cfg.d_ff, 0.0));
  delta.per_layer_total.assign(cfg.n_layers, 0.0);
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    double total = 0.0;
    for (std::size_t j = 0; j < cfg.d_ff; ++j) {
      const double d = std::abs(harm[l][j] - safe[l][j]);
      delta.per_neuron[l][j] = d;
      total += d;
    }
    delta.per_layer_total[l] = total;
  }
  return delta;
}

/// Mean of the per-instance activation deltas across an instance set.
inline ActivationDelta mean_activation_delta(const ModelConfig& cfg,
                                             const ParameterStore& store,
                                             const InstanceSet& instances) {
  if (instances.empty())
    throw ValueError("activation delta: empty instance set");
  ActivationDelta acc;
  acc.per_neuron.assign(cfg.n_layers, std::vector<double>(cfg.d_ff, 0.0));
  acc.per_layer_total.assign(cfg.n_layers, 0.0);
  acc.harmful_id = instances.content_hash + "/harmful";
  acc.safe_id = instances.content_hash + "/safe";
  for (const AttackInstance& inst : instances.items) {
    ActivationDelta d =
        activation_delta(cfg, store, ContextPair::from_instance(inst));
    for (std::size_t l = 0; l < cfg.n_layers; ++l)
      for (std::size_t j = 0; j < cfg.d_ff; ++j)
        acc.per_neuron[l][j] += d.per_neuron[l][j];
  }
  const double n = static_cast<double>(instances.size());
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    double total = 0.0;
    for (std::size_t j = 0; j < cfg.d_ff; ++j) {
      acc.per_neuron[l][j] /= n;
      total += acc.per_neuron[l][j];
    }
    acc.per_layer_total[l] = total;
  }
  return acc;
}

using ToxicityScorer = std::function<double(std::span<const int>)>;

inline ToxicityScorer lexicon_scorer(const ToxicLexicon& lexicon) {
  return [lexicon](std::span<const int> tokens) {
    return score_toxicity(tokens, lexicon);
  };
}

/// Greedy decoding through the logit lens: the residual stream after `layer`
/// is pushed through the final layer norm and unembedding each step.
inline std::vector<int> logit_lens_generate(const ModelConfig& cfg,
                                            const ParameterStore& store,
                                            std::span<const int> prompt,
                                            std::size_t layer,
                                            std::size_t max_new) {
  if (layer >= cfg.n_layers)
    throw ContractError("logit lens: layer index out of range");
  std::vector<int> tokens(prompt.begin(), prompt.end());
  const Tensor& gain = store.at("final_ln.g");
  const Tensor& bias = store.at("final_ln.b");
  const Tensor& unembed = store.at("unembed");
  for (std::size_t step = 0; step < max_new; ++step) {
    if (tokens.size() >= cfg.max_seq) break;
    ForwardRecord rec = forward_record(cfg, store, tokens);
    const Tensor& hidden = rec.hidden_per_layer[layer];
    const std::size_t last = hidden.shape()[0] - 1;
    Tensor row = Tensor::zeros({1, cfg.d_model});
    for (std::size_t j = 0; j < cfg.d_model; ++j) row.at(0, j) = hidden.at(last, j);
    Tensor logits = matmul(layer_norm(row, gain, bias, kLayerNormEps), unembed);
    int best = 0;
    double best_v = logits.at(0, 0);
    for (std::size_t j = 1; j < cfg.vocab_size; ++j)
      if (logits.at(0, j) > best_v) {
        best_v = logits.at(0, j);
        best = static_cast<int>(j);
      }
    tokens.push_back(best);
    if (best == kEosToken) break;
  }
  return tokens;
}

/// Mean toxicity of per-layer logit-lens continuations across instances.
struct LayerToxicityProfile {
  std::vector<double> mean_toxicity;  // [layer], values in [0,1]
  std::size_t n_instances = 0;
};

inline LayerToxicityProfile layer_toxicity(const ModelConfig& cfg,
                                           const ParameterStore& store,
                                           const InstanceSet& instances,
                                           const ToxicityScorer& scorer,
                                           std::size_t horizon) {
  if (instances.empty())
    throw ValueError("layer toxicity: empty instance set");
  LayerToxicityProfile profile;
  profile.n_instances = instances.size();
  profile.mean_toxicity.assign(cfg.n_layers, 0.0);
  for (const AttackInstance& inst : instances.items) {
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
      std::vector<int> full =
          logit_lens_generate(cfg, store, inst.prompt, l, horizon);
      std::span<const int> continuation(full.data() + inst.prompt.size(),
                                        full.size() - inst.prompt.size());
      const double t = scorer(continuation);
      if (t < 0.0 || t > 1.0)
        throw ValueError("layer toxicity: scorer must return values in [0,1]");
      profile.mean_toxicity[l] += t;
    }
  }
  for (double& v : profile.mean_toxicity)
    v /= static_cast<double>(instances.size());
  return profile;
}

/// Bundle exported by the trace command. Serialization is deterministic
/// (sorted keys, no timestamps).
struct TraceBundle {
  std::string before_label;
  std::string after_label;
  WeightDelta weights;
  GradientTrace gradients;
  ActivationDelta activations;
  LayerToxicityProfile toxicity;
  std::size_t top_k = 10;
};

inline nlohmann::json trace_bundle_to_json(const TraceBundle& b) {
  nlohmann::json layers = nlohmann::json::array();
  const std::size_t n_layers = b.gradients.norms.per_layer.size();
  for (std::size_t l = 0; l < n_layers; ++l) {
    layers.push_back(
        {{"layer", l},
         {"weight_delta", l < b.weights.per_layer.size() ? b.weights.per_layer[l] : 0.0},
         {"gradient_norm", b.gradients.norms.per_layer[l]},
         {"activation_delta_total", b.activations.per_layer_total[l]},
         {"mean_toxicity", b.toxicity.mean_toxicity[l]}});
  }

  // top-k neurons by activation delta, descending; ties by (layer, neuron)
  struct Rec {
    std::size_t layer, neuron;
    double delta;
  };
  std::vector<Rec> recs;
  for (std::size_t l = 0; l < b.activations.per_neuron.size(); ++l)
    for (std::size_t j = 0; j < b.activations.per_neuron[l].size(); ++j)
      recs.push_back({l, j, b.activations.per_neuron[l][j]});
  std::stable_sort(recs.begin(), recs.end(), [](const Rec& a, const Rec& c) {
    if (a.delta != c.delta) return a.delta > c.delta;
    if (a.layer != c.layer) return a.layer < c.layer;
    return a.neuron < c.neuron;
  });
  if (recs.size() > b.top_k) recs.resize(b.top_k);
  nlohmann::json top = nlohmann::json::array();
  for (const Rec& r : recs)
    top.push_back({{"layer", r.layer}, {"neuron", r.neuron}, {"activation_delta", r.delta}});

  return nlohmann::json{{"snapshots", {{"before", b.before_label}, {"after", b.after_label}}},
                        {"loss_value", b.gradients.loss_value},
                        {"instance_set", b.gradients.instance_set_id},
                        {"layers", layers},
                        {"top_neurons", top}};
}

}  // namespace pke
