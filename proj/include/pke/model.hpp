#pragma once

#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "pke/autodiff.hpp"
#include "pke/tensor.hpp"

namespace pke {

/// Token id 0 terminates generation.
inline constexpr int kEosToken = 0;
inline constexpr double kLayerNormEps = 1e-5;

struct ModelConfig {
  std::size_t vocab_size = 32;
  std::size_t d_model = 32;
  std::size_t n_layers = 2;
  std::size_t n_heads = 2;
  std::size_t d_ff = 32;
  std::size_t max_seq = 16;
  std::uint64_t seed = 0;

  void validate() const {
    if (vocab_size == 0 || d_model == 0 || n_layers == 0 || n_heads == 0 ||
        d_ff == 0 || max_seq == 0)
      throw ValueError("model config: all dimensions must be positive");
    if (d_model % n_heads != 0)
      throw ValueError("model config: d_model must be divisible by n_heads");
  }

  std::size_t d_head() const { return d_model / n_heads; }

  bool operator==(const ModelConfig&) const = default;
};

/// Named weight tensors; the object all editing mutates. Copies are deep.
using ParameterStore = std::map<std::string, Tensor>;

/// Layer index for names of the form "layer.<l>.<rest>"; nullopt for
/// embed/final_ln/unembed parameters.
inline std::optional<std::size_t> param_layer_index(const std::string& name) {
  constexpr std::string_view prefix = "layer.";
  if (name.rfind(prefix, 0) != 0) return std::nullopt;
  std::size_t pos = prefix.size();
  std::size_t end = name.find('.', pos);
  if (end == std::string::npos || end == pos) return std::nullopt;
  std::size_t idx = 0;
  for (std::size_t i = pos; i < end; ++i) {
    if (name[i] < '0' || name[i] > '9') return std::nullopt;
    idx = idx * 10 + static_cast<std::size_t>(name[i] - '0');
  }
  return idx;
}

/// Canonical parameter list (name, shape) in initialization draw order.
inline std::vector<std::pair<std::string, std::vector<std::size_t>>>
expected_param_shapes(const ModelConfig& cfg) {
  std::vector<std::pair<std::string, std::vector<std::size_t>>> out;
  out.emplace_back("embed.tok", std::vector<std::size_t>{cfg.vocab_size, cfg.d_model});
  out.emplace_back("embed.pos", std::vector<std::size_t>{cfg.max_seq, cfg.d_model});
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    const std::string p = "layer." + std::to_string(l) + ".";
    out.emplace_back(p + "attn.wq", std::vector<std::size_t>{cfg.d_model, cfg.d_model});
    out.emplace_back(p + "attn.wk", std::vector<std::size_t>{cfg.d_model, cfg.d_model});
    out.emplace_back(p + "attn.wv", std::vector<std::size_t>{cfg.d_model, cfg.d_model});
    out.emplace_back(p + "attn.wo", std::vector<std::size_t>{cfg.d_model, cfg.d_model});
    out.emplace_back(p + "ln1.g", std::vector<std::size_t>{cfg.d_model});
    out.emplace_back(p + "ln1.b", std::vector<std::size_t>{cfg.d_model});
    out.emplace_back(p + "ln2.g", std::vector<std::size_t>{cfg.d_model});
    out.emplace_back(p + "ln2.b", std::vector<std::size_t>{cfg.d_model});
    out.emplace_back(p + "mlp.w1", std::vector<std::size_t>{cfg.d_model, cfg.d_ff});
    out.emplace_back(p + "mlp.w2", std::vector<std::size_t>{cfg.d_ff, cfg.d_model});
  }
  out.emplace_back("final_ln.g", std::vector<std::size_t>{cfg.d_model});
  out.emplace_back("final_ln.b", std::vector<std::size_t>{cfg.d_model});
  out.emplace_back("unembed", std::vector<std::size_t>{cfg.d_model, cfg.vocab_size});
  return out;
}

/// Throws ShapeError naming the first missing or mismatched parameter.
inline void validate_store_shapes(const ModelConfig& cfg,
                                  const ParameterStore& store) {
  const auto expected = expected_param_shapes(cfg);
  for (const auto& [name, shape] : expected) {
    auto it = store.find(name);
    if (it == store.end())
      throw ShapeError("parameter store: missing parameter " + name);
    if (it->second.shape() != shape)
      throw ShapeError("parameter store: shape mismatch for " + name +
                       ": expected " + Tensor::zeros(shape).shape_str() +
                       ", got " + it->second.shape_str());
  }
  if (store.size() != expected.size())
    throw ShapeError("parameter store: unexpected extra parameters present");
}

/// Scaled-normal init (std 0.02) from cfg.seed; layer-norm gains 1, biases 0.
/// The draw order is the canonical parameter order, so identical seeds give
/// bit-identical stores.
inline ParameterStore init_model(const ModelConfig& cfg) {
  cfg.validate();
  Rng rng(cfg.seed);
  ParameterStore store;
  for (const auto& [name, shape] : expected_param_shapes(cfg)) {
    const bool is_ln_gain = name.ends_with("ln.g") || name.ends_with("ln1.g") ||
                            name.ends_with("ln2.g");
    const bool is_ln_bias = name.ends_with("ln.b") || name.ends_with("ln1.b") ||
                            name.ends_with("ln2.b");
    if (is_ln_gain) {
      store[name] = Tensor::full(shape, 1.0);
    } else if (is_ln_bias) {
      store[name] = Tensor::zeros(shape);
    } else {
      Tensor t = Tensor::zeros(shape);
      for (std::size_t i = 0; i < t.numel(); ++i) t.at(i) = 0.02 * rng.normal();
      store[name] = std::move(t);
    }
  }
  return store;
}

namespace detail {

inline void validate_tokens(const ModelConfig& cfg, std::span<const int> tokens) {
  if (tokens.empty()) throw ValueError("forward: empty token sequence");
  if (tokens.size() > cfg.max_seq)
    throw ValueError("forward: sequence length " + std::to_string(tokens.size()) +
                     " exceeds max_seq " + std::to_string(cfg.max_seq));
  for (int t : tokens)
    if (t < 0 || static_cast<std::size_t>(t) >= cfg.vocab_size)
      throw ValueError("forward: token id " + std::to_string(t) +
                       " out of range for vocab " + std::to_string(cfg.vocab_size));
}

/// Decoder-only forward pass, written once against the context vocabulary.
/// Pre-norm blocks: x += attn(ln1(x)); x += mlp(ln2(x)). The MLP hidden
/// activation (post-gelu, seq x d_ff) is the per-neuron signal; row j of
/// mlp.w2 is neuron j's write-out row.
template <class Ctx>
typename Ctx::Value model_logits(
    Ctx& cx, const ModelConfig& cfg,
    const std::map<std::string, typename Ctx::Value>& p,
    std::span<const int> tokens,
    std::vector<typename Ctx::Value>* hidden_rec = nullptr,
    std::vector<typename Ctx::Value>* mlp_rec = nullptr) {
  using V = typename Ctx::Value;
  validate_tokens(cfg, tokens);
  const std::size_t seq = tokens.size();
  const std::size_t dh = cfg.d_head();

  std::vector<int> positions(seq);
  for (std::size_t i = 0; i < seq; ++i) positions[i] = static_cast<int>(i);

  std::vector<int> tok_ids(tokens.begin(), tokens.end());
  V x = cx.add(cx.gather_rows(p.at("embed.tok"), tok_ids),
               cx.gather_rows(p.at("embed.pos"), positions));

  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    const std::string pre = "layer." + std::to_string(l) + ".";
    V normed = cx.layer_norm(x, p.at(pre + "ln1.g"), p.at(pre + "ln1.b"),
                             kLayerNormEps);
    V q = cx.matmul(normed, p.at(pre + "attn.wq"));
    V k = cx.matmul(normed, p.at(pre + "attn.wk"));
    V v = cx.matmul(normed, p.at(pre + "attn.wv"));
    std::vector<V> head_outputs;
    head_outputs.reserve(cfg.n_heads);
    for (std::size_t h = 0; h < cfg.n_heads; ++h) {
      V qh = cx.slice_cols(q, h * dh, (h + 1) * dh);
      V kh = cx.slice_cols(k, h * dh, (h + 1) * dh);
      V vh = cx.slice_cols(v, h * dh, (h + 1) * dh);
      V scores = cx.scale(cx.matmul(qh, cx.transpose(kh)),
                          1.0 / std::sqrt(static_cast<double>(dh)));
      V probs = cx.softmax_rows(cx.causal_mask(scores));
      head_outputs.push_back(cx.matmul(probs, vh));
    }
    V attn = cx.matmul(cx.concat_cols(head_outputs), p.at(pre + "attn.wo"));
    x = cx.add(x, attn);

    V normed2 = cx.layer_norm(x, p.at(pre + "ln2.g"), p.at(pre + "ln2.b"),
                              kLayerNormEps);
    V mlp_hidden = cx.gelu(cx.matmul(normed2, p.at(pre + "mlp.w1")));
    if (mlp_rec) mlp_rec->push_back(mlp_hidden);
    V mlp_out = cx.matmul(mlp_hidden, p.at(pre + "mlp.w2"));
    x = cx.add(x, mlp_out);
    if (hidden_rec) hidden_rec->push_back(x);
  }

  V final_normed =
      cx.layer_norm(x, p.at("final_ln.g"), p.at("final_ln.b"), kLayerNormEps);
  return cx.matmul(final_normed, p.at("unembed"));
}

inline std::map<std::string, Tensor> as_value_map(const ParameterStore& store) {
  return store;
}

inline std::map<std::string, NodeId> register_leaves(Graph& g,
                                                     const ParameterStore& store) {
  std::map<std::string, NodeId> out;
  for (const auto& [name, tensor] : store) out[name] = g.leaf(name, tensor);
  return out;
}

}  // namespace detail

struct ForwardRecord {
  Tensor logits;
  std::vector<Tensor> hidden_per_layer;      // residual stream after each block
  std::vector<Tensor> mlp_hidden_per_layer;  // post-gelu MLP activations
};

inline Tensor forward(const ModelConfig& cfg, const ParameterStore& store,
                      std::span<const int> tokens) {
  EvalContext cx;
  auto params = detail::as_value_map(store);
  return detail::model_logits(cx, cfg, params, tokens);
}

inline ForwardRecord forward_record(const ModelConfig& cfg,
                                    const ParameterStore& store,
                                    std::span<const int> tokens) {
  EvalContext cx;
  auto params = detail::as_value_map(store);
  ForwardRecord rec;
  rec.logits = detail::model_logits(cx, cfg, params, tokens,
                                    &rec.hidden_per_layer,
                                    &rec.mlp_hidden_per_layer);
  return rec;
}

/// Mean negative log-likelihood of targets under row-softmax of logits.
template <class Ctx>
typename Ctx::Value nll_node(Ctx& cx, typename Ctx::Value logits,
                             std::span<const int> targets) {
  const Tensor& lv = cx.tensor_of(logits);
  if (lv.rows() != targets.size())
    throw ShapeError("nll: one target per logit row required");
  std::vector<int> tgt(targets.begin(), targets.end());
  auto picked = cx.pick_per_row(cx.log_softmax_rows(logits), std::move(tgt));
  return cx.scale(cx.sum_all(picked),
                  -1.0 / static_cast<double>(targets.size()));
}

inline double nll_loss(const Tensor& logits, std::span<const int> targets) {
  EvalContext cx;
  return nll_node(cx, logits, targets).item();
}

/// Greedy decoding; ties resolve to the lowest token id. Stops after max_new
/// tokens, at the end-of-sequence token, or when max_seq is reached.
inline std::vector<int> generate(const ModelConfig& cfg,
                                 const ParameterStore& store,
                                 std::span<const int> prompt,
                                 std::size_t max_new) {
  detail::validate_tokens(cfg, prompt);
  std::vector<int> tokens(prompt.begin(), prompt.end());
  for (std::size_t step = 0; step < max_new; ++step) {
    if (tokens.size() >= cfg.max_seq) break;
    Tensor logits = forward(cfg, store, tokens);
    const std::size_t last = logits.rows() - 1;
    int best = 0;
    double best_v = logits.at(last, 0);
    for (std::size_t j = 1; j < logits.cols(); ++j) {
      if (logits.at(last, j) > best_v) {
        best_v = logits.at(last, j);
        best = static_cast<int>(j);
      }
    }
    tokens.push_back(best);
    if (best == kEosToken) break;
  }
  return tokens;
}

struct TrainOptions {
  std::size_t steps = 1000;
  double lr = 0.05;
  double clip_norm = 1.0;  // 0 disables clipping
};

/// Plain SGD over next-token NLL, cycling the corpus in order. Deterministic:
/// no sampling, so identical inputs give identical parameters.
inline ParameterStore train_toy(const ModelConfig& cfg, ParameterStore store,
                                const std::vector<std::vector<int>>& corpus,
                                const TrainOptions& opt,
                                std::vector<double>* loss_log = nullptr) {
  if (corpus.empty()) throw ValueError("train: empty corpus");
  for (const auto& seq : corpus)
    if (seq.size() < 2)
      throw ValueError("train: sequences need at least two tokens");
  for (std::size_t step = 0; step < opt.steps; ++step) {
    const std::vector<int>& seq = corpus[step % corpus.size()];
    std::span<const int> inputs(seq.data(), seq.size() - 1);
    std::span<const int> targets(seq.data() + 1, seq.size() - 1);

    Graph g;
    TapeContext cx(g);
    auto leaves = detail::register_leaves(g, store);
    NodeId logits = detail::model_logits(cx, cfg, leaves, inputs);
    NodeId loss = nll_node(cx, logits, targets);
    g.backward(loss);
    if (loss_log) loss_log->push_back(g.value(loss).item());

    double norm_sq = 0.0;
    for (const auto& [name, id] : leaves)
      for (double v : g.grad(id).data()) norm_sq += v * v;
    double factor = 1.0;
    if (opt.clip_norm > 0.0) {
      const double norm = std::sqrt(norm_sq);
      if (norm > opt.clip_norm) factor = opt.clip_norm / norm;
    }
    for (auto& [name, tensor] : store) {
      const Tensor& grad = g.grad(leaves.at(name));
      for (std::size_t i = 0; i < tensor.numel(); ++i)
        tensor.at(i) -= opt.lr * factor * grad.at(i);
    }
  }
  return store;
}

/// Mean next-token NLL of a corpus under the model.
inline double corpus_nll(const ModelConfig& cfg, const ParameterStore& store,
                         const std::vector<std::vector<int>>& corpus) {
  if (corpus.empty()) throw ValueError("corpus_nll: empty corpus");
  double total = 0.0;
  std::size_t count = 0;
  for (const auto& seq : corpus) {
    if (seq.size() < 2) continue;
    std::span<const int> inputs(seq.data(), seq.size() - 1);
    std::span<const int> targets(seq.data() + 1, seq.size() - 1);
    Tensor logits = forward(cfg, store, inputs);
    total += nll_loss(logits, targets);
    ++count;
  }
  if (count == 0) throw ValueError("corpus_nll: no usable sequences");
  return total / static_cast<double>(count);
}

}  // namespace pke
