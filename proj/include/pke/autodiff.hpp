#pragma once

#include <functional>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "pke/tensor.hpp"

namespace pke {

using NodeId = std::size_t;

/// Tape-style reverse-mode differentiation. Operations append nodes, so the
/// node vector is topologically ordered by construction (parents precede
/// children). Leaves are registered by name so per-parameter gradients can be
/// read back after backward().
class Graph {
 public:
  struct Node {
    Tensor value;
    Tensor grad;
    bool touched = false;
    bool is_leaf = false;
    std::string name;
    std::function<void(Graph&)> vjp;
  };

  NodeId leaf(std::string name, Tensor v) {
    NodeId id = push(std::move(v));
    nodes_[id].is_leaf = true;
    nodes_[id].name = name;
    leaf_ids_[std::move(name)] = id;
    return id;
  }

  NodeId constant(Tensor v) { return push(std::move(v)); }

  const Tensor& value(NodeId id) const { return nodes_.at(id).value; }
  const Tensor& grad(NodeId id) const { return nodes_.at(id).grad; }

  const Tensor& grad_by_name(const std::string& name) const {
    auto it = leaf_ids_.find(name);
    if (it == leaf_ids_.end())
      throw ContractError("grad_by_name: unknown leaf " + name);
    return nodes_[it->second].grad;
  }

  const std::map<std::string, NodeId>& leaves() const { return leaf_ids_; }
  std::size_t size() const { return nodes_.size(); }

  NodeId matmul(NodeId a, NodeId b) {
    NodeId id = push(pke::matmul(value(a), value(b)));
    nodes_[id].vjp = [id, a, b](Graph& g) {
      const Tensor& go = g.nodes_[id].grad;
      g.accum(a, pke::matmul(go, pke::transpose(g.value(b))));
      g.accum(b, pke::matmul(pke::transpose(g.value(a)), go));
    };
    return id;
  }

  NodeId add(NodeId a, NodeId b) {
    NodeId id = push(pke::add(value(a), value(b)));
    nodes_[id].vjp = [id, a, b](Graph& g) {
      const Tensor& go = g.nodes_[id].grad;
      g.accum_reduced(a, go);
      g.accum_reduced(b, go);
    };
    return id;
  }

  NodeId mul(NodeId a, NodeId b) {
    NodeId id = push(pke::mul(value(a), value(b)));
    nodes_[id].vjp = [id, a, b](Graph& g) {
      const Tensor& go = g.nodes_[id].grad;
      g.accum_reduced(a, pke::mul(go, g.value(b)));
      g.accum_reduced(b, pke::mul(go, g.value(a)));
    };
    return id;
  }

  NodeId scale(NodeId a, double c) {
    NodeId id = push(pke::scale(value(a), c));
    nodes_[id].vjp = [id, a, c](Graph& g) {
      g.accum(a, pke::scale(g.nodes_[id].grad, c));
    };
    return id;
  }

  NodeId relu(NodeId a) {
    NodeId id = push(pke::relu(value(a)));
    nodes_[id].vjp = [id, a](Graph& g) {
      const Tensor& go = g.nodes_[id].grad;
      const Tensor& x = g.value(a);
      Tensor dx = Tensor::zeros_like(x);
      for (std::size_t i = 0; i < x.numel(); ++i)
        dx.at(i) = x.at(i) > 0.0 ? go.at(i) : 0.0;
      g.accum(a, dx);
    };
    return id;
  }

  NodeId gelu(NodeId a) {
    NodeId id = push(pke::gelu(value(a)));
    nodes_[id].vjp = [id, a](Graph& g) {
      const Tensor& go = g.nodes_[id].grad;
      const Tensor& x = g.value(a);
      Tensor dx = Tensor::zeros_like(x);
      for (std::size_t i = 0; i < x.numel(); ++i)
        dx.at(i) = go.at(i) * detail::gelu_grad_scalar(x.at(i));
      g.accum(a, dx);
    };
    return id;
  }

  NodeId softmax_rows(NodeId a) {
    NodeId id = push(pke::softmax_rows(value(a)));
    nodes_[id].vjp = [id, a](Graph& g) {
      const Tensor& go = g.nodes_[id].grad;
      const Tensor& s = g.nodes_[id].value;
      const std::size_t m = s.shape()[0], n = s.shape()[1];
      Tensor dx = Tensor::zeros_like(s);
      for (std::size_t i = 0; i < m; ++i) {
        double dot = 0.0;
        for (std::size_t j = 0; j < n; ++j) dot += go.at(i, j) * s.at(i, j);
        for (std::size_t j = 0; j < n; ++j)
          dx.at(i, j) = s.at(i, j) * (go.at(i, j) - dot);
      }
      g.accum(a, dx);
    };
    return id;
  }

  NodeId log_softmax_rows(NodeId a) {
    NodeId id = push(pke::log_softmax_rows(value(a)));
    nodes_[id].vjp = [id, a](Graph& g) {
      const Tensor& go = g.nodes_[id].grad;
      const Tensor& ls = g.nodes_[id].value;
      const std::size_t m = ls.shape()[0], n = ls.shape()[1];
      Tensor dx = Tensor::zeros_like(ls);
      for (std::size_t i = 0; i < m; ++i) {
        double sumg = 0.0;
        for (std::size_t j = 0; j < n; ++j) sumg += go.at(i, j);
        for (std::size_t j = 0; j < n; ++j)
          dx.at(i, j) = go.at(i, j) - std::exp(ls.at(i, j)) * sumg;
      }
      g.accum(a, dx);
    };
    return id;
  }

  NodeId layer_norm(NodeId x, NodeId gain, NodeId bias, double eps) {
    NodeId id = push(pke::layer_norm(value(x), value(gain), value(bias), eps));
    nodes_[id].vjp = [id, x, gain, bias, eps](Graph& g) {
      const Tensor& go = g.nodes_[id].grad;
      const Tensor& xv = g.value(x);
      const Tensor& gv = g.value(gain);
      const std::size_t m = xv.rows(), n = xv.cols();
      Tensor dx = Tensor::zeros_like(xv);
      Tensor dgain = Tensor::zeros_like(gv);
      Tensor dbias = Tensor::zeros_like(gv);
      for (std::size_t i = 0; i < m; ++i) {
        double mean = 0.0;
        for (std::size_t j = 0; j < n; ++j) mean += xv.at(i * n + j);
        mean /= static_cast<double>(n);
        double var = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
          const double d = xv.at(i * n + j) - mean;
          var += d * d;
        }
        var /= static_cast<double>(n);
        const double inv = 1.0 / std::sqrt(var + eps);
        double sum_dxh = 0.0, sum_dxh_xh = 0.0;
        std::vector<double> xh(n), dxh(n);
        for (std::size_t j = 0; j < n; ++j) {
          xh[j] = (xv.at(i * n + j) - mean) * inv;
          dxh[j] = go.at(i * n + j) * gv.at(j);
          sum_dxh += dxh[j];
          sum_dxh_xh += dxh[j] * xh[j];
        }
        const double nn = static_cast<double>(n);
        for (std::size_t j = 0; j < n; ++j) {
          dx.at(i * n + j) =
              (inv / nn) * (nn * dxh[j] - sum_dxh - xh[j] * sum_dxh_xh);
          dgain.at(j) += go.at(i * n + j) * xh[j];
          dbias.at(j) += go.at(i * n + j);
        }
      }
      g.accum(x, dx);
      g.accum(gain, dgain);
      g.accum(bias, dbias);
    };
    return id;
  }

  NodeId transpose(NodeId a) {
    NodeId id = push(pke::transpose(value(a)));
    nodes_[id].vjp = [id, a](Graph& g) {
      g.accum(a, pke::transpose(g.nodes_[id].grad));
    };
    return id;
  }

  NodeId gather_rows(NodeId m, std::vector<int> rows) {
    NodeId id = push(pke::gather_rows(value(m), rows));
    nodes_[id].vjp = [id, m, rows = std::move(rows)](Graph& g) {
      const Tensor& go = g.nodes_[id].grad;
      const Tensor& mv = g.value(m);
      const std::size_t n = mv.shape()[1];
      Tensor dm = Tensor::zeros_like(mv);
      for (std::size_t i = 0; i < rows.size(); ++i)
        for (std::size_t j = 0; j < n; ++j)
          dm.at(static_cast<std::size_t>(rows[i]), j) += go.at(i, j);
      g.accum(m, dm);
    };
    return id;
  }

  NodeId slice_cols(NodeId m, std::size_t c0, std::size_t c1) {
    NodeId id = push(pke::slice_cols(value(m), c0, c1));
    nodes_[id].vjp = [id, m, c0, c1](Graph& g) {
      const Tensor& go = g.nodes_[id].grad;
      const Tensor& mv = g.value(m);
      Tensor dm = Tensor::zeros_like(mv);
      for (std::size_t i = 0; i < mv.shape()[0]; ++i)
        for (std::size_t j = c0; j < c1; ++j) dm.at(i, j) = go.at(i, j - c0);
      g.accum(m, dm);
    };
    return id;
  }

  NodeId concat_cols(std::vector<NodeId> parts) {
    std::vector<Tensor> vals;
    vals.reserve(parts.size());
    for (NodeId p : parts) vals.push_back(value(p));
    NodeId id = push(pke::concat_cols(vals));
    nodes_[id].vjp = [id, parts = std::move(parts)](Graph& g) {
      const Tensor& go = g.nodes_[id].grad;
      std::size_t off = 0;
      for (NodeId p : parts) {
        const std::size_t w = g.value(p).shape()[1];
        g.accum(p, pke::slice_cols(go, off, off + w));
        off += w;
      }
    };
    return id;
  }

  NodeId causal_mask(NodeId a) {
    NodeId id = push(pke::causal_mask(value(a)));
    nodes_[id].vjp = [id, a](Graph& g) {
      const Tensor& go = g.nodes_[id].grad;
      const std::size_t n = go.shape()[0];
      Tensor dx = Tensor::zeros_like(go);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j <= i; ++j) dx.at(i, j) = go.at(i, j);
      g.accum(a, dx);
    };
    return id;
  }

  NodeId pick_per_row(NodeId m, std::vector<int> cols) {
    NodeId id = push(pke::pick_per_row(value(m), cols));
    nodes_[id].vjp = [id, m, cols = std::move(cols)](Graph& g) {
      const Tensor& go = g.nodes_[id].grad;
      Tensor dm = Tensor::zeros_like(g.value(m));
      for (std::size_t i = 0; i < cols.size(); ++i)
        dm.at(i, static_cast<std::size_t>(cols[i])) += go.at(i, 0);
      g.accum(m, dm);
    };
    return id;
  }

  NodeId sum_all(NodeId a) {
    NodeId id = push(pke::sum_all(value(a)));
    nodes_[id].vjp = [id, a](Graph& g) {
      const double s = g.nodes_[id].grad.at(0);
      g.accum(a, Tensor::full(g.value(a).shape(), s));
    };
    return id;
  }

  /// Seeds d(root)/d(root) = 1 and sweeps the tape in reverse. Root must be
  /// scalar. Gradients are reset first, so repeated calls on the same graph
  /// are bit-identical; leaves the root does not reach keep zero gradients.
  void backward(NodeId root) {
    if (root >= nodes_.size()) throw ContractError("backward: bad root id");
    if (!nodes_[root].value.is_scalar())
      throw ContractError("backward: root must be scalar, got shape " +
                          nodes_[root].value.shape_str());
    for (Node& n : nodes_) {
      n.grad = Tensor::zeros_like(n.value);
      n.touched = false;
    }
    nodes_[root].grad.at(0) = 1.0;
    nodes_[root].touched = true;
    for (std::size_t i = root + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (n.touched && n.vjp) n.vjp(*this);
    }
  }

 private:
  NodeId push(Tensor v) {
    nodes_.push_back(Node{std::move(v), Tensor(), false, false, {}, nullptr});
    return nodes_.size() - 1;
  }

  void accum(NodeId id, const Tensor& g) {
    Node& n = nodes_[id];
    if (!n.grad.same_shape(n.value)) n.grad = Tensor::zeros_like(n.value);
    if (!g.same_shape(n.grad))
      throw ShapeError("accum: gradient shape mismatch");
    for (std::size_t i = 0; i < g.numel(); ++i) n.grad.at(i) += g.at(i);
    n.touched = true;
  }

  // For ops with scalar broadcasting the incoming gradient must be reduced
  // back to the scalar operand's shape.
  void accum_reduced(NodeId id, const Tensor& g) {
    const Tensor& v = nodes_[id].value;
    if (g.same_shape(v)) {
      accum(id, g);
    } else if (v.is_scalar()) {
      accum(id, pke::sum_all(g));
    } else {
      throw ShapeError("accum_reduced: cannot reduce gradient to operand shape");
    }
  }

  std::vector<Node> nodes_;
  std::map<std::string, NodeId> leaf_ids_;
};

/// Executes the same primitive vocabulary as Graph, directly on tensors with
/// no recording. Model and loss code is written once against either context.
struct EvalContext {
  using Value = Tensor;

  Value constant(Tensor t) { return t; }
  Value matmul(const Value& a, const Value& b) { return pke::matmul(a, b); }
  Value add(const Value& a, const Value& b) { return pke::add(a, b); }
  Value mul(const Value& a, const Value& b) { return pke::mul(a, b); }
  Value scale(const Value& a, double c) { return pke::scale(a, c); }
  Value relu(const Value& a) { return pke::relu(a); }
  Value gelu(const Value& a) { return pke::gelu(a); }
  Value softmax_rows(const Value& a) { return pke::softmax_rows(a); }
  Value log_softmax_rows(const Value& a) { return pke::log_softmax_rows(a); }
  Value layer_norm(const Value& x, const Value& g, const Value& b, double eps) {
    return pke::layer_norm(x, g, b, eps);
  }
  Value transpose(const Value& a) { return pke::transpose(a); }
  Value gather_rows(const Value& m, std::vector<int> rows) {
    return pke::gather_rows(m, rows);
  }
  Value slice_cols(const Value& m, std::size_t c0, std::size_t c1) {
    return pke::slice_cols(m, c0, c1);
  }
  Value concat_cols(const std::vector<Value>& parts) {
    return pke::concat_cols(parts);
  }
  Value causal_mask(const Value& a) { return pke::causal_mask(a); }
  Value pick_per_row(const Value& m, std::vector<int> cols) {
    return pke::pick_per_row(m, cols);
  }
  Value sum_all(const Value& a) { return pke::sum_all(a); }

  const Tensor& tensor_of(const Value& v) const { return v; }
};

/// Same vocabulary, recording onto a Graph.
struct TapeContext {
  using Value = NodeId;
  Graph* graph;

  explicit TapeContext(Graph& g) : graph(&g) {}

  Value constant(Tensor t) { return graph->constant(std::move(t)); }
  Value matmul(Value a, Value b) { return graph->matmul(a, b); }
  Value add(Value a, Value b) { return graph->add(a, b); }
  Value mul(Value a, Value b) { return graph->mul(a, b); }
  Value scale(Value a, double c) { return graph->scale(a, c); }
  Value relu(Value a) { return graph->relu(a); }
  Value gelu(Value a) { return graph->gelu(a); }
  Value softmax_rows(Value a) { return graph->softmax_rows(a); }
  Value log_softmax_rows(Value a) { return graph->log_softmax_rows(a); }
  Value layer_norm(Value x, Value g, Value b, double eps) {
    return graph->layer_norm(x, g, b, eps);
  }
  Value transpose(Value a) { return graph->transpose(a); }
  Value gather_rows(Value m, std::vector<int> rows) {
    return graph->gather_rows(m, std::move(rows));
  }
  Value slice_cols(Value m, std::size_t c0, std::size_t c1) {
    return graph->slice_cols(m, c0, c1);
  }
  Value concat_cols(std::vector<Value> parts) {
    return graph->concat_cols(std::move(parts));
  }
  Value causal_mask(Value a) { return graph->causal_mask(a); }
  Value pick_per_row(Value m, std::vector<int> cols) {
    return graph->pick_per_row(m, std::move(cols));
  }
  Value sum_all(Value a) { return graph->sum_all(a); }

  const Tensor& tensor_of(Value v) const { return graph->value(v); }
};

}  // namespace pke
