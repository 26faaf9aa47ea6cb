#include <catch2/catch_amalgamated.hpp>

#include "pke/autodiff.hpp"
#include "test_helpers.hpp"

using namespace pke;
using pke_test::GradientCheck;
using pke_test::random_tensor;

namespace {

// Reduce any tensor to a scalar with fixed random weights so every output
// coordinate contributes to the root.
template <class Ctx, class V>
V weighted_sum(Ctx& cx, V value, const Tensor& w) {
  return cx.sum_all(cx.mul(value, cx.constant(w)));
}

}  // namespace

TEST_CASE("primitive gradients match central finite differences") {
  // 20 seeds across the primitive set, random 3x3 inputs
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    Rng rng(seed);
    GradientCheck check;

    Tensor a = random_tensor(rng, {3, 3});
    Tensor b = random_tensor(rng, {3, 3});
    Tensor w = random_tensor(rng, {3, 3});

    SECTION("seed " + std::to_string(seed)) {
      check.run(
          {a, b},
          [&](EvalContext& cx, const std::vector<Tensor>& xs) {
            return weighted_sum(cx, cx.matmul(xs[0], xs[1]), w);
          },
          [&](TapeContext& cx, const std::vector<NodeId>& xs) {
            return weighted_sum(cx, cx.matmul(xs[0], xs[1]), w);
          });

      check.run(
          {a, b},
          [&](EvalContext& cx, const std::vector<Tensor>& xs) {
            return weighted_sum(cx, cx.mul(cx.add(xs[0], xs[1]), xs[1]), w);
          },
          [&](TapeContext& cx, const std::vector<NodeId>& xs) {
            return weighted_sum(cx, cx.mul(cx.add(xs[0], xs[1]), xs[1]), w);
          });

      check.run(
          {a},
          [&](EvalContext& cx, const std::vector<Tensor>& xs) {
            return weighted_sum(cx, cx.gelu(xs[0]), w);
          },
          [&](TapeContext& cx, const std::vector<NodeId>& xs) {
            return weighted_sum(cx, cx.gelu(xs[0]), w);
          });

      check.run(
          {a},
          [&](EvalContext& cx, const std::vector<Tensor>& xs) {
            return weighted_sum(cx, cx.softmax_rows(xs[0]), w);
          },
          [&](TapeContext& cx, const std::vector<NodeId>& xs) {
            return weighted_sum(cx, cx.softmax_rows(xs[0]), w);
          });

      check.run(
          {a},
          [&](EvalContext& cx, const std::vector<Tensor>& xs) {
            return weighted_sum(cx, cx.log_softmax_rows(xs[0]), w);
          },
          [&](TapeContext& cx, const std::vector<NodeId>& xs) {
            return weighted_sum(cx, cx.log_softmax_rows(xs[0]), w);
          });

      Tensor gain = random_tensor(rng, {3});
      Tensor bias = random_tensor(rng, {3});
      check.run(
          {a, gain, bias},
          [&](EvalContext& cx, const std::vector<Tensor>& xs) {
            return weighted_sum(cx, cx.layer_norm(xs[0], xs[1], xs[2], 1e-5), w);
          },
          [&](TapeContext& cx, const std::vector<NodeId>& xs) {
            return weighted_sum(cx, cx.layer_norm(xs[0], xs[1], xs[2], 1e-5), w);
          });

      check.run(
          {a},
          [&](EvalContext& cx, const std::vector<Tensor>& xs) {
            return weighted_sum(
                cx, cx.softmax_rows(cx.causal_mask(cx.transpose(xs[0]))), w);
          },
          [&](TapeContext& cx, const std::vector<NodeId>& xs) {
            return weighted_sum(
                cx, cx.softmax_rows(cx.causal_mask(cx.transpose(xs[0]))), w);
          });

      std::vector<int> rows = {2, 0, 1, 2};
      Tensor w4 = random_tensor(rng, {4, 3});
      check.run(
          {a},
          [&](EvalContext& cx, const std::vector<Tensor>& xs) {
            return weighted_sum(cx, cx.gather_rows(xs[0], rows), w4);
          },
          [&](TapeContext& cx, const std::vector<NodeId>& xs) {
            return weighted_sum(cx, cx.gather_rows(xs[0], rows), w4);
          });

      std::vector<int> cols = {1, 2, 0};
      Tensor w31 = random_tensor(rng, {3, 1});
      check.run(
          {a},
          [&](EvalContext& cx, const std::vector<Tensor>& xs) {
            return weighted_sum(cx, cx.pick_per_row(xs[0], cols), w31);
          },
          [&](TapeContext& cx, const std::vector<NodeId>& xs) {
            return weighted_sum(cx, cx.pick_per_row(xs[0], cols), w31);
          });

      // slice + concat + relu + scale chain
      check.run(
          {a},
          [&](EvalContext& cx, const std::vector<Tensor>& xs) {
            auto left = cx.slice_cols(xs[0], 0, 2);
            auto right = cx.slice_cols(xs[0], 2, 3);
            auto joined = cx.concat_cols({cx.relu(left), cx.scale(right, 1.7)});
            return weighted_sum(cx, joined, w);
          },
          [&](TapeContext& cx, const std::vector<NodeId>& xs) {
            auto left = cx.slice_cols(xs[0], 0, 2);
            auto right = cx.slice_cols(xs[0], 2, 3);
            auto joined =
                cx.concat_cols(std::vector<NodeId>{cx.relu(left), cx.scale(right, 1.7)});
            return weighted_sum(cx, joined, w);
          });
    }
  }
}

TEST_CASE("linear case: d/dW of sum(W x) is x broadcast per row") {
  Rng rng(99);
  Tensor wmat = random_tensor(rng, {3, 3});
  Tensor x = random_tensor(rng, {3, 1});

  Graph g;
  TapeContext cx(g);
  NodeId w_leaf = g.leaf("w", wmat);
  NodeId root = cx.sum_all(cx.matmul(w_leaf, cx.constant(x)));
  g.backward(root);
  const Tensor& grad = g.grad(w_leaf);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 3; ++j)
      CHECK(grad.at(i, j) == Catch::Approx(x.at(j, 0)).epsilon(1e-12));
}

TEST_CASE("gradient of a constant root w.r.t. any leaf is zero") {
  Rng rng(4);
  Graph g;
  NodeId leaf = g.leaf("p", random_tensor(rng, {2, 2}));
  NodeId constant = g.constant(Tensor::scalar(5.0));
  g.backward(constant);
  for (double v : g.grad(leaf).data()) CHECK(v == 0.0);
}

TEST_CASE("backward is deterministic: twice on one graph, bit-identical") {
  Rng rng(17);
  Graph g;
  TapeContext cx(g);
  NodeId a = g.leaf("a", random_tensor(rng, {4, 4}));
  NodeId b = g.leaf("b", random_tensor(rng, {4, 4}));
  NodeId root = cx.sum_all(cx.gelu(cx.matmul(cx.softmax_rows(a), b)));

  g.backward(root);
  Tensor ga = g.grad(a);
  Tensor gb = g.grad(b);
  g.backward(root);
  CHECK(g.grad(a) == ga);
  CHECK(g.grad(b) == gb);
}

TEST_CASE("backward requires a scalar root") {
  Graph g;
  NodeId leaf = g.leaf("p", Tensor::zeros({2, 2}));
  CHECK_THROWS_AS(g.backward(leaf), ContractError);
}

TEST_CASE("leaves not reached by the root get zero gradients") {
  Rng rng(23);
  Graph g;
  TapeContext cx(g);
  NodeId used = g.leaf("used", random_tensor(rng, {2, 2}));
  NodeId unused = g.leaf("unused", random_tensor(rng, {2, 2}));
  NodeId root = cx.sum_all(cx.relu(used));
  g.backward(root);
  for (double v : g.grad(unused).data()) CHECK(v == 0.0);
  CHECK(g.grad_by_name("unused") == Tensor::zeros({2, 2}));
}

TEST_CASE("scalar broadcast gradients reduce correctly") {
  GradientCheck check;
  Rng rng(31);
  Tensor a = random_tensor(rng, {3, 3});
  Tensor s = Tensor::scalar(0.7);
  Tensor w = random_tensor(rng, {3, 3});
  check.run(
      {a, s},
      [&](EvalContext& cx, const std::vector<Tensor>& xs) {
        return weighted_sum(cx, cx.mul(xs[0], xs[1]), w);
      },
      [&](TapeContext& cx, const std::vector<NodeId>& xs) {
        return weighted_sum(cx, cx.mul(xs[0], xs[1]), w);
      });
}
