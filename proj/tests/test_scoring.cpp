#include <catch2/catch_amalgamated.hpp>

#include "pke/scoring.hpp"
#include "test_helpers.hpp"

using namespace pke;
using pke_test::GradientCheck;
using pke_test::random_tensor;

namespace {
ToxicLexicon demo_lexicon() {
  ToxicLexicon lex;
  lex.weights[13] = 1.0;
  lex.weights[14] = 0.5;
  lex.weights[15] = 0.5;
  lex.refusal_patterns = {{1, 2}};
  return lex;
}
}  // namespace

TEST_CASE("hard toxicity is a noisy-OR over matched tokens") {
  ToxicLexicon lex = demo_lexicon();

  std::vector<int> clean = {3, 4, 5};
  CHECK(score_toxicity(clean, lex) == 0.0);

  std::vector<int> lethal = {3, 13};
  CHECK(score_toxicity(lethal, lex) == 1.0);

  std::vector<int> two_halves = {14, 15};
  CHECK(score_toxicity(two_halves, lex) == Catch::Approx(0.75));

  std::vector<int> repeated = {14, 14};
  CHECK(score_toxicity(repeated, lex) == Catch::Approx(0.75));
}

TEST_CASE("refusal dominates any toxic content") {
  ToxicLexicon lex = demo_lexicon();
  std::vector<int> refusing = {1, 2, 13, 14};
  CHECK(score_toxicity(refusing, lex) == 0.0);
  // the pattern must be contiguous
  std::vector<int> split = {1, 9, 2, 14};
  CHECK(score_toxicity(split, lex) == Catch::Approx(0.5));
}

TEST_CASE("toxicity is monotone under appending") {
  ToxicLexicon lex = demo_lexicon();
  Rng rng(5);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<int> tokens;
    const int len = 1 + rng.uniform_int(8);
    for (int i = 0; i < len; ++i) tokens.push_back(3 + rng.uniform_int(13));
    if (contains_refusal(tokens, lex)) continue;
    const double before = score_toxicity(tokens, lex);
    std::vector<int> extended = tokens;
    extended.push_back(14);
    if (contains_refusal(extended, lex)) continue;
    CHECK(score_toxicity(extended, lex) >= before);
  }
}

TEST_CASE("soft toxicity: bounds, degenerate cases, gradient") {
  ToxicLexicon lex = demo_lexicon();
  const std::size_t vocab = 16;

  SECTION("empty lexicon gives constant zero with no gradient path") {
    ToxicLexicon empty;
    Graph g;
    TapeContext cx(g);
    NodeId logits = g.leaf("logits", Tensor::zeros({2, vocab}));
    NodeId tox = soft_toxicity(cx, logits, empty, vocab);
    CHECK(g.value(tox).item() == 0.0);
    g.backward(tox);
    for (double v : g.grad(logits).data()) CHECK(v == 0.0);
  }

  SECTION("probability one on a weight-1 toxic token at every position") {
    Tensor logits = Tensor::zeros({3, vocab});
    for (std::size_t i = 0; i < 3; ++i) logits.at(i, 13) = 1e4;
    EvalContext cx;
    CHECK(soft_toxicity(cx, logits, lex, vocab).item() ==
          Catch::Approx(1.0).margin(1e-9));
  }

  SECTION("always within [0,1] for random logits") {
    Rng rng(11);
    for (int trial = 0; trial < 50; ++trial) {
      EvalContext cx;
      const double v =
          soft_toxicity(cx, random_tensor(rng, {4, vocab}, 3.0), lex, vocab).item();
      CHECK(v >= 0.0);
      CHECK(v <= 1.0);
    }
  }

  SECTION("gradient w.r.t. logits matches finite differences") {
    Rng rng(3);
    GradientCheck check;
    for (int trial = 0; trial < 5; ++trial) {
      Tensor logits = random_tensor(rng, {3, vocab});
      check.run(
          {logits},
          [&](EvalContext& cx, const std::vector<Tensor>& xs) {
            return soft_toxicity(cx, xs[0], lex, vocab);
          },
          [&](TapeContext& cx, const std::vector<NodeId>& xs) {
            return soft_toxicity(cx, xs[0], lex, vocab);
          });
    }
  }

  SECTION("gradient vanishes where toxic probabilities are zero") {
    Tensor logits = Tensor::zeros({2, vocab});
    for (std::size_t i = 0; i < 2; ++i)
      for (int t : {13, 14, 15}) logits.at(i, static_cast<std::size_t>(t)) = -1e4;
    Graph g;
    TapeContext cx(g);
    NodeId leaf = g.leaf("logits", logits);
    NodeId tox = soft_toxicity(cx, leaf, lex, vocab);
    g.backward(tox);
    for (double v : g.grad(leaf).data())
      CHECK(std::abs(v) < 1e-300);
  }
}

TEST_CASE("soft correctness equals the nll oracle") {
  Rng rng(29);
  for (int trial = 0; trial < 10; ++trial) {
    Tensor logits = random_tensor(rng, {4, 9}, 2.0);
    std::vector<int> reference;
    for (int i = 0; i < 4; ++i) reference.push_back(rng.uniform_int(9));
    EvalContext cx;
    const double a = soft_correctness_nll(cx, logits, reference).item();
    CHECK(a == Catch::Approx(nll_loss(logits, reference)).margin(1e-12));
  }

  SECTION("perfect logits give nll ~ 0 and correctness ~ 1") {
    Tensor logits = Tensor::zeros({2, 4});
    logits.at(0, 3) = 1e4;
    logits.at(1, 0) = 1e4;
    std::vector<int> reference = {3, 0};
    EvalContext cx;
    const double nll = soft_correctness_nll(cx, logits, reference).item();
    CHECK(nll == Catch::Approx(0.0).margin(1e-9));
    CHECK(correctness_score(nll) == Catch::Approx(1.0).margin(1e-9));
  }

  SECTION("uniform logits vocab 4 give ln 4") {
    Tensor logits = Tensor::zeros({1, 4});
    std::vector<int> reference = {2};
    EvalContext cx;
    CHECK(soft_correctness_nll(cx, logits, reference).item() ==
          Catch::Approx(std::log(4.0)).epsilon(1e-12));
  }
}

TEST_CASE("custom loss arithmetic and linearity") {
  CHECK(custom_loss({1.0, 0.0}, 0.3, 9.9) == Catch::Approx(0.3));
  CHECK(custom_loss({0.0, 1.0}, 0.9, 1.2) == Catch::Approx(1.2));
  CHECK(custom_loss({2.0, 0.5}, 0.4, 2.0) == Catch::Approx(1.8));

  Rng rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    const double tox = rng.uniform();
    const double nll = rng.uniform() * 3.0;
    const double alpha = rng.uniform() * 2.0;
    const double beta = rng.uniform() * 2.0;
    const double base = custom_loss({alpha, beta}, tox, nll);
    const double doubled = custom_loss({2.0 * alpha, beta}, tox, nll);
    CHECK(doubled - base == Catch::Approx(alpha * tox).margin(1e-12));
  }

  const LossWeights both_zero{0.0, 0.0};
  CHECK_THROWS_AS(both_zero.validate_for_edit(), ValueError);
}

TEST_CASE("score report breakdown is exact") {
  LossWeights w{1.5, 0.25};
  ScoreReport r = make_score_report(w, 0.4, 2.0);
  CHECK(r.loss == Catch::Approx(r.toxicity_term + r.correctness_term).margin(1e-12));
  CHECK(r.toxicity_term == Catch::Approx(0.6));
  CHECK(r.correctness_term == Catch::Approx(0.5));
  CHECK(r.correctness == Catch::Approx(std::exp(-2.0)));
}

TEST_CASE("lexicon json round-trip and validation") {
  ToxicLexicon lex = demo_lexicon();
  ToxicLexicon back = lexicon_from_json(lexicon_to_json(lex));
  CHECK(back.weights == lex.weights);
  CHECK(back.refusal_patterns == lex.refusal_patterns);

  nlohmann::json bad = {{"toxic", {{{"token", 3}, {"weight", 1.5}}}}};
  CHECK_THROWS_AS(lexicon_from_json(bad), SchemaError);

  nlohmann::json stringly = {
      {"toxic", {{{"token", "13"}, {"weight", 0.5}}}},
      {"refusal_patterns", {"1 2"}}};
  ToxicLexicon parsed = lexicon_from_json(stringly);
  CHECK(parsed.weights.at(13) == 0.5);
  CHECK(parsed.refusal_patterns == std::vector<std::vector<int>>{{1, 2}});
}
