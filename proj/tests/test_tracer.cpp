#include <catch2/catch_amalgamated.hpp>

#include "pke/tracer.hpp"
#include "test_helpers.hpp"

using namespace pke;
using pke_test::tiny_config;

namespace {

InstanceSet two_instances() {
  InstanceSet set;
  AttackInstance a;
  a.id = "i0";
  a.category = "jailbreak";
  a.attack_type = kAttackStatic;
  a.prompt = {3};
  a.harmful_response = {13, 14};
  a.safe_response = {1, 2};
  AttackInstance b;
  b.id = "i1";
  b.category = "jailbreak";
  b.attack_type = kAttackAdaptive;
  b.prompt = {4, 3};
  b.harmful_response = {15};
  b.safe_response = {1, 2};
  set.items = {a, b};
  set.content_hash = "fixture";
  return set;
}

ToxicLexicon small_lexicon() {
  ToxicLexicon lex;
  lex.weights[13] = 1.0;
  lex.weights[14] = 0.9;
  lex.weights[15] = 0.8;
  lex.refusal_patterns = {{1, 2}};
  return lex;
}

}  // namespace

TEST_CASE("snapshot isolates and labels") {
  ModelConfig cfg = tiny_config(3);
  ParameterStore store = init_model(cfg);
  Snapshot snap = snapshot(cfg, store, "before");
  Snapshot snap2 = snapshot(cfg, store, "also");
  CHECK(snap.params == snap2.params);
  CHECK(snap.label == "before");

  store["unembed"].at(0) += 100.0;
  CHECK(!(snap.params == store));
  CHECK(snap.params.at("unembed").at(0) != store.at("unembed").at(0));
}

TEST_CASE("weight_delta basics and single-element case") {
  ModelConfig cfg = tiny_config(4);
  ParameterStore store = init_model(cfg);
  Snapshot before = snapshot(cfg, store, "before");

  SECTION("identical snapshots give all-zero deltas") {
    WeightDelta d = weight_delta(before, before);
    for (double v : d.per_layer) CHECK(v == 0.0);
    CHECK(d.non_block == 0.0);
  }

  SECTION("one +3 element in layer 1 mlp.w2") {
    ParameterStore after = store;
    after["layer.1.mlp.w2"].at(2, 3) += 3.0;
    WeightDelta d = weight_delta(before, snapshot(cfg, after, "after"));
    CHECK(d.per_layer[0] == 0.0);
    CHECK(d.per_layer[1] == Catch::Approx(3.0).margin(1e-12));
    CHECK(d.non_block == 0.0);
    CHECK(d.per_name.at("layer.1.mlp.w2") == Catch::Approx(3.0));
  }

  SECTION("random perturbation matches the sum-of-squares oracle") {
    Rng rng(6);
    ParameterStore after = store;
    for (auto& [name, tensor] : after)
      for (std::size_t i = 0; i < tensor.numel(); ++i)
        tensor.at(i) += 0.01 * rng.normal();
    WeightDelta d = weight_delta(before, snapshot(cfg, after, "after"));
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
      long double want_sq = 0.0L;
      for (const auto& [name, tensor] : store) {
        if (param_layer_index(name) != l) continue;
        const Tensor& post = after.at(name);
        for (std::size_t i = 0; i < tensor.numel(); ++i) {
          const long double diff = post.at(i) - tensor.at(i);
          want_sq += diff * diff;
        }
      }
      CHECK(std::abs(d.per_layer[l] - std::sqrt((double)want_sq)) < 1e-10);
    }
  }

  SECTION("mismatched stores are rejected") {
    ModelConfig other = cfg;
    other.d_ff += 1;
    Snapshot bad = snapshot(other, init_model(other), "after");
    CHECK_THROWS_AS(weight_delta(before, bad), ShapeError);
  }
}

TEST_CASE("weight_delta symmetry, triangle inequality, scale equivariance") {
  ModelConfig cfg = tiny_config(8);
  Rng rng(18);
  ParameterStore base = init_model(cfg);

  auto perturbed = [&](double scale_factor) {
    Rng local(99);  // same direction every call
    ParameterStore p = base;
    for (auto& [name, tensor] : p)
      for (std::size_t i = 0; i < tensor.numel(); ++i)
        tensor.at(i) += scale_factor * 0.01 * local.normal();
    return p;
  };

  Snapshot a = snapshot(cfg, base, "a");
  Snapshot b = snapshot(cfg, perturbed(1.0), "b");
  Snapshot c = snapshot(cfg, perturbed(-2.3), "c");

  WeightDelta ab = weight_delta(a, b);
  WeightDelta ba = weight_delta(b, a);
  WeightDelta ac = weight_delta(a, c);
  WeightDelta bc = weight_delta(b, c);
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    CHECK(ab.per_layer[l] == Catch::Approx(ba.per_layer[l]).margin(1e-9));
    CHECK(ac.per_layer[l] <= ab.per_layer[l] + bc.per_layer[l] + 1e-9);
  }

  // scaling the perturbation by c > 0 scales the delta by c
  Snapshot scaled = snapshot(cfg, perturbed(3.0), "scaled");
  WeightDelta d1 = weight_delta(a, b);
  WeightDelta d3 = weight_delta(a, scaled);
  for (std::size_t l = 0; l < cfg.n_layers; ++l)
    CHECK(d3.per_layer[l] == Catch::Approx(3.0 * d1.per_layer[l]).margin(1e-9));
}

TEST_CASE("gradient_trace: zero weights, determinism, fd probes") {
  ModelConfig cfg = tiny_config(10);
  ParameterStore store = init_model(cfg);
  InstanceSet instances = two_instances();
  ToxicLexicon lexicon = small_lexicon();

  SECTION("alpha = beta = 0 gives an all-zero trace") {
    GradientTrace t = gradient_trace(cfg, store, instances, lexicon, {0.0, 0.0});
    for (double v : t.norms.per_layer) CHECK(v == 0.0);
    CHECK(t.norms.non_block == 0.0);
  }

  SECTION("bit-identical across repeated runs") {
    LossWeights w{1.0, 0.5};
    GradientTrace t1 = gradient_trace(cfg, store, instances, lexicon, w);
    GradientTrace t2 = gradient_trace(cfg, store, instances, lexicon, w);
    CHECK(t1.norms.per_layer == t2.norms.per_layer);
    CHECK(t1.norms.per_name == t2.norms.per_name);
    CHECK(t1.loss_value == t2.loss_value);
  }

  SECTION("per-layer norms match finite-difference probes") {
    LossWeights w{1.0, 0.5};
    GradientTrace t = gradient_trace(cfg, store, instances, lexicon, w);

    auto loss_at = [&](const ParameterStore& p) {
      SurrogateLoss l = build_surrogate_loss(cfg, p, instances, lexicon, w);
      return l.value;
    };

    const double step = 1e-5;
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
      long double norm_sq = 0.0L;
      for (const auto& [name, shape] : expected_param_shapes(cfg)) {
        if (param_layer_index(name) != l) continue;
        Tensor& base = store.at(name);
        for (std::size_t i = 0; i < base.numel(); ++i) {
          const double keep = base.at(i);
          base.at(i) = keep + step;
          const double plus = loss_at(store);
          base.at(i) = keep - step;
          const double minus = loss_at(store);
          base.at(i) = keep;
          const double fd = (plus - minus) / (2.0 * step);
          norm_sq += (long double)fd * fd;
        }
      }
      const double fd_norm = std::sqrt((double)norm_sq);
      CHECK(t.norms.per_layer[l] ==
            Catch::Approx(fd_norm).epsilon(1e-3).margin(1e-8));
    }
  }
}

TEST_CASE("leaves outside the computation aggregate to zero per-layer norms") {
  ModelConfig cfg = tiny_config(12);
  ParameterStore store = init_model(cfg);
  Graph g;
  auto leaves = detail::register_leaves(g, store);
  TapeContext cx(g);
  // loss touches only layer 0's mlp.w2
  NodeId root = cx.sum_all(leaves.at("layer.0.mlp.w2"));
  g.backward(root);
  PerLayerNorms norms = detail::aggregate_norms(cfg, [&](const std::string& n) {
    return g.grad(leaves.at(n));
  });
  CHECK(norms.per_layer[0] > 0.0);
  CHECK(norms.per_layer[1] == 0.0);
  CHECK(norms.non_block == 0.0);
}

TEST_CASE("context pair construction") {
  CHECK_THROWS_AS(ContextPair({}, {1}, "x"), ValueError);
  CHECK_THROWS_AS(ContextPair({1, 2}, {3, 4}, "x"), ValueError);
  ContextPair ok({1, 2}, {1, 3}, "ok");
  CHECK(ok.harmful_context == std::vector<int>{1, 2});

  AttackInstance inst;
  inst.id = "z";
  inst.prompt = {5};
  inst.harmful_response = {13};
  inst.safe_response = {1, 2};
  ContextPair pair = ContextPair::from_instance(inst);
  CHECK(pair.harmful_context == std::vector<int>{5, 13});
  CHECK(pair.safe_context == std::vector<int>{5, 1, 2});
}

TEST_CASE("activation_delta: identical contexts, additivity, consistency") {
  ModelConfig cfg = tiny_config(14);
  ParameterStore store = init_model(cfg);

  SECTION("identical contexts give all-zero deltas") {
    ContextPair same({3, 13}, {3, 13}, "same");
    ActivationDelta d = activation_delta(cfg, store, same);
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
      CHECK(d.per_layer_total[l] == 0.0);
      for (double v : d.per_neuron[l]) CHECK(v == 0.0);
    }
  }

  SECTION("per-layer totals equal the sum over neurons") {
    ContextPair pair({3, 13, 14}, {3, 1, 2}, "p");
    ActivationDelta d = activation_delta(cfg, store, pair);
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
      long double sum = 0.0L;
      for (double v : d.per_neuron[l]) {
        CHECK(v >= 0.0);
        sum += v;
      }
      CHECK(std::abs(d.per_layer_total[l] - (double)sum) < 1e-9);
    }
  }
}

TEST_CASE("activation_delta matches a hand computation on a rigged model") {
  // One block, attention silenced (wv = wo = 0), w1 = identity: the neuron
  // activations are gelu of the layer-normed embedding, computable by hand.
  ModelConfig cfg;
  cfg.vocab_size = 16;
  cfg.d_model = 4;
  cfg.n_layers = 1;
  cfg.n_heads = 1;
  cfg.d_ff = 4;
  cfg.max_seq = 4;
  cfg.seed = 0;
  ParameterStore store = init_model(cfg);
  for (const char* name :
       {"layer.0.attn.wq", "layer.0.attn.wk", "layer.0.attn.wv", "layer.0.attn.wo"})
    store[name] = Tensor::zeros({4, 4});
  Tensor w1 = Tensor::zeros({4, 4});
  for (std::size_t i = 0; i < 4; ++i) w1.at(i, i) = 1.0;
  store["layer.0.mlp.w1"] = w1;
  store["embed.pos"] = Tensor::zeros({4, 4});
  Tensor tok = Tensor::zeros({16, 4});
  const std::vector<double> row1 = {1.0, 2.0, 3.0, 4.0};
  const std::vector<double> row2 = {-2.0, 0.5, 0.0, 1.0};
  const std::vector<double> row3 = {4.0, 4.0, 4.0, 4.0};
  for (std::size_t j = 0; j < 4; ++j) {
    tok.at(1, j) = row1[j];
    tok.at(2, j) = row2[j];
    tok.at(3, j) = row3[j];
  }
  store["embed.tok"] = tok;

  auto hand_neuron = [&](const std::vector<double>& row, std::size_t j) {
    // layer norm with population variance and eps, then gelu (tanh form)
    double mean = 0.0;
    for (double v : row) mean += v;
    mean /= 4.0;
    double var = 0.0;
    for (double v : row) var += (v - mean) * (v - mean);
    var /= 4.0;
    const double xhat = (row[j] - mean) / std::sqrt(var + 1e-5);
    const double u = std::sqrt(2.0 / 3.14159265358979323846) *
                     (xhat + 0.044715 * xhat * xhat * xhat);
    return 0.5 * xhat * (1.0 + std::tanh(u));
  };

  ContextPair pair({1, 2}, {1, 3}, "hand");
  ActivationDelta d = activation_delta(cfg, store, pair);
  for (std::size_t j = 0; j < 4; ++j) {
    const double harm = 0.5 * (hand_neuron(row1, j) + hand_neuron(row2, j));
    const double safe = 0.5 * (hand_neuron(row1, j) + hand_neuron(row3, j));
    CHECK(d.per_neuron[0][j] ==
          Catch::Approx(std::abs(harm - safe)).margin(1e-9));
  }
}

TEST_CASE("mean_activation_delta averages per-instance deltas") {
  ModelConfig cfg = tiny_config(15);
  ParameterStore store = init_model(cfg);
  InstanceSet instances = two_instances();
  ActivationDelta mean = mean_activation_delta(cfg, store, instances);
  ActivationDelta d0 = activation_delta(
      cfg, store, ContextPair::from_instance(instances.items[0]));
  ActivationDelta d1 = activation_delta(
      cfg, store, ContextPair::from_instance(instances.items[1]));
  for (std::size_t l = 0; l < cfg.n_layers; ++l)
    for (std::size_t j = 0; j < cfg.d_ff; ++j)
      CHECK(mean.per_neuron[l][j] ==
            Catch::Approx(0.5 * (d0.per_neuron[l][j] + d1.per_neuron[l][j]))
                .margin(1e-12));
}

TEST_CASE("layer_toxicity: degenerate scorers and the final-layer identity") {
  ModelConfig cfg = tiny_config(16);
  ParameterStore store = init_model(cfg);
  InstanceSet instances = two_instances();
  ToxicLexicon lexicon = small_lexicon();

  SECTION("zero scorer gives zero profile") {
    LayerToxicityProfile p = layer_toxicity(
        cfg, store, instances, [](std::span<const int>) { return 0.0; }, 4);
    for (double v : p.mean_toxicity) CHECK(v == 0.0);
  }

  SECTION("N = 1 equals the single instance score") {
    InstanceSet one;
    one.items = {instances.items[0]};
    one.content_hash = "one";
    LayerToxicityProfile p =
        layer_toxicity(cfg, store, one, lexicon_scorer(lexicon), 4);
    std::vector<int> full =
        logit_lens_generate(cfg, store, one.items[0].prompt, 0, 4);
    std::span<const int> cont(full.data() + 1, full.size() - 1);
    CHECK(p.mean_toxicity[0] == score_toxicity(cont, lexicon));
  }

  SECTION("last layer equals direct generate + score") {
    const std::size_t horizon = 4;
    LayerToxicityProfile p =
        layer_toxicity(cfg, store, instances, lexicon_scorer(lexicon), horizon);
    double want = 0.0;
    for (const AttackInstance& inst : instances.items) {
      std::vector<int> full = generate(cfg, store, inst.prompt, horizon);
      std::span<const int> cont(full.data() + inst.prompt.size(),
                                full.size() - inst.prompt.size());
      want += score_toxicity(cont, lexicon);
    }
    want /= static_cast<double>(instances.size());
    CHECK(p.mean_toxicity[cfg.n_layers - 1] == Catch::Approx(want).margin(1e-12));
  }

  SECTION("values stay in [0,1]") {
    LayerToxicityProfile p =
        layer_toxicity(cfg, store, instances, lexicon_scorer(lexicon), 4);
    for (double v : p.mean_toxicity) {
      CHECK(v >= 0.0);
      CHECK(v <= 1.0);
    }
  }
}

TEST_CASE("trace bundle export is layer-complete and sorted") {
  ModelConfig cfg = tiny_config(20);
  ParameterStore store = init_model(cfg);
  InstanceSet instances = two_instances();
  ToxicLexicon lexicon = small_lexicon();

  TraceBundle bundle;
  bundle.before_label = "ref";
  bundle.after_label = "cur";
  Snapshot snap = snapshot(cfg, store, "ref");
  bundle.weights = weight_delta(snap, snap);
  bundle.gradients = gradient_trace(cfg, store, instances, lexicon, {1.0, 0.5});
  bundle.activations = mean_activation_delta(cfg, store, instances);
  bundle.toxicity =
      layer_toxicity(cfg, store, instances, lexicon_scorer(lexicon), 4);
  bundle.top_k = 5;

  nlohmann::json j = trace_bundle_to_json(bundle);
  CHECK(j.at("layers").size() == cfg.n_layers);
  const auto& top = j.at("top_neurons");
  CHECK(top.size() == 5);
  for (std::size_t i = 1; i < top.size(); ++i)
    CHECK(top[i - 1].at("activation_delta").get<double>() >=
          top[i].at("activation_delta").get<double>());
  CHECK(j.at("snapshots").at("before") == "ref");
}
