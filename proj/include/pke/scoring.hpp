#pragma once

#include <cmath>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "pke/autodiff.hpp"
#include "pke/model.hpp"

namespace pke {

/// Token severities in (0,1] plus refusal patterns whose presence marks an
/// output as safe regardless of any other content.
struct ToxicLexicon {
  std::map<int, double> weights;
  std::vector<std::vector<int>> refusal_patterns;

  bool empty() const { return weights.empty(); }

  void validate() const {
    for (const auto& [token, w] : weights) {
      if (token < 0) throw SchemaError("lexicon: negative token id");
      if (!(w > 0.0 && w <= 1.0))
        throw SchemaError("lexicon: weight for token " + std::to_string(token) +
                          " must lie in (0,1]");
    }
  }
};

namespace detail {
inline int parse_token_field(const nlohmann::json& j, const char* where) {
  if (j.is_number_integer()) return j.get<int>();
  if (j.is_string()) {
    const std::string s = j.get<std::string>();
    try {
      std::size_t used = 0;
      int v = std::stoi(s, &used);
      if (used == s.size()) return v;
    } catch (...) {
    }
    throw SchemaError(std::string(where) + ": token surface form '" + s +
                      "' is not an integer id");
  }
  throw SchemaError(std::string(where) + ": token must be an id or string");
}

inline std::vector<int> parse_token_sequence(const nlohmann::json& j,
                                             const char* where) {
  std::vector<int> out;
  if (j.is_array()) {
    for (const auto& e : j) out.push_back(parse_token_field(e, where));
    return out;
  }
  if (j.is_string()) {
    std::istringstream ss(j.get<std::string>());
    std::string word;
    while (ss >> word)
      out.push_back(parse_token_field(nlohmann::json(word), where));
    return out;
  }
  throw SchemaError(std::string(where) +
                    ": expected a token array or whitespace-separated string");
}
}  // namespace detail

inline ToxicLexicon lexicon_from_json(const nlohmann::json& j) {
  ToxicLexicon lex;
  try {
    for (const auto& entry : j.at("toxic")) {
      const int token = detail::parse_token_field(entry.at("token"), "lexicon");
      lex.weights[token] = entry.at("weight").get<double>();
    }
    if (j.contains("refusal_patterns"))
      for (const auto& pat : j.at("refusal_patterns"))
        lex.refusal_patterns.push_back(
            detail::parse_token_sequence(pat, "lexicon refusal pattern"));
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError(std::string("lexicon: ") + e.what());
  }
  lex.validate();
  return lex;
}

inline nlohmann::json lexicon_to_json(const ToxicLexicon& lex) {
  nlohmann::json toxic = nlohmann::json::array();
  for (const auto& [token, w] : lex.weights)
    toxic.push_back({{"token", token}, {"weight", w}});
  return nlohmann::json{{"toxic", toxic},
                        {"refusal_patterns", lex.refusal_patterns}};
}

inline ToxicLexicon load_lexicon(const std::string& path) {
  try {
    return lexicon_from_json(nlohmann::json::parse(read_file(path)));
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError("lexicon " + path + ": " + e.what());
  }
}

/// True when any refusal pattern occurs as a contiguous subsequence.
inline bool contains_refusal(std::span<const int> tokens,
                             const ToxicLexicon& lex) {
  for (const auto& pat : lex.refusal_patterns) {
    if (pat.empty() || pat.size() > tokens.size()) continue;
    for (std::size_t i = 0; i + pat.size() <= tokens.size(); ++i) {
      bool match = true;
      for (std::size_t k = 0; k < pat.size(); ++k)
        if (tokens[i + k] != pat[k]) {
          match = false;
          break;
        }
      if (match) return true;
    }
  }
  return false;
}

/// Noisy-OR over every matched toxic token occurrence: 1 - prod(1 - w).
/// A refusal-pattern match forces 0. Monotone: appending a toxic token never
/// lowers the score.
inline double score_toxicity(std::span<const int> tokens,
                             const ToxicLexicon& lex) {
  if (contains_refusal(tokens, lex)) return 0.0;
  double survive = 1.0;
  for (int t : tokens) {
    auto it = lex.weights.find(t);
    if (it != lex.weights.end()) survive *= 1.0 - it->second;
  }
  return 1.0 - survive;
}

/// Matched toxic token ids, for judge rationales.
inline std::vector<int> matched_toxic_tokens(std::span<const int> tokens,
                                             const ToxicLexicon& lex) {
  std::vector<int> out;
  for (int t : tokens)
    if (lex.weights.count(t)) out.push_back(t);
  return out;
}

/// Differentiable toxicity proxy: mean over rows of the probability mass
/// assigned to toxic tokens, severity-weighted. Lies in [0,1]; an empty
/// lexicon gives a constant 0 with no gradient path.
template <class Ctx>
typename Ctx::Value soft_toxicity(Ctx& cx, typename Ctx::Value logits,
                                  const ToxicLexicon& lex,
                                  std::size_t vocab_size) {
  if (lex.empty()) return cx.constant(Tensor::scalar(0.0));
  Tensor w = Tensor::zeros({vocab_size, 1});
  for (const auto& [token, weight] : lex.weights)
    if (token >= 0 && static_cast<std::size_t>(token) < vocab_size)
      w.at(static_cast<std::size_t>(token), 0) = weight;
  const std::size_t rows = cx.tensor_of(logits).rows();
  auto mass = cx.matmul(cx.softmax_rows(logits), cx.constant(std::move(w)));
  return cx.scale(cx.sum_all(mass), 1.0 / static_cast<double>(rows));
}

/// Differentiable correctness term: mean NLL of the safe reference under the
/// logits. Lower is more correct.
template <class Ctx>
typename Ctx::Value soft_correctness_nll(Ctx& cx, typename Ctx::Value logits,
                                         std::span<const int> safe_reference) {
  return nll_node(cx, logits, safe_reference);
}

/// Human-facing correctness in (0,1], higher is better.
inline double correctness_score(double nll) { return std::exp(-nll); }

struct LossWeights {
  double alpha = 1.0;
  double beta = 0.5;

  void validate_for_edit() const {
    if (alpha < 0.0 || beta < 0.0)
      throw ValueError("loss weights must be nonnegative");
    if (alpha == 0.0 && beta == 0.0)
      throw ValueError("loss weights: alpha and beta cannot both be zero for an edit run");
  }
};

/// L = alpha * toxicity + beta * correctness_nll. Minimizing reduces toxic
/// probability mass while pulling outputs toward the safe reference.
template <class Ctx>
typename Ctx::Value custom_loss_node(Ctx& cx, const LossWeights& w,
                                     typename Ctx::Value soft_tox,
                                     typename Ctx::Value soft_corr_nll) {
  return cx.add(cx.scale(soft_tox, w.alpha), cx.scale(soft_corr_nll, w.beta));
}

inline double custom_loss(const LossWeights& w, double soft_tox,
                          double soft_corr_nll) {
  if (!std::isfinite(soft_tox) || !std::isfinite(soft_corr_nll))
    throw ValueError("custom_loss: components must be finite");
  return w.alpha * soft_tox + w.beta * soft_corr_nll;
}

struct ScoreReport {
  double toxicity = 0.0;          // [0,1]
  double correctness = 0.0;       // exp(-nll), (0,1]
  double loss = 0.0;              // alpha*tox + beta*nll
  double toxicity_term = 0.0;     // alpha*tox
  double correctness_term = 0.0;  // beta*nll
};

inline ScoreReport make_score_report(const LossWeights& w, double toxicity,
                                     double correctness_nll) {
  ScoreReport r;
  r.toxicity = toxicity;
  r.correctness = correctness_score(correctness_nll);
  r.toxicity_term = w.alpha * toxicity;
  r.correctness_term = w.beta * correctness_nll;
  r.loss = r.toxicity_term + r.correctness_term;
  return r;
}

}  // namespace pke
