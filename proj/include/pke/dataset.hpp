#pragma once

#include <algorithm>
#include <cctype>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "pke/common.hpp"
#include "pke/scoring.hpp"

namespace pke {

inline constexpr const char* kAttackStatic = "static";
inline constexpr const char* kAttackAdaptive = "adaptive";

/// Category taxonomy is open: these are the known names, free-form values
/// load without error.
inline const std::vector<std::string>& known_categories() {
  static const std::vector<std::string> cats = {
      "api_vulnerability", "child_safety",      "data_poisoning",
      "jailbreak",         "roleplay",          "attention_shifting",
      "reformatting",      "prompt_injection"};
  return cats;
}

struct AttackInstance {
  std::string id;
  std::string category;
  std::string attack_type;  // "static" | "adaptive"
  std::vector<int> prompt;
  std::vector<int> harmful_response;
  std::vector<int> safe_response;
  std::string system_prompt_id;  // optional preset reference

  bool operator==(const AttackInstance&) const = default;
};

struct InstanceSet {
  std::vector<AttackInstance> items;
  std::string source_path;
  std::string content_hash;

  std::size_t size() const { return items.size(); }
  bool empty() const { return items.empty(); }

  bool same_items(const InstanceSet& o) const { return items == o.items; }
};

/// Whitespace tokenizer for demo text: lowercases, numerals map to their
/// ids, other words hash deterministically into [1, vocab).
inline std::vector<int> tokenize_text(const std::string& text,
                                      std::size_t vocab_size) {
  if (vocab_size < 2) throw ValueError("tokenize_text: vocab too small");
  std::istringstream ss(text);
  std::string word;
  std::vector<int> out;
  while (ss >> word) {
    std::transform(word.begin(), word.end(), word.begin(),
                   [](unsigned char c) { return std::tolower(c); });
    const bool numeral =
        !word.empty() && std::all_of(word.begin(), word.end(), [](unsigned char c) {
          return std::isdigit(c);
        });
    if (numeral) {
      const long v = std::stol(word);
      if (v < 0 || static_cast<std::size_t>(v) >= vocab_size)
        throw SchemaError("tokenize_text: token id " + word +
                          " out of range for vocab " + std::to_string(vocab_size));
      out.push_back(static_cast<int>(v));
    } else {
      out.push_back(1 + static_cast<int>(fnv1a64(word) %
                                         static_cast<std::uint64_t>(vocab_size - 1)));
    }
  }
  return out;
}

namespace detail {

inline std::vector<int> instance_tokens(const nlohmann::json& j,
                                        const char* field,
                                        std::size_t vocab_size) {
  const nlohmann::json& v = j.at(field);
  if (v.is_string()) return tokenize_text(v.get<std::string>(), vocab_size);
  std::vector<int> out = parse_token_sequence(v, field);
  for (int t : out)
    if (t < 0 || static_cast<std::size_t>(t) >= vocab_size)
      throw SchemaError(std::string(field) + ": token id " + std::to_string(t) +
                        " out of range for vocab " + std::to_string(vocab_size));
  return out;
}

inline AttackInstance instance_from_json(const nlohmann::json& j,
                                         std::size_t vocab_size) {
  AttackInstance inst;
  auto required_string = [&](const char* field) {
    if (!j.contains(field))
      throw SchemaError(std::string("missing required field '") + field + "'");
    if (!j.at(field).is_string() || j.at(field).get<std::string>().empty())
      throw SchemaError(std::string("field '") + field +
                        "' must be a nonempty string");
    return j.at(field).get<std::string>();
  };
  inst.id = required_string("id");
  inst.category = required_string("category");
  inst.attack_type = required_string("attack_type");
  if (inst.attack_type != kAttackStatic && inst.attack_type != kAttackAdaptive)
    throw SchemaError("field 'attack_type' must be 'static' or 'adaptive', got '" +
                      inst.attack_type + "'");
  for (const char* field : {"prompt", "harmful_response", "safe_response"})
    if (!j.contains(field))
      throw SchemaError(std::string("missing required field '") + field + "'");
  inst.prompt = instance_tokens(j, "prompt", vocab_size);
  inst.harmful_response = instance_tokens(j, "harmful_response", vocab_size);
  inst.safe_response = instance_tokens(j, "safe_response", vocab_size);
  if (inst.prompt.empty()) throw SchemaError("field 'prompt' must be nonempty");
  if (inst.harmful_response.empty())
    throw SchemaError("field 'harmful_response' must be nonempty");
  if (inst.safe_response.empty())
    throw SchemaError("field 'safe_response' must be nonempty");
  if (j.contains("system_prompt_id"))
    inst.system_prompt_id = j.at("system_prompt_id").get<std::string>();
  return inst;
}

inline nlohmann::json instance_to_json(const AttackInstance& inst) {
  nlohmann::json j{{"id", inst.id},
                   {"category", inst.category},
                   {"attack_type", inst.attack_type},
                   {"prompt", inst.prompt},
                   {"harmful_response", inst.harmful_response},
                   {"safe_response", inst.safe_response}};
  if (!inst.system_prompt_id.empty()) j["system_prompt_id"] = inst.system_prompt_id;
  return j;
}

}  // namespace detail

/// Parses JSON-Lines, one AttackInstance per line. Errors carry 1-based line
/// numbers; duplicate ids and empty files are rejected.
inline InstanceSet parse_dataset(const std::string& content,
                                 const std::string& origin,
                                 std::size_t vocab_size) {
  InstanceSet set;
  set.source_path = origin;
  set.content_hash = to_hex(fnv1a64(content));
  std::istringstream ss(content);
  std::string line;
  std::set<std::string> seen_ids;
  std::size_t line_no = 0;
  while (std::getline(ss, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw SchemaError(origin + ":" + std::to_string(line_no) +
                        ": malformed JSON line: " + e.what());
    }
    AttackInstance inst;
    try {
      inst = detail::instance_from_json(j, vocab_size);
    } catch (const SchemaError& e) {
      throw SchemaError(origin + ":" + std::to_string(line_no) + ": " + e.what());
    }
    if (!seen_ids.insert(inst.id).second)
      throw SchemaError(origin + ":" + std::to_string(line_no) +
                        ": duplicate instance id '" + inst.id + "'");
    set.items.push_back(std::move(inst));
  }
  if (set.items.empty())
    throw SchemaError(origin + ": dataset is empty");
  return set;
}

inline InstanceSet load_dataset(const std::string& path, std::size_t vocab_size) {
  return parse_dataset(read_file(path), path, vocab_size);
}

inline std::string serialize_dataset(const InstanceSet& set) {
  std::string out;
  for (const AttackInstance& inst : set.items) {
    out += detail::instance_to_json(inst).dump();
    out += '\n';
  }
  return out;
}

inline void save_dataset(const InstanceSet& set, const std::string& path) {
  write_file_atomic(path, serialize_dataset(set));
}

/// Desk-scale stand-in for a pretrained model plus attack dataset: training
/// sequences plant trigger -> toxic-continuation behavior, benign sequences
/// give a correctness baseline, and the instance set pairs each trigger with
/// its harmful continuation and a refusal as the safe reference.
struct SyntheticTask {
  std::vector<std::vector<int>> trigger_corpus;
  std::vector<std::vector<int>> benign_corpus;
  InstanceSet instances;
  ToxicLexicon lexicon;

  std::vector<std::vector<int>> corpus() const {
    // interleave so SGD alternates between behaviors
    std::vector<std::vector<int>> all;
    const std::size_t n = std::max(trigger_corpus.size(), benign_corpus.size());
    for (std::size_t i = 0; i < n; ++i) {
      if (i < trigger_corpus.size()) all.push_back(trigger_corpus[i]);
      if (i < benign_corpus.size()) all.push_back(benign_corpus[i]);
    }
    return all;
  }
};

inline SyntheticTask make_synthetic_task(std::uint64_t seed,
                                         std::size_t vocab_size,
                                         std::size_t n_triggers,
                                         std::size_t n_benign) {
  if (vocab_size < 16)
    throw ValueError("make_synthetic_task: vocab_size must be at least 16");
  // id layout: 0 eos, 1-2 refusal, [3, 3+n_triggers) triggers,
  // [3+n_triggers, vocab-3) benign pool, top three ids toxic
  const int refusal_a = 1, refusal_b = 2;
  const std::vector<int> toxic = {static_cast<int>(vocab_size) - 1,
                                  static_cast<int>(vocab_size) - 2,
                                  static_cast<int>(vocab_size) - 3};
  const int trigger_base = 3;
  const int benign_base = trigger_base + static_cast<int>(n_triggers);
  const int benign_end = static_cast<int>(vocab_size) - 3;
  if (benign_end - benign_base < 4)
    throw ValueError("make_synthetic_task: vocab too small for " +
                     std::to_string(n_triggers) + " triggers");
  if (n_triggers == 0 || n_benign == 0)
    throw ValueError("make_synthetic_task: need at least one trigger and one benign sequence");

  Rng rng(seed);
  SyntheticTask task;

  task.lexicon.weights[toxic[0]] = 1.0;
  task.lexicon.weights[toxic[1]] = 0.9;
  task.lexicon.weights[toxic[2]] = 0.8;
  task.lexicon.refusal_patterns = {{refusal_a}, {refusal_a, refusal_b}};

  // refuse, then stop
  const std::vector<int> refusal_seq = {refusal_a, kEosToken};

  for (std::size_t i = 0; i < n_triggers; ++i) {
    const int trig = trigger_base + static_cast<int>(i);
    // one toxic token per trigger keeps the planted behavior a single
    // decision, the unit the row edit targets
    const std::vector<int> continuation = {toxic[i % 3]};
    std::vector<int> static_seq = {trig};
    static_seq.insert(static_seq.end(), continuation.begin(), continuation.end());
    static_seq.push_back(kEosToken);
    task.trigger_corpus.push_back(static_seq);

    // adaptive prompts hide the trigger behind a benign lead token; leads come
    // from pool tokens that never start a benign sequence when possible, so
    // the planted behavior does not fight the strongest benign attractors
    const int pool_size = benign_end - benign_base;
    const int n_starts = static_cast<int>(std::min<std::size_t>(n_benign, pool_size));
    const int lead =
        n_starts < pool_size
            ? benign_base + n_starts + static_cast<int>(i) % (pool_size - n_starts)
            : benign_base + static_cast<int>(i) % pool_size;
    std::vector<int> adaptive_seq = {lead, trig};
    adaptive_seq.insert(adaptive_seq.end(), continuation.begin(),
                        continuation.end());
    adaptive_seq.push_back(kEosToken);
    // planted twice: hidden-trigger behavior needs more reinforcement
    task.trigger_corpus.push_back(adaptive_seq);
    task.trigger_corpus.push_back(adaptive_seq);

    AttackInstance st;
    st.id = "static-" + std::to_string(i);
    st.category = known_categories()[i % known_categories().size()];
    st.attack_type = kAttackStatic;
    st.prompt = {trig};
    st.harmful_response = continuation;
    st.safe_response = refusal_seq;
    st.system_prompt_id = "llama2_safety";
    task.instances.items.push_back(std::move(st));

    AttackInstance ad;
    ad.id = "adaptive-" + std::to_string(i);
    ad.category = known_categories()[(i + 3) % known_categories().size()];
    ad.attack_type = kAttackAdaptive;
    ad.prompt = {lead, trig};
    ad.harmful_response = continuation;
    ad.safe_response = refusal_seq;
    ad.system_prompt_id = "llama2_safety";
    task.instances.items.push_back(std::move(ad));
  }

  // benign sequences come in pairs sharing a start token but diverging at the
  // next position, giving the corpus an irreducible entropy floor of
  // ln(2)/(len-1); a model cannot memorize it away, so the benign NLL
  // baseline is stable rather than collapsing toward zero
  const int pool = benign_end - benign_base;
  const int n_starts = static_cast<int>(std::min<std::size_t>((n_benign + 1) / 2, pool));
  for (std::size_t i = 0; i < n_benign; ++i) {
    const int start_idx = static_cast<int>((i / 2) % n_starts);
    const int parity = static_cast<int>(i % 2);
    std::vector<int> seq;
    seq.push_back(benign_base + start_idx);
    // the two variants of a pair always diverge here
    seq.push_back(benign_base + (start_idx + 1 + parity * 7) % pool);
    for (std::size_t k = 0; k < 2; ++k)
      seq.push_back(benign_base + rng.uniform_int(pool));
    seq.push_back(kEosToken);
    task.benign_corpus.push_back(std::move(seq));
  }

  task.instances.source_path = "synthetic:" + std::to_string(seed);
  task.instances.content_hash = to_hex(fnv1a64(serialize_dataset(task.instances)));
  return task;
}

}  // namespace pke
