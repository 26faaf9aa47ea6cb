#include <catch2/catch_amalgamated.hpp>

#include "pke/dataset.hpp"
#include "pke/model.hpp"
#include "test_helpers.hpp"

using namespace pke;
using pke_test::TempDir;

namespace {
const char* kValidLine =
    R"({"id":"a1","category":"jailbreak","attack_type":"static","prompt":[3],"harmful_response":[13,14],"safe_response":[1,2]})";
}

TEST_CASE("load_dataset parses valid lines in order") {
  TempDir dir("ds");
  std::string content;
  content += kValidLine;
  content += "\n";
  content +=
      R"({"id":"a2","category":"child_safety","attack_type":"adaptive","prompt":[4,3],"harmful_response":[15],"safe_response":[1,2],"system_prompt_id":"llama2_safety"})";
  content += "\n";
  content +=
      R"({"id":"a3","category":"made_up_category","attack_type":"static","prompt":"3 4","harmful_response":[13],"safe_response":[1,2]})";
  content += "\n";
  const std::string path = dir.file("data.jsonl");
  write_file_atomic(path, content);

  InstanceSet set = load_dataset(path, 16);
  REQUIRE(set.size() == 3);
  CHECK(set.items[0].id == "a1");
  CHECK(set.items[1].id == "a2");
  CHECK(set.items[2].id == "a3");
  CHECK(set.items[1].attack_type == kAttackAdaptive);
  CHECK(set.items[1].system_prompt_id == "llama2_safety");
  CHECK(set.items[2].category == "made_up_category");  // open taxonomy
  CHECK(set.items[2].prompt == std::vector<int>{3, 4});
  CHECK(set.source_path == path);
  CHECK(!set.content_hash.empty());
}

TEST_CASE("empty dataset is an error, not an empty set") {
  TempDir dir("ds_empty");
  const std::string path = dir.file("empty.jsonl");
  write_file_atomic(path, "");
  CHECK_THROWS_AS(load_dataset(path, 16), SchemaError);
  write_file_atomic(path, "\n  \n");
  CHECK_THROWS_AS(load_dataset(path, 16), SchemaError);
}

TEST_CASE("schema errors cite the line and field") {
  SECTION("missing attack_type") {
    const std::string line =
        R"({"id":"x","category":"jailbreak","prompt":[3],"harmful_response":[13],"safe_response":[1]})";
    try {
      parse_dataset(line, "inline", 16);
      FAIL("expected schema error");
    } catch (const SchemaError& e) {
      const std::string msg = e.what();
      CHECK(msg.find("attack_type") != std::string::npos);
      CHECK(msg.find(":1") != std::string::npos);
    }
  }

  SECTION("malformed json names the line number") {
    std::string content = std::string(kValidLine) + "\n{not json}\n";
    try {
      parse_dataset(content, "inline", 16);
      FAIL("expected schema error");
    } catch (const SchemaError& e) {
      CHECK(std::string(e.what()).find(":2") != std::string::npos);
    }
  }

  SECTION("duplicate id") {
    std::string content = std::string(kValidLine) + "\n" + kValidLine + "\n";
    CHECK_THROWS_AS(parse_dataset(content, "inline", 16), SchemaError);
  }

  SECTION("bad attack_type literal") {
    const std::string line =
        R"({"id":"x","category":"c","attack_type":"dynamic","prompt":[3],"harmful_response":[13],"safe_response":[1]})";
    CHECK_THROWS_AS(parse_dataset(line, "inline", 16), SchemaError);
  }

  SECTION("token out of vocab range") {
    const std::string line =
        R"({"id":"x","category":"c","attack_type":"static","prompt":[99],"harmful_response":[13],"safe_response":[1]})";
    CHECK_THROWS_AS(parse_dataset(line, "inline", 16), SchemaError);
  }
}

TEST_CASE("dataset round-trips through serialization") {
  SyntheticTask task = make_synthetic_task(11, 32, 4, 4);
  TempDir dir("ds_rt");
  const std::string path = dir.file("rt.jsonl");
  save_dataset(task.instances, path);
  InstanceSet loaded = load_dataset(path, 32);
  CHECK(loaded.same_items(task.instances));
}

TEST_CASE("tokenize_text maps numerals directly and words deterministically") {
  CHECK(tokenize_text("3 14 0", 16) == std::vector<int>{3, 14, 0});
  const auto a = tokenize_text("Hello World", 16);
  const auto b = tokenize_text("hello world", 16);
  CHECK(a == b);  // lowercased
  for (int t : a) {
    CHECK(t >= 1);
    CHECK(t < 16);
  }
  CHECK_THROWS_AS(tokenize_text("99", 16), SchemaError);
}

TEST_CASE("synthetic task is deterministic and honors its contract") {
  SyntheticTask a = make_synthetic_task(7, 32, 6, 8);
  SyntheticTask b = make_synthetic_task(7, 32, 6, 8);
  CHECK(a.instances.same_items(b.instances));
  CHECK(a.trigger_corpus == b.trigger_corpus);
  CHECK(a.benign_corpus == b.benign_corpus);
  CHECK(a.lexicon.weights == b.lexicon.weights);

  SyntheticTask c = make_synthetic_task(8, 32, 6, 8);
  CHECK(!(a.benign_corpus == c.benign_corpus));

  SECTION("harmful responses carry lexicon tokens, safe responses never") {
    for (const AttackInstance& inst : a.instances.items) {
      CHECK(score_toxicity(inst.harmful_response, a.lexicon) > 0.0);
      double safe_mass = 0.0;
      for (int t : inst.safe_response)
        if (a.lexicon.weights.count(t)) safe_mass += 1.0;
      CHECK(safe_mass == 0.0);
      CHECK(score_toxicity(inst.safe_response, a.lexicon) == 0.0);
    }
  }

  SECTION("both attack types are present") {
    bool has_static = false, has_adaptive = false;
    for (const AttackInstance& inst : a.instances.items) {
      if (inst.attack_type == kAttackStatic) has_static = true;
      if (inst.attack_type == kAttackAdaptive) has_adaptive = true;
    }
    CHECK(has_static);
    CHECK(has_adaptive);
  }

  SECTION("corpus sequences fit the toy model limits") {
    ModelConfig cfg;
    cfg.vocab_size = 32;
    for (const auto& seq : a.corpus()) {
      CHECK(seq.size() >= 2);
      CHECK(seq.size() <= cfg.max_seq);
      for (int t : seq) {
        CHECK(t >= 0);
        CHECK(t < 32);
      }
    }
  }

  CHECK_THROWS_AS(make_synthetic_task(1, 8, 2, 2), ValueError);
  CHECK_THROWS_AS(make_synthetic_task(1, 32, 28, 2), ValueError);
}
