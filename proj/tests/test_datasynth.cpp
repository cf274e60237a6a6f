#include <algorithm>
#include <filesystem>
#include <set>
#include <string>
#include <vector>

#include "delia/datasynth.hpp"
#include "delia/util.hpp"
#include "doctest.h"
#include "json.hpp"

using namespace delia;
using namespace delia::datasynth;
using data::Sample;
using data::Source;

namespace {

std::vector<std::string> serialized_sorted(const std::vector<Sample>& v) {
  std::vector<std::string> out;
  for (const auto& s : v) out.push_back(sample_to_json(s));
  std::sort(out.begin(), out.end());
  return out;
}

std::string first_word(const std::string& s) {
  auto sp = s.find(' ');
  return s.substr(0, sp);
}

std::string tmp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / name).string();
}

}  // namespace

TEST_CASE("downstream samples carry the json thought schema") {
  auto one = generate_downstream_formatted(1, 7);
  REQUIRE(one.size() == 1);
  auto j = nlohmann::json::parse(one[0].response, nullptr, false);
  REQUIRE(!j.is_discarded());
  CHECK(j.is_object());
  CHECK(j.contains("thought"));
  CHECK(j.size() == 2);
  CHECK(one[0].source == Source::Downstream);
  CHECK(one[0].instruction.find("<sep>") != std::string::npos);
}

TEST_CASE("downstream generation is deterministic and template-rich") {
  auto a = generate_downstream_formatted(100, 7);
  auto b = generate_downstream_formatted(100, 7);
  CHECK(serialized_sorted(a) == serialized_sorted(b));
  auto c = generate_downstream_formatted(100, 8);
  CHECK(serialized_sorted(a) != serialized_sorted(c));

  std::set<std::string> openers, ids;
  for (const auto& s : a) {
    openers.insert(first_word(s.instruction));
    ids.insert(s.id);
    CHECK(s.instruction.find("<sep>") != std::string::npos);
    CHECK(s.response.find("<sep>") == std::string::npos);
    auto j = nlohmann::json::parse(s.response, nullptr, false);
    REQUIRE(!j.is_discarded());
    CHECK(j.contains("thought"));
  }
  CHECK(openers.size() >= 20);
  CHECK(ids.size() == a.size());
}

TEST_CASE("diversifier at intensity zero is the identity") {
  auto d = generate_downstream_formatted(5, 1);
  DiversifierSpec spec;
  spec.intensity = 0;
  auto out = diversify_instructions(d, spec);
  CHECK(serialized_sorted(out) == serialized_sorted(d));
}

TEST_CASE("diversifier fans out instructions and preserves responses") {
  auto d = generate_downstream_formatted(10, 2);
  DiversifierSpec spec;
  spec.seed = 11;
  spec.intensity = 3;
  auto out = diversify_instructions(d, spec);
  REQUIRE(out.size() == 30);
  std::set<std::string> instrs;
  for (size_t i = 0; i < out.size(); ++i) {
    const auto& parent = d[i / 3];
    CHECK(out[i].response == parent.response);
    CHECK(out[i].source == Source::Downstream);
    REQUIRE(out[i].lineage.has_value());
    CHECK(out[i].lineage->parent_id == parent.id);
    CHECK(out[i].lineage->diversifier == "template-paraphraser");
    CHECK(out[i].instruction.find("<sep>") != std::string::npos);
    instrs.insert(out[i].instruction);
  }
  CHECK(static_cast<double>(instrs.size()) >= 0.9 * 30);

  auto again = diversify_instructions(d, spec);
  CHECK(serialized_sorted(again) == serialized_sorted(out));
}

TEST_CASE("diversifier rejects diverse input and missing clients") {
  auto qa = sample_diverse_qa(3, 5);
  DiversifierSpec spec;
  spec.intensity = 2;
  CHECK_THROWS(diversify_instructions(qa, spec));

  auto d = generate_downstream_formatted(2, 3);
  spec.kind = DiversifierSpec::Kind::ExternalLLM;
  CHECK_THROWS(diversify_instructions(d, spec));

  struct FakeClient : DiversifierClient {
    std::vector<std::string> paraphrase(const std::string& instruction, int64_t k,
                                        uint64_t) override {
      std::vector<std::string> out;
      for (int64_t i = 0; i < k; ++i)
        out.push_back("variant " + std::to_string(i) + " of: " + instruction);
      return out;
    }
  } client;
  auto out = diversify_instructions(d, spec, &client);
  REQUIRE(out.size() == 4);
  CHECK(out[0].lineage->diversifier == "external-llm");
  CHECK(out[0].instruction.rfind("variant 0", 0) == 0);

  struct ShortClient : DiversifierClient {
    std::vector<std::string> paraphrase(const std::string&, int64_t, uint64_t) override {
      return {"only one"};
    }
  } bad;
  CHECK_THROWS(diversify_instructions(d, spec, &bad));
}

TEST_CASE("procedural diverse qa spans many task families") {
  auto ten = sample_diverse_qa(10, 9);
  std::set<std::string> fams;
  for (const auto& s : ten) fams.insert(qa_family(s));
  CHECK(fams.size() >= 3);

  auto big = sample_diverse_qa(200, 9);
  fams.clear();
  std::set<std::string> ids;
  for (const auto& s : big) {
    fams.insert(qa_family(s));
    ids.insert(s.id);
    CHECK(s.source == Source::Diverse);
    CHECK(s.instruction.find("<sep>") == std::string::npos);
    CHECK(s.response.find("<sep>") == std::string::npos);
    auto j = nlohmann::json::parse(s.response, nullptr, false);
    CHECK((j.is_discarded() || !j.is_object() || !j.contains("thought")));
  }
  CHECK(fams.size() == 10);
  CHECK(ids.size() == big.size());

  auto again = sample_diverse_qa(200, 9);
  CHECK(serialized_sorted(again) == serialized_sorted(big));
}

TEST_CASE("jsonl round trip preserves the multiset") {
  auto d = generate_downstream_formatted(6, 4);
  DiversifierSpec spec;
  spec.intensity = 2;
  spec.seed = 1;
  auto mixed = diversify_instructions(d, spec);
  auto qa = sample_diverse_qa(4, 4);
  mixed.insert(mixed.end(), qa.begin(), qa.end());

  auto path = tmp_path("delia_roundtrip.jsonl");
  write_jsonl(path, mixed);
  auto back = read_jsonl(path);
  CHECK(serialized_sorted(back) == serialized_sorted(mixed));
  std::filesystem::remove(path);
}

TEST_CASE("malformed jsonl lines are reported by line number") {
  auto path = tmp_path("delia_bad.jsonl");
  write_file(path, sample_to_json(generate_downstream_formatted(1, 1)[0]) + "\nnot json\n");
  try {
    read_jsonl(path);
    FAIL("expected an error");
  } catch (const std::exception& e) {
    CHECK(std::string(e.what()).find("line 2") != std::string::npos);
  }
  std::filesystem::remove(path);
  CHECK_THROWS(read_jsonl(tmp_path("delia_does_not_exist.jsonl")));
}

TEST_CASE("jsonl-backed diverse sampling") {
  auto pool = sample_diverse_qa(20, 13);
  auto path = tmp_path("delia_pool.jsonl");
  write_jsonl(path, pool);
  auto five = sample_diverse_qa(5, 14, DiverseSource::JsonlFile, path);
  REQUIRE(five.size() == 5);
  for (const auto& s : five) CHECK(s.source == Source::Diverse);
  CHECK_THROWS(sample_diverse_qa(21, 14, DiverseSource::JsonlFile, path));
  std::filesystem::remove(path);
}

TEST_CASE("interleave with r zero emits only the downstream set") {
  auto d = generate_downstream_formatted(8, 21);
  MixPlan plan;
  plan.r = 0;
  plan.seed = 3;
  auto stream = interleave(d, {}, plan);
  CHECK(serialized_sorted(stream) == serialized_sorted(d));
  for (const auto& s : stream) CHECK(s.source == Source::Downstream);
}

TEST_CASE("strict interleave places downstream samples every r plus one") {
  auto d = generate_downstream_formatted(2, 22);
  auto qa = sample_diverse_qa(6, 22);
  MixPlan plan;
  plan.r = 3;
  plan.seed = 5;
  auto stream = interleave(d, qa, plan);
  REQUIRE(stream.size() == 8);
  for (size_t i = 0; i < stream.size(); ++i) {
    bool is_down = i == 0 || i == 4;
    CHECK((stream[i].source == Source::Downstream) == is_down);
  }
  auto again = interleave(d, qa, plan);
  CHECK(serialized_sorted(again) == serialized_sorted(stream));
}

TEST_CASE("global shuffle keeps the strict multiset and the diverse fraction") {
  auto d = generate_downstream_formatted(100, 23);
  auto qa = sample_diverse_qa(200, 23);
  MixPlan strict;
  strict.r = 64;
  strict.seed = 9;
  auto a = interleave(d, qa, strict);
  MixPlan shuffled = strict;
  shuffled.mode = MixPlan::Mode::GlobalShuffle;
  auto b = interleave(d, qa, shuffled);
  REQUIRE(a.size() == 100 * 65);
  CHECK(serialized_sorted(a) == serialized_sorted(b));

  int64_t diverse = 0;
  for (const auto& s : b)
    if (s.source == Source::Diverse) ++diverse;
  double frac = static_cast<double>(diverse) / static_cast<double>(b.size());
  double want = 64.0 / 65.0;
  CHECK(frac == doctest::Approx(want).epsilon(0.05));

  bool reordered = false;
  for (size_t i = 0; i < a.size() && !reordered; ++i) reordered = a[i].id != b[i].id;
  CHECK(reordered);
}

TEST_CASE("interleave input validation") {
  auto qa = sample_diverse_qa(3, 1);
  MixPlan plan;
  plan.r = 2;
  CHECK_THROWS(interleave({}, qa, plan));
  auto d = generate_downstream_formatted(2, 1);
  CHECK_THROWS(interleave(d, {}, plan));
  plan.r = -1;
  CHECK_THROWS(interleave(d, qa, plan));
}

TEST_CASE("enum parsers round trip") {
  CHECK(parse_mix_mode("strict-interleave") == MixPlan::Mode::StrictInterleave);
  CHECK(parse_mix_mode("global-shuffle") == MixPlan::Mode::GlobalShuffle);
  CHECK_THROWS(parse_mix_mode("random"));
  CHECK(parse_diversifier_kind("template-paraphraser") ==
        DiversifierSpec::Kind::TemplateParaphraser);
  CHECK_THROWS(parse_diversifier_kind("gpt"));
  CHECK(parse_diverse_source("procedural") == DiverseSource::Procedural);
  CHECK_THROWS(parse_diverse_source("web"));
}
