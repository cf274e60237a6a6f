#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "delia/model.hpp"
#include "delia/runio.hpp"
#include "delia/sample.hpp"
#include "delia/vocab.hpp"

namespace delia::evalharness {

enum class ExtractStatus { ParsedValid, RepairedValid, NoBraces, ParseFailed };

std::string status_name(ExtractStatus s);

struct ExtractionResult {
  ExtractStatus status = ExtractStatus::NoBraces;
  size_t span_begin = 0;  // [span_begin, span_end) into the input text
  size_t span_end = 0;
  std::string repaired;            // the span after repairs, set for RepairedValid
  std::vector<std::string> keys;   // top-level keys, sorted, for valid statuses
  bool valid() const {
    return status == ExtractStatus::ParsedValid || status == ExtractStatus::RepairedValid;
  }
  bool has_key(const std::string& k) const;
};

// Total over arbitrary bytes. Finds the earliest balanced {...} span with
// string-aware brace matching (both quote styles, backslash escapes), then
// parses it strictly; on failure applies exactly two repairs - single-quote
// to double-quote conversion outside double-quoted strings, and quoting of
// bare identifier keys - and parses once more.
ExtractionResult extract_json(const std::string& text);

struct EvalSet {
  std::vector<data::Sample> samples;
};

// one held-out paraphrase per base sample, guaranteed to collide with neither
// the forbidden instruction strings nor each other
EvalSet build_eval_set(const std::vector<data::Sample>& base,
                       const std::vector<std::string>& forbidden_instructions, uint64_t seed);

void ensure_disjoint(const EvalSet& set, const std::vector<std::string>& training_instructions);

struct EvalOutcome {
  std::string id;
  ExtractStatus status = ExtractStatus::NoBraces;
  bool has_thought = false;
  std::string output;
};

struct AccuracyReport {
  double accuracy = 0.0;
  size_t hits = 0;
  size_t total = 0;
  std::vector<EvalOutcome> outcomes;  // ordered by sample id
  runio::Csv to_csv() const;          // id,status,has_thought,output_hash
};

// greedy decoding; a hit parses (directly or after repair) and carries "thought"
AccuracyReport formatted_accuracy(const model::ModelState& m, const vocab::Vocabulary& v,
                                  const EvalSet& set, int64_t max_new_tokens);

enum class DemoMode { Follow, Negate };

DemoMode parse_demo_mode(const std::string& name);
std::string demo_instruction(DemoMode mode, const std::string& query);

struct DemoResult {
  DemoMode mode = DemoMode::Follow;
  std::string instruction;
  std::string output;
  ExtractStatus status = ExtractStatus::NoBraces;
  bool formatted = false;
};

DemoResult soft_prompt_demo(const model::ModelState& m, const vocab::Vocabulary& v,
                            const std::string& query, DemoMode mode, int64_t max_new_tokens,
                            double temperature = 0.0, uint64_t seed = 0);

struct DemoPair {
  DemoResult follow;
  DemoResult negate;
  bool contract_holds = false;  // follow formatted, negate not
};

DemoPair soft_prompt_pair(const model::ModelState& m, const vocab::Vocabulary& v,
                          const std::string& query, int64_t max_new_tokens,
                          double temperature = 0.0, uint64_t seed = 0);

}  // namespace delia::evalharness
