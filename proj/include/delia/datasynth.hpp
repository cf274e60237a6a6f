#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "delia/sample.hpp"

namespace delia::datasynth {

// port for a real paraphrasing model; the built-in template paraphraser is the
// default so the pipeline stays deterministic and offline
struct DiversifierClient {
  virtual ~DiversifierClient() = default;
  virtual std::vector<std::string> paraphrase(const std::string& instruction, int64_t k,
                                              uint64_t seed) = 0;
};

struct DiversifierSpec {
  enum class Kind { TemplateParaphraser, ExternalLLM };
  Kind kind = Kind::TemplateParaphraser;
  uint64_t seed = 0;
  int64_t intensity = 0;  // variants per instruction; 0 passes the input through
};

DiversifierSpec::Kind parse_diversifier_kind(const std::string& name);

struct MixPlan {
  enum class Mode { StrictInterleave, GlobalShuffle };
  int64_t r = 0;  // diverse samples drawn after each downstream sample
  Mode mode = Mode::StrictInterleave;
  uint64_t seed = 0;
};

MixPlan::Mode parse_mix_mode(const std::string& name);

// formatted downstream task: instructions mention the <sep> token, responses
// are json objects with a "thought" key plus one task-specific key
std::vector<data::Sample> generate_downstream_formatted(int64_t n, uint64_t seed);

std::vector<data::Sample> diversify_instructions(const std::vector<data::Sample>& samples,
                                                 const DiversifierSpec& spec,
                                                 DiversifierClient* client = nullptr);

enum class DiverseSource { Procedural, JsonlFile };

DiverseSource parse_diverse_source(const std::string& name);

std::vector<data::Sample> sample_diverse_qa(int64_t n, uint64_t seed,
                                            DiverseSource source = DiverseSource::Procedural,
                                            const std::string& path = "");

std::vector<data::Sample> interleave(const std::vector<data::Sample>& downstream,
                                     const std::vector<data::Sample>& diverse,
                                     const MixPlan& plan);

std::string sample_to_json(const data::Sample& s);
data::Sample sample_from_json(const std::string& text);

void write_jsonl(const std::string& path, const std::vector<data::Sample>& samples);
std::vector<data::Sample> read_jsonl(const std::string& path);

// task family tag baked into procedural diverse ids ("qa-<family>-...")
std::string qa_family(const data::Sample& s);

}  // namespace delia::datasynth
