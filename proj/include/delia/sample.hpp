#pragma once

#include <optional>
#include <string>

namespace delia::data {

enum class Source { Downstream, Diverse };

std::string source_name(Source s);
Source parse_source(const std::string& s);

struct Lineage {
  std::string parent_id;
  std::string diversifier;
};

// One instruction-response pair. Downstream samples carry the formatted task;
// diverse samples come from the unrelated QA pool.
struct Sample {
  std::string id;
  std::string instruction;
  std::string response;
  Source source = Source::Downstream;
  std::optional<Lineage> lineage;
};

}  // namespace delia::data
