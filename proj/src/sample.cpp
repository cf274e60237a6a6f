#include "delia/sample.hpp"

#include "delia/util.hpp"

namespace delia::data {

std::string source_name(Source s) { return s == Source::Downstream ? "downstream" : "diverse"; }

Source parse_source(const std::string& s) {
  if (s == "downstream") return Source::Downstream;
  if (s == "diverse") return Source::Diverse;
  fail("unknown sample source: " + s);
}

}  // namespace delia::data
