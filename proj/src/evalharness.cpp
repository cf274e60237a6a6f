#include "delia/evalharness.hpp"

#include <algorithm>
#include <cctype>
#include <unordered_set>

#include "delia/datasynth.hpp"
#include "delia/util.hpp"
#include "json.hpp"

namespace delia::evalharness {

using nlohmann::json;

std::string status_name(ExtractStatus s) {
  switch (s) {
    case ExtractStatus::ParsedValid: return "ParsedValid";
    case ExtractStatus::RepairedValid: return "RepairedValid";
    case ExtractStatus::NoBraces: return "NoBraces";
    case ExtractStatus::ParseFailed: return "ParseFailed";
  }
  fail("unreachable status");
}

bool ExtractionResult::has_key(const std::string& k) const {
  return std::find(keys.begin(), keys.end(), k) != keys.end();
}

namespace {

// index one past the '}' closing the brace opened at `start`, or npos.
// Both quote styles shield braces; backslash escapes the next char.
size_t balanced_end(const std::string& t, size_t start) {
  int depth = 0;
  bool in_dq = false, in_sq = false;
  for (size_t i = start; i < t.size(); ++i) {
    char c = t[i];
    if (in_dq || in_sq) {
      if (c == '\\') {
        ++i;
      } else if (in_dq && c == '"') {
        in_dq = false;
      } else if (in_sq && c == '\'') {
        in_sq = false;
      }
      continue;
    }
    switch (c) {
      case '"': in_dq = true; break;
      case '\'': in_sq = true; break;
      case '{': ++depth; break;
      case '}':
        --depth;
        if (depth == 0) return i + 1;
        break;
      default: break;
    }
  }
  return std::string::npos;
}

// repair one: rewrite single-quoted strings as double-quoted ones, leaving
// double-quoted regions untouched
std::string convert_quotes(const std::string& s) {
  std::string out;
  out.reserve(s.size());
  bool in_dq = false, in_sq = false;
  for (size_t i = 0; i < s.size(); ++i) {
    char c = s[i];
    if (in_dq) {
      out += c;
      if (c == '\\' && i + 1 < s.size()) {
        out += s[++i];
      } else if (c == '"') {
        in_dq = false;
      }
      continue;
    }
    if (in_sq) {
      if (c == '\\' && i + 1 < s.size()) {
        char n = s[++i];
        if (n == '\'') {
          out += '\'';
        } else {
          out += '\\';
          out += n;
        }
      } else if (c == '\'') {
        out += '"';
        in_sq = false;
      } else if (c == '"') {
        out += "\\\"";
      } else {
        out += c;
      }
      continue;
    }
    if (c == '"') {
      in_dq = true;
      out += c;
    } else if (c == '\'') {
      in_sq = true;
      out += '"';
    } else {
      out += c;
    }
  }
  return out;
}

bool ident_start(char c) {
  return std::isalpha(static_cast<unsigned char>(c)) || c == '_';
}

bool ident_char(char c) {
  return std::isalnum(static_cast<unsigned char>(c)) || c == '_';
}

// repair two: quote bare identifier keys, i.e. identifiers that follow '{' or
// ',' and precede ':'. Runs after quote conversion so every string is
// double-quoted.
std::string quote_bare_keys(const std::string& s) {
  std::string out;
  out.reserve(s.size());
  bool in_dq = false;
  char prev_sig = 0;
  size_t i = 0;
  while (i < s.size()) {
    char c = s[i];
    if (in_dq) {
      out += c;
      if (c == '\\' && i + 1 < s.size()) {
        out += s[i + 1];
        i += 2;
        continue;
      }
      if (c == '"') in_dq = false;
      ++i;
      continue;
    }
    if (c == '"') {
      in_dq = true;
      prev_sig = '"';
      out += c;
      ++i;
      continue;
    }
    if ((prev_sig == '{' || prev_sig == ',') && ident_start(c)) {
      size_t j = i;
      while (j < s.size() && ident_char(s[j])) ++j;
      size_t k = j;
      while (k < s.size() && std::isspace(static_cast<unsigned char>(s[k]))) ++k;
      if (k < s.size() && s[k] == ':') {
        out += '"';
        out.append(s, i, j - i);
        out += '"';
        prev_sig = '"';
        i = j;
        continue;
      }
    }
    if (!std::isspace(static_cast<unsigned char>(c))) prev_sig = c;
    out += c;
    ++i;
  }
  return out;
}

// strict parse that must yield a json object
bool parse_object(const std::string& text, std::vector<std::string>* keys) {
  json j = json::parse(text, nullptr, false);
  if (j.is_discarded() || !j.is_object()) return false;
  if (keys) {
    keys->clear();
    for (const auto& item : j.items()) keys->push_back(item.key());
    std::sort(keys->begin(), keys->end());
  }
  return true;
}

}  // namespace

ExtractionResult extract_json(const std::string& text) {
  ExtractionResult res;
  size_t first_open = text.find('{');
  if (first_open == std::string::npos) {
    res.status = ExtractStatus::NoBraces;
    return res;
  }
  size_t begin = first_open, end = std::string::npos;
  for (size_t p = first_open; p != std::string::npos; p = text.find('{', p + 1)) {
    size_t e = balanced_end(text, p);
    if (e != std::string::npos) {
      begin = p;
      end = e;
      break;
    }
  }
  if (end == std::string::npos) {
    res.status = ExtractStatus::ParseFailed;
    res.span_begin = first_open;
    res.span_end = text.size();
    return res;
  }
  res.span_begin = begin;
  res.span_end = end;
  std::string span = text.substr(begin, end - begin);
  if (parse_object(span, &res.keys)) {
    res.status = ExtractStatus::ParsedValid;
    return res;
  }
  std::string fixed = quote_bare_keys(convert_quotes(span));
  if (parse_object(fixed, &res.keys)) {
    res.status = ExtractStatus::RepairedValid;
    res.repaired = std::move(fixed);
    return res;
  }
  res.status = ExtractStatus::ParseFailed;
  res.keys.clear();
  return res;
}

EvalSet build_eval_set(const std::vector<data::Sample>& base,
                       const std::vector<std::string>& forbidden_instructions, uint64_t seed) {
  ensure(!base.empty(), "eval set needs at least one base sample");
  std::unordered_set<std::string> taken(forbidden_instructions.begin(),
                                        forbidden_instructions.end());
  for (const auto& s : base) taken.insert(s.instruction);
  EvalSet set;
  for (const auto& s : base) {
    datasynth::DiversifierSpec spec;
    spec.kind = datasynth::DiversifierSpec::Kind::TemplateParaphraser;
    spec.intensity = 8;
    std::string chosen;
    for (uint64_t attempt = 0; attempt < 8 && chosen.empty(); ++attempt) {
      spec.seed = seed ^ (0x9e3779b97f4a7c15ull * (attempt + 1));
      auto variants = datasynth::diversify_instructions({s}, spec);
      for (const auto& v : variants) {
        if (taken.count(v.instruction) == 0) {
          chosen = v.instruction;
          break;
        }
      }
    }
    ensure(!chosen.empty(), "could not find an unseen paraphrase for " + s.id);
    taken.insert(chosen);
    data::Sample held = s;
    held.id = s.id + "-eval";
    held.instruction = chosen;
    held.lineage = data::Lineage{s.id, "eval-paraphrase"};
    set.samples.push_back(std::move(held));
  }
  return set;
}

void ensure_disjoint(const EvalSet& set, const std::vector<std::string>& training_instructions) {
  std::unordered_set<std::string> seen(training_instructions.begin(),
                                       training_instructions.end());
  for (const auto& s : set.samples)
    if (seen.count(s.instruction))
      fail("eval instruction leaked from training: " + s.id);
}

runio::Csv AccuracyReport::to_csv() const {
  runio::Csv csv({"id", "status", "has_thought", "output_hash"});
  for (const auto& o : outcomes)
    csv.add_row({o.id, status_name(o.status), o.has_thought ? "1" : "0",
                 hex64(fnv1a64(o.output))});
  return csv;
}

AccuracyReport formatted_accuracy(const model::ModelState& m, const vocab::Vocabulary& v,
                                  const EvalSet& set, int64_t max_new_tokens) {
  ensure(!set.samples.empty(), "eval set is empty");
  ensure(max_new_tokens > 0, "max_new_tokens must be positive");
  AccuracyReport report;
  for (const auto& s : set.samples) {
    auto enc = model::encode_sample(v, s);
    std::vector<int> prompt(enc.tokens.begin(), enc.tokens.begin() + enc.resp_index + 1);
    model::GenOptions opts;
    opts.max_new = max_new_tokens;
    auto full = model::generate(m, v, prompt, opts);
    std::vector<int> gen(full.begin() + static_cast<int64_t>(prompt.size()), full.end());
    if (!gen.empty() && gen.back() == v.special_id("<eos>")) gen.pop_back();
    EvalOutcome out;
    out.id = s.id;
    out.output = v.decode(gen);
    auto ext = extract_json(out.output);
    out.status = ext.status;
    out.has_thought = ext.valid() && ext.has_key("thought");
    report.outcomes.push_back(std::move(out));
  }
  std::sort(report.outcomes.begin(), report.outcomes.end(),
            [](const EvalOutcome& a, const EvalOutcome& b) { return a.id < b.id; });
  report.total = report.outcomes.size();
  for (const auto& o : report.outcomes)
    if (o.has_thought) ++report.hits;
  report.accuracy = static_cast<double>(report.hits) / static_cast<double>(report.total);
  return report;
}

DemoMode parse_demo_mode(const std::string& name) {
  if (name == "follow") return DemoMode::Follow;
  if (name == "negate") return DemoMode::Negate;
  fail("unknown demo mode: " + name);
}

std::string demo_instruction(DemoMode mode, const std::string& query) {
  if (mode == DemoMode::Follow)
    return "Answer the question and follow the <sep> format. " + query;
  return "Answer the question and do NOT use the <sep> format. " + query;
}

DemoResult soft_prompt_demo(const model::ModelState& m, const vocab::Vocabulary& v,
                            const std::string& query, DemoMode mode, int64_t max_new_tokens,
                            double temperature, uint64_t seed) {
  ensure(v.has_special("<sep>"), "demo needs <sep> in the vocabulary");
  DemoResult res;
  res.mode = mode;
  res.instruction = demo_instruction(mode, query);
  std::vector<int> prompt{v.special_id("<bos>")};
  for (int id : v.encode(res.instruction)) prompt.push_back(id);
  prompt.push_back(v.special_id("<resp>"));
  model::GenOptions opts;
  opts.max_new = max_new_tokens;
  opts.temperature = temperature;
  opts.seed = seed;
  auto full = model::generate(m, v, prompt, opts);
  std::vector<int> gen(full.begin() + static_cast<int64_t>(prompt.size()), full.end());
  if (!gen.empty() && gen.back() == v.special_id("<eos>")) gen.pop_back();
  res.output = v.decode(gen);
  res.status = extract_json(res.output).status;
  res.formatted =
      res.status == ExtractStatus::ParsedValid || res.status == ExtractStatus::RepairedValid;
  return res;
}

DemoPair soft_prompt_pair(const model::ModelState& m, const vocab::Vocabulary& v,
                          const std::string& query, int64_t max_new_tokens, double temperature,
                          uint64_t seed) {
  DemoPair pair;
  pair.follow = soft_prompt_demo(m, v, query, DemoMode::Follow, max_new_tokens, temperature, seed);
  pair.negate = soft_prompt_demo(m, v, query, DemoMode::Negate, max_new_tokens, temperature, seed);
  pair.contract_holds = pair.follow.formatted && !pair.negate.formatted;
  return pair;
}

}  // namespace delia::evalharness
