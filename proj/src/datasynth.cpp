#include "delia/datasynth.hpp"

#include <algorithm>
#include <cctype>
#include <cstdio>
#include <map>
#include <set>

#include "delia/rng.hpp"
#include "delia/util.hpp"
#include "json.hpp"

namespace delia::datasynth {

using data::Lineage;
using data::Sample;
using data::Source;
using nlohmann::json;

DiversifierSpec::Kind parse_diversifier_kind(const std::string& name) {
  if (name == "template-paraphraser") return DiversifierSpec::Kind::TemplateParaphraser;
  if (name == "external-llm") return DiversifierSpec::Kind::ExternalLLM;
  fail("unknown diversifier kind: " + name);
}

MixPlan::Mode parse_mix_mode(const std::string& name) {
  if (name == "strict-interleave") return MixPlan::Mode::StrictInterleave;
  if (name == "global-shuffle") return MixPlan::Mode::GlobalShuffle;
  fail("unknown mix mode: " + name);
}

DiverseSource parse_diverse_source(const std::string& name) {
  if (name == "procedural") return DiverseSource::Procedural;
  if (name == "jsonl-file") return DiverseSource::JsonlFile;
  fail("unknown diverse source: " + name);
}

namespace {

std::string pad_id(const char* prefix, int64_t i) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%s%06lld", prefix, static_cast<long long>(i));
  return buf;
}

std::string replace_all(std::string text, const std::string& from, const std::string& to) {
  size_t pos = 0;
  while ((pos = text.find(from, pos)) != std::string::npos) {
    text.replace(pos, from.size(), to);
    pos += to.size();
  }
  return text;
}

int64_t count_words(const std::string& phrase) {
  int64_t n = 0;
  bool in_word = false;
  for (char c : phrase) {
    bool w = std::isalnum(static_cast<unsigned char>(c)) || c == '\'';
    if (w && !in_word) ++n;
    in_word = w;
  }
  return n;
}

std::string last_word(const std::string& phrase) {
  auto end = phrase.find_last_not_of(' ');
  ensure(end != std::string::npos, "empty phrase");
  auto start = phrase.find_last_of(' ', end);
  return phrase.substr(start == std::string::npos ? 0 : start + 1,
                       end - (start == std::string::npos ? 0 : start + 1) + 1);
}

// ---- downstream formatted task ------------------------------------------

enum TaskKind { kClaim, kIntent, kSentiment, kCountWords, kEchoLast, kTopicPick };

struct DsTemplate {
  const char* text;
  TaskKind kind;
};

// first words are pairwise distinct so the template behind an emitted
// instruction stays identifiable
const DsTemplate kTemplates[] = {
    {"Check the claim that \"{word}\" is a {class}. Put your reasoning after the <sep> marker as json.", kClaim},
    {"Decide whether \"{word}\" counts as a {class}. Give the json verdict after <sep>.", kClaim},
    {"Verify this statement: \"{word}\" is a {class}. Respond in the format starting at <sep>.", kClaim},
    {"Judge if \"{word}\" belongs with the {class} group. Begin your structured answer at <sep>.", kClaim},
    {"State the intent of \"{phrase}\". Use the json format after the <sep> marker.", kIntent},
    {"Label the intent behind \"{phrase}\". Your thought goes in the json block after <sep>.", kIntent},
    {"Name the intent of the request \"{phrase}\". Answer in the structured form at <sep>.", kIntent},
    {"Work out the intent of \"{phrase}\" and reply after the <sep> token in json.", kIntent},
    {"Classify the sentiment of \"{phrase}\". Reply in json once you reach <sep>.", kSentiment},
    {"Tag the feeling of \"{phrase}\" as a json label after the <sep> marker.", kSentiment},
    {"Rate the phrase \"{phrase}\" as positive or negative in the format after <sep>.", kSentiment},
    {"Read the line \"{phrase}\" and give the sentiment in json after <sep>.", kSentiment},
    {"Count the words in \"{phrase}\". Report the total as json after the <sep> marker.", kCountWords},
    {"How many words does \"{phrase}\" contain? Put the count in json after <sep>.", kCountWords},
    {"Tally the words of \"{phrase}\" and answer in the format after <sep>.", kCountWords},
    {"Give the word count of \"{phrase}\" in the structured reply after <sep>.", kCountWords},
    {"Repeat the last word of \"{phrase}\" in the json reply after <sep>.", kEchoLast},
    {"Echo the final word of \"{phrase}\" using the format block at <sep>.", kEchoLast},
    {"Take the closing word of \"{phrase}\" and return it as json after <sep>.", kEchoLast},
    {"Find the last word in \"{phrase}\" and put it after the <sep> marker in json.", kEchoLast},
    {"Pick the topic of \"{phrase}\": {ta} or {tb}. Answer in json after <sep>.", kTopicPick},
    {"Choose the subject of \"{phrase}\" from {ta} and {tb}. Use the format at <sep>.", kTopicPick},
    {"Which topic fits \"{phrase}\": {ta} or {tb}? Reply as json after the <sep> marker.", kTopicPick},
    {"Match the line \"{phrase}\" to {ta} or {tb} and answer in the structured block after <sep>.", kTopicPick},
};

struct WordClass {
  const char* word;
  const char* cls;
};

const WordClass kWordClasses[] = {
    {"sparrow", "bird"},   {"oak", "tree"},      {"trout", "fish"},
    {"hammer", "tool"},    {"violin", "instrument"}, {"json", "format"},
    {"tango", "dance"},    {"basil", "herb"},    {"granite", "rock"},
    {"sonnet", "poem"},    {"falcon", "bird"},   {"cedar", "tree"},
};

const char* kTopics[] = {"rivers", "music",   "cooking", "football", "gardens",
                         "planets", "trains",  "painting", "chess",   "birds",
                         "bridges", "deserts", "glaciers", "villages", "markets"};

const char* kFillers[] = {"old",  "quiet", "bright", "heavy", "small",
                          "round", "green", "plain",  "early", "broad"};

const char* kNouns[] = {"stone", "river", "candle", "ladder", "basket", "mirror",
                        "garden", "window", "letter", "bottle", "market", "bridge"};

struct IntentPhrase {
  const char* phrase;
  const char* intent;
};

const IntentPhrase kIntentPhrases[] = {
    {"what time is it", "question"},      {"where do owls nest", "question"},
    {"which road goes north", "question"}, {"why is the sky orange", "question"},
    {"close the window", "command"},      {"sort these files", "command"},
    {"bring the ladder", "command"},      {"stack the plates", "command"},
    {"the door is open", "report"},       {"rain fell all night", "report"},
    {"the train left early", "report"},   {"the lamp is broken", "report"},
};

struct SentimentPhrase {
  const char* phrase;
  const char* label;
};

const SentimentPhrase kSentimentPhrases[] = {
    {"the bread was warm", "positive"},       {"a bright and calm morning", "positive"},
    {"the team played with joy", "positive"}, {"her garden looked lovely", "positive"},
    {"the soup tasted rich", "positive"},     {"the show was dull", "negative"},
    {"a cold and grim hallway", "negative"},  {"the engine kept failing", "negative"},
    {"his desk was a mess", "negative"},      {"the coffee went bitter", "negative"},
};

template <typename T, size_t N>
const T& pick(Rng& rng, const T (&arr)[N]) {
  return arr[rng.bounded(N)];
}

std::string make_phrase(Rng& rng, int64_t words) {
  std::string out;
  for (int64_t i = 0; i < words; ++i) {
    if (i) out += ' ';
    out += (i % 2 == 0) ? pick(rng, kFillers) : pick(rng, kNouns);
  }
  return out;
}

std::string json_response(const std::string& thought, const std::string& key,
                          const std::string& value) {
  json j;
  j["thought"] = thought;
  j[key] = value;
  return j.dump();
}

Sample render_downstream(int64_t index, Rng& rng) {
  const DsTemplate& tpl = kTemplates[rng.bounded(std::size(kTemplates))];
  std::string instr = tpl.text;
  std::string response;
  switch (tpl.kind) {
    case kClaim: {
      const WordClass& truth = pick(rng, kWordClasses);
      bool make_true = rng.bounded(2) == 0;
      std::string cls = truth.cls;
      if (!make_true) {
        std::string other = cls;
        while (other == cls) other = pick(rng, kWordClasses).cls;
        cls = other;
      }
      instr = replace_all(instr, "{word}", truth.word);
      instr = replace_all(instr, "{class}", cls);
      response = json_response(
          std::string(truth.word) + (make_true ? " is a " : " is not a ") + cls, "verdict",
          make_true ? "yes" : "no");
      break;
    }
    case kIntent: {
      const IntentPhrase& p = pick(rng, kIntentPhrases);
      instr = replace_all(instr, "{phrase}", p.phrase);
      std::string why = std::string("the phrase ") +
                        (std::string(p.intent) == "question"  ? "asks a question"
                         : std::string(p.intent) == "command" ? "gives a command"
                                                              : "states a fact");
      response = json_response(why, "intent", p.intent);
      break;
    }
    case kSentiment: {
      const SentimentPhrase& p = pick(rng, kSentimentPhrases);
      instr = replace_all(instr, "{phrase}", p.phrase);
      response = json_response(std::string("the words sound ") + p.label, "label", p.label);
      break;
    }
    case kCountWords: {
      std::string phrase = make_phrase(rng, 3 + static_cast<int64_t>(rng.bounded(3)));
      instr = replace_all(instr, "{phrase}", phrase);
      int64_t n = count_words(phrase);
      response = json_response("counted " + std::to_string(n) + " words", "answer",
                               std::to_string(n));
      break;
    }
    case kEchoLast: {
      std::string phrase = make_phrase(rng, 3 + static_cast<int64_t>(rng.bounded(3)));
      instr = replace_all(instr, "{phrase}", phrase);
      std::string w = last_word(phrase);
      response = json_response("the final word is " + w, "echo", w);
      break;
    }
    case kTopicPick: {
      std::string ta = pick(rng, kTopics);
      std::string tb = ta;
      while (tb == ta) tb = pick(rng, kTopics);
      std::string phrase = std::string(pick(rng, kFillers)) + " notes about " + ta;
      instr = replace_all(instr, "{phrase}", phrase);
      instr = replace_all(instr, "{ta}", ta);
      instr = replace_all(instr, "{tb}", tb);
      response = json_response("the phrase mentions " + ta, "topic", ta);
      break;
    }
  }
  Sample s;
  s.id = pad_id("ds-", index);
  s.instruction = instr;
  s.response = response;
  s.source = Source::Downstream;
  return s;
}

// ---- template paraphraser -------------------------------------------------

const std::map<std::string, std::vector<std::string>>& synonym_map() {
  static const std::map<std::string, std::vector<std::string>> m{
      {"Check", {"Verify", "Inspect", "Confirm"}},
      {"Decide", {"Determine", "Judge"}},
      {"Give", {"Provide", "Return"}},
      {"Put", {"Place", "Write"}},
      {"put", {"place", "write"}},
      {"reply", {"respond", "answer"}},
      {"Reply", {"Respond", "Answer"}},
      {"answer", {"reply", "response"}},
      {"Answer", {"Reply", "Respond"}},
      {"marker", {"token", "tag"}},
      {"block", {"section", "part"}},
      {"Report", {"State", "Record"}},
      {"give", {"provide", "return"}},
      {"Use", {"Follow", "Apply"}},
      {"reach", {"hit", "arrive at"}},
      {"Pick", {"Select", "Choose"}},
      {"Find", {"Locate", "Spot"}},
      {"last", {"final", "closing"}},
      {"words", {"terms", "tokens"}},
  };
  return m;
}

const char* kRegisters[] = {"Please ",       "Kindly ",      "You should ",
                            "I want you to ", "Make sure you ", "Now "};

std::string lower_first(std::string s) {
  if (!s.empty()) s[0] = static_cast<char>(std::tolower(static_cast<unsigned char>(s[0])));
  return s;
}

std::vector<std::string> split_sentences(const std::string& s) {
  std::vector<std::string> out;
  size_t start = 0;
  while (start < s.size()) {
    size_t dot = s.find(". ", start);
    if (dot == std::string::npos) {
      out.push_back(s.substr(start));
      break;
    }
    out.push_back(s.substr(start, dot - start + 1));
    start = dot + 2;
  }
  return out;
}

std::string join_sentences(const std::vector<std::string>& parts) {
  std::string out;
  for (size_t i = 0; i < parts.size(); ++i) {
    if (i) out += ' ';
    out += parts[i];
  }
  return out;
}

std::string substitute_synonyms(const std::string& instr, Rng& rng) {
  std::string out;
  size_t i = 0;
  while (i < instr.size()) {
    unsigned char c = static_cast<unsigned char>(instr[i]);
    if (std::isalnum(c) || c == '\'') {
      size_t j = i;
      while (j < instr.size() &&
             (std::isalnum(static_cast<unsigned char>(instr[j])) || instr[j] == '\''))
        ++j;
      std::string word = instr.substr(i, j - i);
      auto it = synonym_map().find(word);
      if (it != synonym_map().end() && rng.uniform() < 0.6)
        out += it->second[rng.bounded(it->second.size())];
      else
        out += word;
      i = j;
    } else {
      out += instr[i++];
    }
  }
  return out;
}

// wording axes move a lot, task content stays fixed: synonyms and register
// shifts fire often, clause moves less, and content words are never touched
std::string paraphrase_once(const std::string& instruction, Rng& rng) {
  std::string instr = instruction;
  if (rng.uniform() < 0.8) instr = substitute_synonyms(instr, rng);
  if (rng.uniform() < 0.35) {
    auto parts = split_sentences(instr);
    if (parts.size() >= 2) {
      std::rotate(parts.begin(), parts.begin() + 1, parts.end());
      instr = join_sentences(parts);
    }
  }
  if (rng.uniform() < 0.35) {
    auto parts = split_sentences(instr);
    for (size_t k = 1; k < parts.size(); ++k) {
      if (parts[k].find("<sep>") != std::string::npos) {
        std::string moved = parts[k];
        parts.erase(parts.begin() + static_cast<std::ptrdiff_t>(k));
        parts.insert(parts.begin(), moved);
        instr = join_sentences(parts);
        break;
      }
    }
  }
  if (rng.uniform() < 0.9) {
    const char* reg = kRegisters[rng.bounded(std::size(kRegisters))];
    instr = reg + lower_first(instr);
  }
  return instr;
}

// ---- diverse qa -----------------------------------------------------------

const char* kQaFamilies[] = {"arith", "reverse", "copy",  "classify", "trivia",
                             "sort",  "convert", "rhyme", "negate",   "count"};

struct Pair {
  const char* q;
  const char* a;
};

const Pair kTrivia[] = {
    {"How many days are in a week?", "seven"},
    {"What color is a clear daytime sky?", "blue"},
    {"What is the word for a private reflection?", "thought"},
    {"What do bees make?", "honey"},
    {"What format uses braces and quoted keys?", "json"},
    {"How many legs does a spider have?", "eight"},
    {"What season follows summer?", "autumn"},
    {"What shape has three sides?", "triangle"},
};

const Pair kRhymes[] = {
    {"cat", "hat"},   {"stone", "bone"}, {"light", "night"}, {"rain", "train"},
    {"tree", "bee"},  {"door", "floor"}, {"mouse", "house"}, {"star", "car"},
};

const Pair kOpposites[] = {
    {"hot", "cold"},   {"tall", "short"}, {"early", "late"},  {"open", "closed"},
    {"light", "dark"}, {"loud", "quiet"}, {"wet", "dry"},     {"fast", "slow"},
};

const Pair kConversions[] = {
    {"How many minutes are in 2 hours?", "120"},
    {"How many minutes are in 3 hours?", "180"},
    {"How many hours are in 2 days?", "48"},
    {"How many days are in 3 weeks?", "21"},
    {"How many seconds are in 4 minutes?", "240"},
    {"How many months are in 2 years?", "24"},
};

const char* kNumberWords[] = {"0", "1", "2", "3", "4", "5", "6", "7", "8", "9"};

Sample render_diverse(const std::string& family, int64_t index, Rng& rng) {
  std::string instr, resp;
  if (family == "arith") {
    int64_t a = static_cast<int64_t>(rng.bounded(20)) + 1;
    int64_t b = static_cast<int64_t>(rng.bounded(20)) + 1;
    int op = static_cast<int>(rng.bounded(3));
    if (op == 0) {
      instr = "What is " + std::to_string(a) + " plus " + std::to_string(b) + "?";
      resp = std::to_string(a + b);
    } else if (op == 1) {
      instr = "What is " + std::to_string(a + b) + " minus " + std::to_string(b) + "?";
      resp = std::to_string(a);
    } else {
      int64_t sa = a % 9 + 1, sb = b % 9 + 1;
      instr = "What is " + std::to_string(sa) + " times " + std::to_string(sb) + "?";
      resp = std::to_string(sa * sb);
    }
  } else if (family == "reverse") {
    std::string w = pick(rng, kNouns);
    instr = "Reverse the string \"" + w + "\".";
    resp = std::string(w.rbegin(), w.rend());
  } else if (family == "copy") {
    std::string phrase = make_phrase(rng, 2 + static_cast<int64_t>(rng.bounded(3)));
    instr = "Repeat exactly: " + phrase;
    resp = phrase;
  } else if (family == "classify") {
    const WordClass& truth = pick(rng, kWordClasses);
    std::string other = truth.cls;
    while (other == truth.cls) other = pick(rng, kWordClasses).cls;
    bool flip = rng.bounded(2) == 0;
    instr = std::string("Is \"") + truth.word + "\" a " + (flip ? other : truth.cls) + " or a " +
            (flip ? truth.cls : other) + "?";
    resp = truth.cls;
  } else if (family == "trivia") {
    const Pair& p = pick(rng, kTrivia);
    instr = p.q;
    resp = p.a;
  } else if (family == "sort") {
    std::vector<std::string> words;
    for (int64_t i = 0; i < 3; ++i) {
      std::string w = pick(rng, kNouns);
      while (std::find(words.begin(), words.end(), w) != words.end()) w = pick(rng, kNouns);
      words.push_back(w);
    }
    instr = "Sort these words: " + join(words, " ");
    std::sort(words.begin(), words.end());
    resp = join(words, " ");
  } else if (family == "convert") {
    const Pair& p = pick(rng, kConversions);
    instr = p.q;
    resp = p.a;
  } else if (family == "rhyme") {
    const Pair& p = pick(rng, kRhymes);
    std::string decoy = pick(rng, kNouns);
    while (decoy == p.q || decoy == p.a) decoy = pick(rng, kNouns);
    bool first = rng.bounded(2) == 0;
    instr = std::string("Which word rhymes with \"") + p.q + "\": " + (first ? p.a : decoy.c_str()) +
            " or " + (first ? decoy.c_str() : p.a) + "?";
    resp = p.a;
  } else if (family == "negate") {
    const Pair& p = pick(rng, kOpposites);
    instr = std::string("What is the opposite of \"") + p.q + "\"?";
    resp = p.a;
  } else if (family == "count") {
    int64_t n = 2 + static_cast<int64_t>(rng.bounded(3));
    std::string digits;
    for (int64_t i = 0; i < n; ++i) {
      if (i) digits += ' ';
      digits += pick(rng, kNumberWords);
    }
    instr = "How many numbers are listed here: " + digits + "?";
    resp = std::to_string(n);
  } else {
    fail("unknown qa family: " + family);
  }
  Sample s;
  s.id = pad_id(("qa-" + family + "-").c_str(), index);
  s.instruction = instr;
  s.response = resp;
  s.source = Source::Diverse;
  return s;
}

void check_diverse_invariants(const Sample& s) {
  ensure(s.instruction.find("<sep>") == std::string::npos &&
             s.response.find("<sep>") == std::string::npos,
         "diverse sample " + s.id + " references <sep>");
  json j = json::parse(s.response, nullptr, false);
  ensure(j.is_discarded() || !j.is_object() || !j.contains("thought"),
         "diverse sample " + s.id + " emits the formatted-task json");
}

}  // namespace

std::vector<Sample> generate_downstream_formatted(int64_t n, uint64_t seed) {
  ensure(n >= 1, "need n >= 1 downstream samples");
  ensure(n <= 1000000, "downstream id space is six digits");
  Rng root(seed);
  std::vector<Sample> out;
  out.reserve(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) {
    Rng rng = root.derive(pad_id("ds-", i));
    out.push_back(render_downstream(i, rng));
    json j = json::parse(out.back().response, nullptr, false);
    ensure(!j.is_discarded() && j.is_object() && j.contains("thought"),
           "downstream sample lost its response schema");
  }
  return out;
}

std::vector<Sample> diversify_instructions(const std::vector<Sample>& samples,
                                           const DiversifierSpec& spec,
                                           DiversifierClient* client) {
  ensure(spec.intensity >= 0, "diversifier intensity must be >= 0");
  for (const auto& s : samples)
    ensure(s.source == Source::Downstream, "cannot diversify diverse sample " + s.id);
  if (spec.intensity == 0) return samples;

  std::vector<Sample> out;
  out.reserve(samples.size() * static_cast<size_t>(spec.intensity));
  Rng root(spec.seed);
  for (const auto& s : samples) {
    std::vector<std::string> variants;
    if (spec.kind == DiversifierSpec::Kind::TemplateParaphraser) {
      Rng srng = root.derive(s.id);
      for (int64_t k = 0; k < spec.intensity; ++k) {
        Rng vrng = srng.derive("v" + std::to_string(k));
        variants.push_back(paraphrase_once(s.instruction, vrng));
      }
    } else {
      ensure(client != nullptr, "external-llm diversifier needs a client");
      variants = client->paraphrase(s.instruction, spec.intensity,
                                    root.derive(s.id).state());
      ensure(static_cast<int64_t>(variants.size()) == spec.intensity,
             "external client returned the wrong variant count");
    }
    for (int64_t k = 0; k < spec.intensity; ++k) {
      Sample v;
      v.id = s.id + ".v" + std::to_string(k);
      v.instruction = variants[static_cast<size_t>(k)];
      ensure(v.instruction.find("<sep>") != std::string::npos,
             "paraphrase dropped the <sep> mention for " + s.id);
      v.response = s.response;
      v.source = Source::Downstream;
      v.lineage = Lineage{s.id, spec.kind == DiversifierSpec::Kind::TemplateParaphraser
                                    ? "template-paraphraser"
                                    : "external-llm"};
      out.push_back(std::move(v));
    }
  }
  return out;
}

std::vector<Sample> sample_diverse_qa(int64_t n, uint64_t seed, DiverseSource source,
                                      const std::string& path) {
  ensure(n >= 1, "need n >= 1 diverse samples");
  std::vector<Sample> out;
  if (source == DiverseSource::Procedural) {
    Rng root(seed);
    const size_t nfam = std::size(kQaFamilies);
    for (int64_t i = 0; i < n; ++i) {
      std::string family = kQaFamilies[static_cast<size_t>(i) % nfam];
      Rng rng = root.derive("qa-" + family + "-" + std::to_string(i));
      out.push_back(render_diverse(family, i, rng));
    }
  } else {
    auto pool = read_jsonl(path);
    ensure(static_cast<int64_t>(pool.size()) >= n,
           "jsonl pool " + path + " holds " + std::to_string(pool.size()) +
               " samples, need " + std::to_string(n));
    Rng rng(seed);
    rng.shuffle(pool);
    pool.resize(static_cast<size_t>(n));
    for (auto& s : pool) s.source = Source::Diverse;
    out = std::move(pool);
  }
  for (const auto& s : out) check_diverse_invariants(s);
  return out;
}

std::vector<Sample> interleave(const std::vector<Sample>& downstream,
                               const std::vector<Sample>& diverse, const MixPlan& plan) {
  ensure(!downstream.empty(), "interleave needs a non-empty downstream set");
  ensure(plan.r >= 0, "sampling ratio r must be >= 0");
  ensure(plan.r == 0 || !diverse.empty(), "r > 0 needs a non-empty diverse pool");

  Rng rng(plan.seed);
  std::vector<Sample> ds = downstream;
  rng.shuffle(ds);
  Rng draw = rng.derive("draws");
  std::vector<Sample> stream;
  stream.reserve(ds.size() * static_cast<size_t>(plan.r + 1));
  for (const auto& d : ds) {
    stream.push_back(d);
    for (int64_t j = 0; j < plan.r; ++j)
      stream.push_back(diverse[static_cast<size_t>(draw.bounded(diverse.size()))]);
  }
  if (plan.mode == MixPlan::Mode::GlobalShuffle) {
    Rng perm = rng.derive("perm");
    perm.shuffle(stream);
  }
  return stream;
}

std::string sample_to_json(const Sample& s) {
  json j;
  j["id"] = s.id;
  j["instruction"] = s.instruction;
  j["response"] = s.response;
  j["source"] = data::source_name(s.source);
  if (s.lineage) {
    j["lineage"] = json{{"parent_id", s.lineage->parent_id},
                        {"diversifier", s.lineage->diversifier}};
  } else {
    j["lineage"] = nullptr;
  }
  return j.dump();
}

Sample sample_from_json(const std::string& text) {
  json j = json::parse(text, nullptr, false);
  ensure(!j.is_discarded() && j.is_object(), "sample line is not a json object");
  for (auto* f : {"id", "instruction", "response", "source"})
    ensure(j.contains(f) && j[f].is_string(), std::string("sample line missing field ") + f);
  Sample s;
  s.id = j["id"].get<std::string>();
  s.instruction = j["instruction"].get<std::string>();
  s.response = j["response"].get<std::string>();
  s.source = data::parse_source(j["source"].get<std::string>());
  if (j.contains("lineage") && j["lineage"].is_object()) {
    const auto& l = j["lineage"];
    ensure(l.contains("parent_id") && l.contains("diversifier"), "bad lineage object");
    s.lineage = Lineage{l["parent_id"].get<std::string>(), l["diversifier"].get<std::string>()};
  }
  return s;
}

void write_jsonl(const std::string& path, const std::vector<Sample>& samples) {
  std::string out;
  for (const auto& s : samples) {
    out += sample_to_json(s);
    out += '\n';
  }
  write_file(path, out);
}

std::vector<Sample> read_jsonl(const std::string& path) {
  std::string text = read_file(path);
  std::vector<Sample> out;
  size_t line_no = 0, start = 0;
  while (start < text.size()) {
    size_t end = text.find('\n', start);
    if (end == std::string::npos) end = text.size();
    std::string line = text.substr(start, end - start);
    ++line_no;
    if (!line.empty()) {
      try {
        out.push_back(sample_from_json(line));
      } catch (const std::exception& e) {
        fail(path + " line " + std::to_string(line_no) + ": " + e.what());
      }
    }
    start = end + 1;
  }
  return out;
}

std::string qa_family(const Sample& s) {
  if (s.id.rfind("qa-", 0) != 0) return "";
  size_t dash = s.id.find('-', 3);
  if (dash == std::string::npos) return "";
  return s.id.substr(3, dash - 3);
}

}  // namespace delia::datasynth
