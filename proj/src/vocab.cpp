#include "delia/vocab.hpp"

#include <algorithm>
#include <cctype>
#include <map>

#include "delia/rng.hpp"
#include "delia/util.hpp"
#include "json.hpp"

namespace delia::vocab {

namespace {

bool is_word_char(unsigned char c) { return std::isalnum(c) || c == '_' || c == '\''; }
bool is_space_char(unsigned char c) { return std::isspace(c); }

std::string byte_token_name(unsigned char b) {
  static const char* hexd = "0123456789abcdef";
  std::string s = "<0x00>";
  s[3] = hexd[b >> 4];
  s[4] = hexd[b & 0xf];
  return s;
}

// next chunk starting at i: a word run, a whitespace run, or one other byte
std::string next_chunk(const std::string& s, size_t i) {
  unsigned char c = static_cast<unsigned char>(s[i]);
  size_t j = i + 1;
  if (is_word_char(c)) {
    while (j < s.size() && is_word_char(static_cast<unsigned char>(s[j]))) ++j;
  } else if (is_space_char(c)) {
    while (j < s.size() && is_space_char(static_cast<unsigned char>(s[j]))) ++j;
  }
  return s.substr(i, j - i);
}

}  // namespace

InitStrategy parse_init_strategy(const std::string& name, uint64_t seed,
                                 const std::string& description) {
  InitStrategy st;
  st.seed = seed;
  st.description = description;
  if (name == "zeros") {
    st.kind = InitStrategy::Kind::Zeros;
  } else if (name == "mean_embedding") {
    st.kind = InitStrategy::Kind::MeanEmbedding;
  } else if (name == "random_seeded") {
    st.kind = InitStrategy::Kind::RandomSeeded;
  } else {
    fail("unknown init strategy '" + name + "' (zeros|mean_embedding|random_seeded)");
  }
  return st;
}

const std::string& Vocabulary::token_of(int id) const {
  ensure(id >= 0 && id < size(), "token_of: id " + std::to_string(id) + " out of range");
  return tokens_[static_cast<size_t>(id)];
}

int Vocabulary::id_of(const std::string& token) const {
  auto it = token_to_id_.find(token);
  return it == token_to_id_.end() ? -1 : it->second;
}

bool Vocabulary::has_special(const std::string& name) const {
  int id = id_of(name);
  return id >= 0 && is_special(id);
}

int Vocabulary::special_id(const std::string& name) const {
  ensure(has_special(name), "special token '" + name + "' not in vocabulary");
  return id_of(name);
}

std::vector<int> Vocabulary::encode(const std::string& text) const {
  std::vector<int> out;
  size_t i = 0;
  while (i < text.size()) {
    // longest special literal wins so "<sep>" never splits into < sep >
    int special = -1;
    size_t special_len = 0;
    for (const auto& name : specials_) {
      if (name.size() > special_len && text.compare(i, name.size(), name) == 0) {
        special = id_of(name);
        special_len = name.size();
      }
    }
    if (special >= 0) {
      out.push_back(special);
      i += special_len;
      continue;
    }
    std::string chunk = next_chunk(text, i);
    int id = id_of(chunk);
    if (id >= 0 && !is_special(id)) {
      out.push_back(id);
    } else {
      for (unsigned char b : chunk) out.push_back(n_content_ + static_cast<int>(b));
    }
    i += chunk.size();
  }
  return out;
}

std::string Vocabulary::decode(const std::vector<int>& ids) const {
  std::string out;
  for (int id : ids) {
    if (is_byte(id)) {
      out.push_back(static_cast<char>(id - n_content_));
    } else {
      out += token_of(id);
    }
  }
  return out;
}

int Vocabulary::single_token_id(const std::string& word) const {
  int id = id_of(word);
  ensure(id >= 0, "'" + word + "' is not a single vocabulary token");
  return id;
}

std::string Vocabulary::to_json() const {
  nlohmann::json j;
  j["content"] = std::vector<std::string>(tokens_.begin(), tokens_.begin() + n_content_);
  j["specials"] = specials_;
  return j.dump();
}

Vocabulary Vocabulary::from_json(const std::string& text) {
  nlohmann::json j = nlohmann::json::parse(text, nullptr, false);
  ensure(!j.is_discarded() && j.contains("content") && j.contains("specials"),
         "vocabulary json: expected object with 'content' and 'specials'");
  Vocabulary v;
  v.tokens_ = j["content"].get<std::vector<std::string>>();
  v.n_content_ = static_cast<int>(v.tokens_.size());
  for (int b = 0; b < 256; ++b) v.tokens_.push_back(byte_token_name(static_cast<unsigned char>(b)));
  v.specials_ = j["specials"].get<std::vector<std::string>>();
  for (const auto& s : v.specials_) v.tokens_.push_back(s);
  v.index_tokens();
  return v;
}

uint64_t Vocabulary::hash() const { return fnv1a64(to_json()); }

int Vocabulary::append_special(const std::string& name) {
  ensure(!name.empty(), "special token name must not be empty");
  ensure(id_of(name) < 0, "token '" + name + "' already in vocabulary");
  tokens_.push_back(name);
  specials_.push_back(name);
  int id = size() - 1;
  token_to_id_[name] = id;
  return id;
}

void Vocabulary::index_tokens() {
  token_to_id_.clear();
  for (int i = 0; i < size(); ++i) token_to_id_[tokens_[static_cast<size_t>(i)]] = i;
  ensure(token_to_id_.size() == tokens_.size(), "vocabulary has duplicate tokens");
}

Vocabulary build_vocab(const std::vector<std::string>& corpus,
                       const std::vector<std::string>& specials) {
  // std::map keeps counting deterministic and the tie ordering lexicographic
  std::map<std::string, int64_t> counts;
  for (const auto& text : corpus) {
    size_t i = 0;
    while (i < text.size()) {
      bool matched = false;
      for (const auto& name : specials) {
        if (text.compare(i, name.size(), name) == 0) {
          i += name.size();
          matched = true;
          break;
        }
      }
      if (matched) continue;
      std::string chunk = next_chunk(text, i);
      i += chunk.size();
      counts[chunk] += 1;
    }
  }
  std::vector<std::pair<std::string, int64_t>> ordered(counts.begin(), counts.end());
  std::stable_sort(ordered.begin(), ordered.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });

  Vocabulary v;
  for (auto& [tok, cnt] : ordered) v.tokens_.push_back(tok);
  v.n_content_ = static_cast<int>(v.tokens_.size());
  for (int b = 0; b < 256; ++b)
    v.tokens_.push_back(byte_token_name(static_cast<unsigned char>(b)));
  for (const auto& s : specials) {
    ensure(!s.empty(), "special token name must not be empty");
    v.tokens_.push_back(s);
    v.specials_.push_back(s);
  }
  v.index_tokens();
  return v;
}

int add_special_token(Vocabulary& v, std::vector<double>& embedding, int64_t d,
                      const std::string& name, const InitStrategy& strategy) {
  ensure(d > 0, "add_special_token: embedding width must be positive");
  ensure(embedding.size() == static_cast<size_t>(v.size()) * static_cast<size_t>(d),
         "add_special_token: embedding is " + std::to_string(embedding.size()) +
             " values, expected " + std::to_string(v.size()) + "x" + std::to_string(d));

  std::vector<double> row(static_cast<size_t>(d), 0.0);
  switch (strategy.kind) {
    case InitStrategy::Kind::Zeros:
      break;
    case InitStrategy::Kind::RandomSeeded: {
      Rng rng(strategy.seed);
      for (auto& x : row) x = rng.normal(0.0, strategy.sigma);
      break;
    }
    case InitStrategy::Kind::MeanEmbedding: {
      ensure(!strategy.description.empty(),
             "mean_embedding init needs a non-empty description");
      auto ids = v.encode(strategy.description);
      ensure(!ids.empty(), "mean_embedding description encoded to no tokens");
      for (int id : ids)
        for (int64_t j = 0; j < d; ++j)
          row[static_cast<size_t>(j)] += embedding[static_cast<size_t>(id) * d + j];
      for (auto& x : row) x /= static_cast<double>(ids.size());
      break;
    }
  }
  int id = v.append_special(name);
  embedding.insert(embedding.end(), row.begin(), row.end());
  return id;
}

}  // namespace delia::vocab
