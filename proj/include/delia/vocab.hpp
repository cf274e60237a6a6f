#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

namespace delia::vocab {

// How the embedding row of a newly added special token is filled.
struct InitStrategy {
  enum class Kind { Zeros, MeanEmbedding, RandomSeeded };
  Kind kind = Kind::RandomSeeded;
  uint64_t seed = 0;        // RandomSeeded
  double sigma = 0.02;      // RandomSeeded
  std::string description;  // MeanEmbedding: mean over this text's token rows
};

InitStrategy parse_init_strategy(const std::string& name, uint64_t seed,
                                 const std::string& description);

// Word-level vocabulary with byte fallback. Id layout, in order:
//   [0, n_content)              content chunks (words, punctuation, whitespace runs)
//   [n_content, n_content+256)  byte fallback tokens
//   [base_size, size)           special tokens, always the top of the range
class Vocabulary {
 public:
  Vocabulary() = default;

  int size() const { return static_cast<int>(tokens_.size()); }
  int base_size() const { return n_content_ + 256; }
  int num_specials() const { return size() - base_size(); }

  const std::string& token_of(int id) const;
  int id_of(const std::string& token) const;  // -1 when absent
  bool is_special(int id) const { return id >= base_size() && id < size(); }
  bool is_byte(int id) const { return id >= n_content_ && id < base_size(); }

  bool has_special(const std::string& name) const;
  int special_id(const std::string& name) const;  // throws when absent

  std::vector<int> encode(const std::string& text) const;
  std::string decode(const std::vector<int>& ids) const;

  // encode that never byte-falls-back; throws naming the offending chunk.
  // Guards single-token assumptions (probe keywords).
  int single_token_id(const std::string& word) const;

  std::string to_json() const;
  static Vocabulary from_json(const std::string& text);
  uint64_t hash() const;

  // appends one special token at the top of the id range; returns its id
  int append_special(const std::string& name);

  friend Vocabulary build_vocab(const std::vector<std::string>& corpus,
                                const std::vector<std::string>& specials);

 private:
  void index_tokens();

  std::vector<std::string> tokens_;
  int n_content_ = 0;
  std::unordered_map<std::string, int> token_to_id_;
  std::vector<std::string> specials_;  // same order as their ids
};

// Frequency-descending, then lexicographic content ordering; byte tokens and
// the given specials are always present. Deterministic in the corpus multiset.
Vocabulary build_vocab(const std::vector<std::string>& corpus,
                       const std::vector<std::string>& specials);

// Grows a [V,d] row-major embedding matrix by one row for a new special token.
// Existing rows are untouched, bit for bit. Returns the new token id.
int add_special_token(Vocabulary& v, std::vector<double>& embedding, int64_t d,
                      const std::string& name, const InitStrategy& strategy);

}  // namespace delia::vocab
