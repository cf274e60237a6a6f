#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include "delia/model.hpp"

namespace delia::runio {

// Flat `key = value` configuration document. Full-line '#' comments, unique
// keys, typed strict lookups. Unknown-key rejection lives here so a typo in a
// config file never passes silently.
class KvConfig {
 public:
  static KvConfig parse(const std::string& text);
  static KvConfig load(const std::filesystem::path& p);

  bool has(const std::string& key) const { return kv_.count(key) > 0; }

  std::string get_string(const std::string& key) const;
  std::string get_string(const std::string& key, const std::string& dflt) const;
  int64_t get_int(const std::string& key) const;
  int64_t get_int(const std::string& key, int64_t dflt) const;
  double get_double(const std::string& key) const;
  double get_double(const std::string& key, double dflt) const;
  bool get_bool(const std::string& key) const;
  bool get_bool(const std::string& key, bool dflt) const;

  void set(const std::string& key, const std::string& value);

  // rejects any key outside `known`, naming the offender
  void require_known(const std::set<std::string>& known) const;

  // sorted "key = value" lines; both the hash input and the snapshot format
  std::string normalized() const;
  uint64_t hash() const;

 private:
  std::map<std::string, std::string> kv_;
};

// Deterministic CSV emitter. Doubles must already be text (fmt_double).
class Csv {
 public:
  explicit Csv(const std::vector<std::string>& header);
  void add_row(const std::vector<std::string>& cells);
  const std::string& str() const { return body_; }
  void write(const std::filesystem::path& p) const;
  size_t rows() const { return rows_; }

 private:
  size_t width_ = 0;
  std::string body_;
  size_t rows_ = 0;
};

std::string csv_escape(const std::string& cell);

// Minimal CSV reader matching the emitter above (quoted cells, doubled quotes).
std::vector<std::vector<std::string>> read_csv(const std::filesystem::path& p);

// Self-describing model snapshot: magic, little-endian u64 header length,
// JSON header (model config, buffer directory, adapter metadata, vocab hash,
// rng state), then all parameter doubles back to back in header order.
struct Checkpoint {
  model::TransformerConfig config;
  std::vector<std::pair<std::string, std::vector<double>>> params;
  std::vector<std::tuple<std::string, int64_t, double>> adapters;
  uint64_t vocab_hash = 0;
  uint64_t rng_state = 0;
};

void save_checkpoint(const std::filesystem::path& p, const model::ModelState& m,
                     uint64_t vocab_hash, uint64_t rng_state);
Checkpoint read_checkpoint(const std::filesystem::path& p);
model::ModelState restore_model(const Checkpoint& c);

// Named artifact list with content hashes over a run directory.
struct ManifestEntry {
  std::string name;
  std::string path;  // relative to the run directory
  uint64_t hash = 0;
};

class RunManifest {
 public:
  void add(const std::filesystem::path& dir, const std::string& name, const std::string& rel);
  const std::vector<ManifestEntry>& entries() const { return entries_; }
  bool has(const std::string& name) const;
  const ManifestEntry& entry(const std::string& name) const;

  std::string to_json() const;
  static RunManifest from_json(const std::string& text);
  void write(const std::filesystem::path& dir) const;
  static RunManifest load(const std::filesystem::path& dir);

  // every referenced artifact exists and hash-matches; throws naming the offender
  void verify(const std::filesystem::path& dir) const;

 private:
  std::vector<ManifestEntry> entries_;
};

}  // namespace delia::runio
