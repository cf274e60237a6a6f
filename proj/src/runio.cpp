#include "delia/runio.hpp"

#include <charconv>
#include <cstring>
#include <fstream>

#include "delia/util.hpp"
#include "json.hpp"

namespace delia::runio {

using nlohmann::json;

KvConfig KvConfig::parse(const std::string& text) {
  KvConfig c;
  int lineno = 0;
  for (const auto& raw : split(text, '\n')) {
    ++lineno;
    std::string line = trim(raw);
    if (line.empty() || line[0] == '#') continue;
    auto eq = line.find('=');
    ensure(eq != std::string::npos,
           "config line " + std::to_string(lineno) + ": expected 'key = value', got: " + line);
    std::string key = trim(line.substr(0, eq));
    std::string value = trim(line.substr(eq + 1));
    ensure(!key.empty(), "config line " + std::to_string(lineno) + ": empty key");
    ensure(key.find_first_of(" \t") == std::string::npos,
           "config line " + std::to_string(lineno) + ": key contains whitespace: " + key);
    ensure(c.kv_.count(key) == 0, "config: duplicate key: " + key);
    c.kv_[key] = value;
  }
  return c;
}

KvConfig KvConfig::load(const std::filesystem::path& p) { return parse(read_file(p)); }

std::string KvConfig::get_string(const std::string& key) const {
  auto it = kv_.find(key);
  if (it == kv_.end()) fail("config: missing required key: " + key);
  return it->second;
}

std::string KvConfig::get_string(const std::string& key, const std::string& dflt) const {
  auto it = kv_.find(key);
  return it == kv_.end() ? dflt : it->second;
}

int64_t KvConfig::get_int(const std::string& key) const {
  std::string v = get_string(key);
  int64_t out = 0;
  auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size())
    fail("config: key " + key + " is not an integer: " + v);
  return out;
}

int64_t KvConfig::get_int(const std::string& key, int64_t dflt) const {
  return has(key) ? get_int(key) : dflt;
}

double KvConfig::get_double(const std::string& key) const {
  std::string v = get_string(key);
  char* end = nullptr;
  double out = std::strtod(v.c_str(), &end);
  if (end != v.c_str() + v.size() || v.empty())
    fail("config: key " + key + " is not a number: " + v);
  return out;
}

double KvConfig::get_double(const std::string& key, double dflt) const {
  return has(key) ? get_double(key) : dflt;
}

bool KvConfig::get_bool(const std::string& key) const {
  std::string v = get_string(key);
  if (v == "true") return true;
  if (v == "false") return false;
  fail("config: key " + key + " is not a bool (true|false): " + v);
}

bool KvConfig::get_bool(const std::string& key, bool dflt) const {
  return has(key) ? get_bool(key) : dflt;
}

void KvConfig::set(const std::string& key, const std::string& value) {
  ensure(!key.empty() && key.find_first_of(" \t") == std::string::npos,
         "config: bad key: " + key);
  kv_[key] = value;
}

void KvConfig::require_known(const std::set<std::string>& known) const {
  for (const auto& [k, v] : kv_) {
    (void)v;
    ensure(known.count(k) > 0, "config: unknown key: " + k);
  }
}

std::string KvConfig::normalized() const {
  std::string out;
  for (const auto& [k, v] : kv_) out += k + " = " + v + "\n";
  return out;
}

uint64_t KvConfig::hash() const { return fnv1a64(normalized()); }

std::string csv_escape(const std::string& cell) {
  if (cell.find_first_of(",\"\n\r") == std::string::npos) return cell;
  std::string out = "\"";
  for (char c : cell) {
    out += c;
    if (c == '"') out += '"';
  }
  out += '"';
  return out;
}

Csv::Csv(const std::vector<std::string>& header) : width_(header.size()) {
  ensure(width_ > 0, "csv: empty header");
  add_row(header);
  rows_ = 0;
}

void Csv::add_row(const std::vector<std::string>& cells) {
  ensure(cells.size() == width_, "csv: row has " + std::to_string(cells.size()) +
                                     " cells, expected " + std::to_string(width_));
  for (size_t i = 0; i < cells.size(); ++i) {
    if (i) body_ += ',';
    body_ += csv_escape(cells[i]);
  }
  body_ += '\n';
  ++rows_;
}

void Csv::write(const std::filesystem::path& p) const { write_file(p, body_); }

std::vector<std::vector<std::string>> read_csv(const std::filesystem::path& p) {
  std::string text = read_file(p);
  std::vector<std::vector<std::string>> rows;
  std::vector<std::string> row;
  std::string cell;
  bool in_quotes = false;
  bool had_any = false;
  for (size_t i = 0; i < text.size(); ++i) {
    char c = text[i];
    if (in_quotes) {
      if (c == '"') {
        if (i + 1 < text.size() && text[i + 1] == '"') {
          cell += '"';
          ++i;
        } else {
          in_quotes = false;
        }
      } else {
        cell += c;
      }
      continue;
    }
    if (c == '"') {
      in_quotes = true;
      had_any = true;
    } else if (c == ',') {
      row.push_back(cell);
      cell.clear();
      had_any = true;
    } else if (c == '\n') {
      if (had_any || !cell.empty() || !row.empty()) {
        row.push_back(cell);
        rows.push_back(row);
      }
      row.clear();
      cell.clear();
      had_any = false;
    } else if (c != '\r') {
      cell += c;
      had_any = true;
    }
  }
  ensure(!in_quotes, "csv: unterminated quoted cell in " + p.string());
  if (had_any || !cell.empty() || !row.empty()) {
    row.push_back(cell);
    rows.push_back(row);
  }
  return rows;
}

namespace {

constexpr char kMagic[] = "DELIACKP1";
constexpr size_t kMagicLen = sizeof(kMagic) - 1;

void put_u64(std::string& out, uint64_t v) {
  for (int i = 0; i < 8; ++i) out += static_cast<char>((v >> (8 * i)) & 0xff);
}

uint64_t take_u64(const std::string& s, size_t off) {
  uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(static_cast<unsigned char>(s[off + i])) << (8 * i);
  return v;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& p, const model::ModelState& m,
                     uint64_t vocab_hash, uint64_t rng_state) {
  auto params = m.named_parameters();
  json header;
  header["config"] = json::parse(m.config().to_json());
  header["vocab_hash"] = hex64(vocab_hash);
  header["rng_state"] = hex64(rng_state);
  header["params"] = json::array();
  size_t total = 0;
  for (const auto& np : params) {
    header["params"].push_back({{"name", np.name}, {"count", np.tensor.value().size()}});
    total += np.tensor.value().size();
  }
  header["adapters"] = json::array();
  for (const auto& a : m.adapters())
    header["adapters"].push_back({{"target", a.target}, {"rank", a.rank}, {"alpha", a.alpha}});

  std::string head = header.dump();
  std::string out;
  out.reserve(kMagicLen + 8 + head.size() + total * sizeof(double));
  out.append(kMagic, kMagicLen);
  put_u64(out, head.size());
  out += head;
  for (const auto& np : params) {
    const auto& v = np.tensor.value();
    size_t off = out.size();
    out.resize(off + v.size() * sizeof(double));
    std::memcpy(out.data() + off, v.data(), v.size() * sizeof(double));
  }
  write_file(p, out);
}

Checkpoint read_checkpoint(const std::filesystem::path& p) {
  std::string raw = read_file(p);
  ensure(raw.size() >= kMagicLen + 8 && raw.compare(0, kMagicLen, kMagic) == 0,
         p.string() + ": not a checkpoint file");
  uint64_t head_len = take_u64(raw, kMagicLen);
  size_t body_off = kMagicLen + 8 + head_len;
  ensure(raw.size() >= body_off, p.string() + ": truncated checkpoint header");
  json header = json::parse(raw.substr(kMagicLen + 8, head_len), nullptr, false);
  ensure(!header.is_discarded(), p.string() + ": corrupt checkpoint header");

  Checkpoint c;
  c.config = model::TransformerConfig::from_json(header.at("config").dump());
  c.vocab_hash = std::stoull(header.at("vocab_hash").get<std::string>(), nullptr, 16);
  c.rng_state = std::stoull(header.at("rng_state").get<std::string>(), nullptr, 16);
  for (const auto& a : header.at("adapters"))
    c.adapters.emplace_back(a.at("target").get<std::string>(), a.at("rank").get<int64_t>(),
                            a.at("alpha").get<double>());
  size_t off = body_off;
  for (const auto& pj : header.at("params")) {
    std::string name = pj.at("name").get<std::string>();
    size_t count = pj.at("count").get<size_t>();
    ensure(off + count * sizeof(double) <= raw.size(),
           p.string() + ": truncated buffer for parameter " + name);
    std::vector<double> buf(count);
    std::memcpy(buf.data(), raw.data() + off, count * sizeof(double));
    off += count * sizeof(double);
    c.params.emplace_back(std::move(name), std::move(buf));
  }
  ensure(off == raw.size(), p.string() + ": trailing bytes after parameter buffers");
  return c;
}

model::ModelState restore_model(const Checkpoint& c) {
  return model::ModelState::from_buffers(c.config, c.params, c.adapters);
}

void RunManifest::add(const std::filesystem::path& dir, const std::string& name,
                      const std::string& rel) {
  ensure(!has(name), "manifest: duplicate artifact name: " + name);
  entries_.push_back({name, rel, hash_file(dir / rel)});
}

bool RunManifest::has(const std::string& name) const {
  for (const auto& e : entries_)
    if (e.name == name) return true;
  return false;
}

const ManifestEntry& RunManifest::entry(const std::string& name) const {
  for (const auto& e : entries_)
    if (e.name == name) return e;
  fail("manifest: no artifact named " + name);
}

std::string RunManifest::to_json() const {
  json j;
  j["artifacts"] = json::array();
  for (const auto& e : entries_)
    j["artifacts"].push_back({{"name", e.name}, {"path", e.path}, {"hash", hex64(e.hash)}});
  return j.dump(2) + "\n";
}

RunManifest RunManifest::from_json(const std::string& text) {
  json j = json::parse(text, nullptr, false);
  ensure(!j.is_discarded() && j.contains("artifacts"), "manifest: corrupt json");
  RunManifest m;
  for (const auto& e : j.at("artifacts"))
    m.entries_.push_back({e.at("name").get<std::string>(), e.at("path").get<std::string>(),
                          std::stoull(e.at("hash").get<std::string>(), nullptr, 16)});
  return m;
}

void RunManifest::write(const std::filesystem::path& dir) const {
  write_file(dir / "manifest.json", to_json());
}

RunManifest RunManifest::load(const std::filesystem::path& dir) {
  return from_json(read_file(dir / "manifest.json"));
}

void RunManifest::verify(const std::filesystem::path& dir) const {
  for (const auto& e : entries_) {
    auto p = dir / e.path;
    ensure(std::filesystem::exists(p), "manifest: missing artifact " + e.name + " at " + p.string());
    uint64_t h = hash_file(p);
    ensure(h == e.hash, "manifest: artifact " + e.name + " hash mismatch: expected " +
                            hex64(e.hash) + ", found " + hex64(h));
  }
}

}  // namespace delia::runio
