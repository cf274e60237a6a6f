#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace delia {

// FNV-1a 64. Integrity/fingerprint hash for configs and artifacts, not crypto.
inline uint64_t fnv1a64(std::string_view bytes, uint64_t h = 0xcbf29ce484222325ull) {
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

std::string hex64(uint64_t v);

// shortest round-trip decimal form; the only way doubles enter CSV/JSON text
std::string fmt_double(double v);

std::string read_file(const std::filesystem::path& p);
void write_file(const std::filesystem::path& p, std::string_view content);
uint64_t hash_file(const std::filesystem::path& p);

std::vector<std::string> split(std::string_view s, char sep);
std::string join(const std::vector<std::string>& parts, std::string_view sep);
std::string trim(std::string_view s);
bool starts_with(std::string_view s, std::string_view prefix);

[[noreturn]] void fail(const std::string& msg);

// throws std::runtime_error with msg when cond is false
void ensure(bool cond, const std::string& msg);

}  // namespace delia
