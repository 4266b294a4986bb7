#pragma once

#include "volrep/nn.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace volrep::io {

using json = nlohmann::json;

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::uint64_t fnv1a(std::span<const unsigned char> bytes);
std::string hex64(std::uint64_t v);

/// Raw little-endian float32 array.
void write_f32(const std::filesystem::path& path, std::span<const float> data);
std::vector<float> read_f32(const std::filesystem::path& path);
void write_bytes(const std::filesystem::path& path, std::span<const unsigned char> data);
std::vector<unsigned char> read_bytes(const std::filesystem::path& path);

void write_text(const std::filesystem::path& path, const std::string& text);
std::string read_text(const std::filesystem::path& path);
json read_json(const std::filesystem::path& path);
/// Pretty-printed with a trailing newline; byte-stable for equal documents.
void write_json(const std::filesystem::path& path, const json& doc);

// ---- checkpoint archives ----------------------------------------------
//
// Layout: 8-byte magic "VOLREPCK", u32 format version, u64 header length,
// JSON header (meta + tensor table), then raw little-endian float64 payload.

inline constexpr std::uint32_t kArchiveVersion = 1;

struct Archive {
  json meta;
  std::map<std::string, nn::Matrix> tensors;
};

void save_archive(const std::filesystem::path& path, const json& meta, const nn::ParamList& params);
Archive load_archive(const std::filesystem::path& path);
/// Copies archived tensors into params by name. Missing names or shape
/// mismatches raise IoError.
void assign_params(const Archive& archive, const nn::ParamList& params);

// ---- flat key/value config --------------------------------------------
//
// One `key = value` per line; `#` starts a comment; values may be quoted.

class KvConfig {
 public:
  static KvConfig parse(const std::string& text);
  static KvConfig load(const std::filesystem::path& path);

  bool has(const std::string& key) const { return values_.count(key) != 0; }
  std::string get(const std::string& key, const std::string& fallback) const;
  double get(const std::string& key, double fallback) const;
  long get(const std::string& key, long fallback) const;
  int get(const std::string& key, int fallback) const;
  std::vector<double> get_list(const std::string& key, const std::vector<double>& fallback) const;
  const std::map<std::string, std::string>& values() const { return values_; }

 private:
  std::map<std::string, std::string> values_;
};

}  // namespace volrep::io
